use splatmap::data::{make_dataset, Protocol, Rig, View};
use splatmap::net::{correspondences, load_model, load_scenes, Config, ModelConfig, Stage, TrainScene, Trainer};

fn toy_config() -> Config {
    let mut c = Config::default();
    c.model = ModelConfig {
        image_size: 32,
        dim: 8,
        heads: 2,
        encoder_depth: 1,
        decoder_depth: 4,
        taps: [1, 2, 3, 4],
        head_width: 4,
        match_dim: 4,
        refine_width: 2,
        ..ModelConfig::default()
    };
    c.train.chamfer_points = 500;
    c.train.supervision_views = 5;
    c.train.repeats = 2;
    c
}

fn toy_scenes() -> (tempfile::TempDir, Vec<TrainScene>) {
    let dir = tempfile::tempdir().unwrap();
    let rig = Rig {
        resolution: 32,
        ..Rig::default()
    };
    make_dataset(dir.path(), 1, 6, Protocol::Train, rig, 11).unwrap();
    let scenes = load_scenes(dir.path(), 5).unwrap();
    (dir, scenes)
}

#[test]
fn scenes_put_inputs_first() {
    let (_dir, scenes) = toy_scenes();
    let s = &scenes[0];
    assert_eq!(s.inputs, vec![0, 1, 2, 3]);
    assert_eq!(s.supervision, vec![0, 1, 2, 3, 4]);
    assert_eq!(s.input.shape, vec![4, 32, 32, 3]);
    assert!(!s.foreground.is_empty() && !s.matches.is_empty());
}

#[test]
fn correspondences_land_on_the_same_surface_point() {
    let (_dir, scenes) = toy_scenes();
    let s = &scenes[0];
    let views: Vec<&View> = s.inputs.iter().map(|&i| &s.views[i]).collect();
    let hw = 32 * 32;
    let world = |flat: usize| {
        let (v, p) = (flat / hw, flat % hw);
        let view = views[v];
        view.camera.unproject(p % 32, p / 32, view.depth.values[p])
    };
    let pairs = correspondences(&views);
    assert_eq!(pairs, s.matches);
    for &(a, b) in &pairs {
        assert_ne!(a / hw, b / hw);
        // Nearest-pixel rounding moves the point by at most about one pixel footprint.
        assert!((world(a) - world(b)).norm() < 0.08, "{a} -> {b}");
    }
}

#[test]
fn stage_two_waits_for_stage_one() {
    let (_dir, scenes) = toy_scenes();
    let mut t = Trainer::new(toy_config()).unwrap();
    assert!(t.enter(Stage::Two).is_err());
    let mut logs = Vec::new();
    t.run(&scenes, 1, |_, l| {
        logs.push(l.clone());
        true
    })
    .unwrap();
    assert!(t.stage1_complete);
    assert_eq!((logs[0].stage, logs[0].epoch, logs[0].step), (1, 1, 2));
    for k in ["total", "chamfer", "depth", "match"] {
        assert!(logs[0].loss(k).is_finite(), "{k}");
    }
    t.enter(Stage::Two).unwrap();
    assert_eq!((t.stage, t.epoch, t.step), (Stage::Two, 0, 0));
    t.run(&scenes, 1, |_, l| {
        logs.push(l.clone());
        true
    })
    .unwrap();
    let line: serde_json::Value = serde_json::from_str(&logs[1].to_line()).unwrap();
    assert_eq!(line["stage"], 2);
    let keys: Vec<&String> = line["losses"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["alpha", "psnr", "rgb", "total"]);
}

#[test]
fn checkpoints_resume_where_they_stopped() {
    let (dir, scenes) = toy_scenes();
    let mut t = Trainer::new(toy_config()).unwrap();
    t.run(&scenes, 1, |_, _| true).unwrap();
    let path = dir.path().join("run.ckpt");
    t.save(&path).unwrap();

    let mut back = Trainer::load(&path).unwrap();
    assert_eq!((back.stage, back.epoch, back.step, back.stage1_complete), (Stage::One, 1, 2, true));
    assert_eq!(back.config, t.config);
    assert_eq!(back.opt.step, t.opt.step);
    for (name, p) in t.model.params.iter() {
        let q = back.model.params.get(name).unwrap();
        assert!(p.data.iter().zip(&q.data).all(|(a, b)| *b == *a as f32 as f64), "{name}");
    }
    assert_eq!(back.opt.m.keys().collect::<Vec<_>>(), t.opt.m.keys().collect::<Vec<_>>());
    assert!(!back.opt.v.is_empty() && back.opt.v.len() == t.opt.v.len());
    assert_eq!(load_model(&path).unwrap().params.len(), t.model.params.len());

    let mut epochs = Vec::new();
    back.run(&scenes, 2, |_, l| {
        epochs.push((l.epoch, l.step));
        true
    })
    .unwrap();
    assert_eq!(epochs, vec![(2, 4)]);
}

#[test]
fn stage_one_loss_goes_down() {
    let (_dir, scenes) = toy_scenes();
    let mut cfg = toy_config();
    cfg.train.repeats = 4;
    let mut t = Trainer::new(cfg).unwrap();
    let mut totals = Vec::new();
    t.run(&scenes, 4, |_, l| {
        totals.push(l.loss("total"));
        true
    })
    .unwrap();
    assert!(totals[3] < totals[0], "{totals:?}");
}
