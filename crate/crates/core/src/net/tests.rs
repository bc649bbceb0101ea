use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gsmap::CHANNELS;
use crate::nn::{gradcheck, Graph, ParamStore, Tensor};

fn toy() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch: 8,
        dim: 8,
        heads: 2,
        encoder_depth: 1,
        decoder_depth: 4,
        taps: [1, 2, 3, 4],
        mlp_ratio: 2,
        head_width: 4,
        match_dim: 4,
        refine_width: 2,
        refine_heads: 2,
        views: 2,
    }
}

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[n, size, size, 3], (0..n * size * size * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
}

/// Replaces every zero-initialized tensor with random values so gradients
/// reach the layers behind it.
fn randomize_zeros(p: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        let t = p.get_mut(&n).unwrap();
        if t.data.iter().all(|&v| v == 0.0) {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
}

fn run(model: &Model, input: &Tensor, heads: Heads) -> (Graph, Outputs) {
    let mut g = Graph::inference();
    let x = g.constant(input.clone());
    let out = {
        let mut c = Ctx::new(&mut g, &model.params);
        forward(&mut c, &model.config, x, heads).unwrap()
    };
    (g, out)
}

#[test]
fn default_forward_contract() {
    let model = Model::new(ModelConfig::default(), 1).unwrap();
    let input = images(4, 64, 2);
    let (g, out) = run(&model, &input, Heads::Full);
    assert_eq!(out.decoder.len(), 12);
    assert_eq!(g.value(out.decoder[0]).shape, vec![4, 64, 64]);
    assert_eq!(g.value(out.point_native).shape, vec![4, 32, 32, 3]);
    assert_eq!(g.value(out.points).shape, vec![4, 64, 64, 3]);
    assert_eq!(g.value(out.matches).shape, vec![4, 64, 64, 16]);
    assert_eq!(g.value(out.gsmap.unwrap()).shape, vec![4, 64, 64, CHANNELS]);
    // The fused taps are the decoder layers 3, 6, 9 and 12 passed through
    // identity-initialized fusion blocks.
    for (f, layer) in out.fused.iter().zip([3, 6, 9, 12]) {
        assert_eq!(g.value(*f), g.value(out.decoder[layer - 1]));
    }
    // A fresh refinement network leaves the map unchanged.
    assert_eq!(g.value(out.gsmap.unwrap()), g.value(out.coarse.unwrap()));

    let imgs: Vec<crate::imaging::Image> = (0..4)
        .map(|v| crate::imaging::Image::new(64, 64, 3, input.data[v * 64 * 64 * 3..(v + 1) * 64 * 64 * 3].to_vec()).unwrap())
        .collect();
    let map = model.infer(&imgs).unwrap();
    assert_eq!((map.n_views, map.height, map.width), (4, 64, 64));
    assert!(map.check_invariants().is_ok());
    assert!(model.infer(&imgs[..3]).is_err());
}

#[test]
fn fusion_identity_needs_zero_output_projection() {
    let mut model = Model::new(toy(), 3).unwrap();
    let input = images(2, 32, 4);
    let (g, out) = run(&model, &input, Heads::Geometry);
    for (f, t) in out.fused.iter().zip(model.config.taps) {
        assert_eq!(g.value(*f), g.value(out.decoder[t - 1]));
    }
    model.params.get_mut("fuse.1.sa.o.w").unwrap().data[0] = 0.5;
    let (g, out) = run(&model, &input, Heads::Geometry);
    assert_ne!(g.value(out.fused[1]), g.value(out.decoder[1]));
}

#[test]
fn fusion_is_view_permutation_equivariant() {
    let mut model = Model::new(toy(), 5).unwrap();
    randomize_zeros(&mut model.params, 6);
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, t, d) = (4, cfg.tokens(), cfg.dim);
    let taps: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[n, t, d], 1.0, &mut rng)).collect();
    let perm = [2, 0, 3, 1];
    let eval = |taps: &[Tensor]| -> Vec<Tensor> {
        let mut g = Graph::inference();
        let vars: Vec<_> = taps.iter().map(|x| g.constant(x.clone())).collect();
        let fused = {
            let mut c = Ctx::new(&mut g, &model.params);
            global_fusion(&mut c, &cfg, &vars)
        };
        fused.iter().map(|&v| g.value(v).clone()).collect()
    };
    let permute = |x: &Tensor| {
        let m = t * d;
        Tensor::new(&x.shape, perm.iter().flat_map(|&i| x.data[i * m..(i + 1) * m].to_vec()).collect())
    };
    let base = eval(&taps);
    let permuted = eval(&taps.iter().map(permute).collect::<Vec<_>>());
    for (a, b) in base.iter().zip(&permuted) {
        let pa = permute(a);
        for (x, y) in pa.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn siamese_and_twin_symmetry() {
    let model = Model::new(toy(), 8).unwrap();
    let cfg = &model.config;
    let one = images(1, 32, 9);
    let other = images(1, 32, 10);
    let cat = |a: &Tensor, b: &Tensor| Tensor::new(&[2, 32, 32, 3], [a.data.clone(), b.data.clone()].concat());

    // Duplicated views give identical token grids and identical streams.
    let (g, out) = run(&model, &cat(&one, &one), Heads::Full);
    let m = cfg.tokens() * cfg.dim;
    let last = g.value(*out.decoder.last().unwrap());
    assert_eq!(last.data[..m], last.data[m..]);
    let feats = g.value(out.matches);
    let half = feats.len() / 2;
    assert_eq!(feats.data[..half], feats.data[half..]);

    // Swapping the views of a pair swaps the decoder streams exactly.
    let (ga, a) = run(&model, &cat(&one, &other), Heads::Geometry);
    let (gb, b) = run(&model, &cat(&other, &one), Heads::Geometry);
    for (la, lb) in a.decoder.iter().zip(&b.decoder) {
        let (x, y) = (ga.value(*la), gb.value(*lb));
        assert_eq!(x.data[..m], y.data[m..]);
        assert_eq!(x.data[m..], y.data[..m]);
    }

    let mut g = Graph::inference();
    let x = g.constant(images(3, 32, 1));
    let mut c = Ctx::new(&mut g, &model.params);
    assert!(matches!(forward(&mut c, cfg, x, Heads::Geometry), Err(crate::Error::OddViewCount(3))));
}

#[test]
fn zero_weights_give_zero_point_map() {
    let mut model = Model::new(toy(), 11).unwrap();
    let names: Vec<String> = model.params.names().filter(|n| n.starts_with("head.point.")).map(String::from).collect();
    for n in names {
        model.params.get_mut(&n).unwrap().data.fill(0.0);
    }
    let (g, out) = run(&model, &images(2, 32, 12), Heads::Geometry);
    assert!(g.value(out.points).data.iter().all(|&v| v == 0.0));
    assert_eq!(g.value(out.point_native).shape, vec![2, 16, 16, 3]);
}

#[test]
fn refinement_output_is_a_valid_gsmap() {
    let mut model = Model::new(toy(), 13).unwrap();
    randomize_zeros(&mut model.params, 14);
    let imgs: Vec<crate::imaging::Image> = (0..2)
        .map(|v| crate::imaging::Image::new(32, 32, 3, images(1, 32, 20 + v).data).unwrap())
        .collect();
    let map = model.infer(&imgs).unwrap();
    assert!(map.check_invariants().is_ok());
}

/// Probes the chosen output with a fixed random tensor and checks the
/// selected parameters against central differences with h = 1e-3.
fn check_net(select: fn(&str) -> bool, pick: fn(&Outputs) -> crate::nn::Var, heads: Heads, seed: u64) {
    let mut model = Model::new(toy(), seed).unwrap();
    randomize_zeros(&mut model.params, seed + 1);
    let input = images(2, 32, seed + 2);
    let cfg = model.config.clone();
    let shape = {
        let (g, out) = run(&model, &input, heads);
        g.value(pick(&out)).shape.clone()
    };
    let probe = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 3));
    let report = gradcheck(&mut model.params, select, 3, 1e-3, 1e-6, seed, |g, p| {
        let x = g.constant(input.clone());
        let mut c = Ctx::new(g, p);
        let out = forward(&mut c, &cfg, x, heads).unwrap();
        let y = pick(&out);
        c.g.dot_const(y, &probe)
    });
    assert!(report.checked > 0);
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn encoder_and_decoder_gradients() {
    check_net(
        |n| n.starts_with("enc.") || n.starts_with("dec.0.") || n.starts_with("dec.3."),
        |o| o.point_native,
        Heads::Geometry,
        30,
    );
}

#[test]
fn fusion_and_point_head_gradients() {
    check_net(
        |n| n.starts_with("fuse.") || n.starts_with("head.point."),
        |o| o.points,
        Heads::Geometry,
        40,
    );
}

#[test]
fn match_head_gradients() {
    check_net(|n| n.starts_with("head.match.") || n.starts_with("dec.1."), |o| o.matches, Heads::Geometry, 50);
}

#[test]
fn gaussian_head_and_refinement_gradients() {
    check_net(
        |n| n.starts_with("head.gauss.") || n.starts_with("refine.") || n == "enc.patch.w",
        |o| o.gsmap.unwrap(),
        Heads::Full,
        60,
    );
}

#[test]
fn refinement_gradients_on_16px_input() {
    let cfg = ModelConfig {
        image_size: 16,
        ..toy()
    };
    let mut params = ParamStore::new();
    let input = {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        Tensor::uniform(&[2, 16, 16, CHANNELS + cfg.match_dim + 3], 1.0, &mut rng)
    };
    {
        let mut g = Graph::inference();
        let x = g.constant(input.clone());
        let mut c = Ctx::growing(&mut g, &mut params, 71);
        refine_delta(&mut c, &cfg, x);
    }
    randomize_zeros(&mut params, 72);
    let probe = Tensor::uniform(&[2, 16, 16, CHANNELS], 1.0, &mut ChaCha8Rng::seed_from_u64(73));
    let report = gradcheck(&mut params, |_| true, 2, 1e-3, 1e-6, 74, |g, p| {
        let x = g.constant(input.clone());
        let mut c = Ctx::new(g, p);
        let y = refine_delta(&mut c, &cfg, x);
        c.g.dot_const(y, &probe)
    });
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn weights_must_match_the_config() {
    let m = Model::new(toy(), 1).unwrap();
    assert!(Model::from_params(toy(), m.params.clone()).is_ok());
    let mut bigger = toy();
    bigger.dim = 16;
    bigger.heads = 4;
    assert!(Model::from_params(bigger, m.params.clone()).is_err());
}
