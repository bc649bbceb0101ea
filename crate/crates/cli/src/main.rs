use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use splatmap::data::{load_view, make_dataset, scene_dir, Manifest, Protocol, Rig, View};
use splatmap::geometry::Camera;
use splatmap::gsmap::ply::export_ply;
use splatmap::gsmap::GsMap;
use splatmap::imaging::Image;
use splatmap::net::{load_model, load_scenes, Config, Stage, Trainer};
use splatmap::splat::rasterize;
use splatmap_cli::eval::evaluate;
use splatmap_cli::fit::{fit, gaussians, initialize, FitOptions};
use splatmap_cli::viewlist;

#[derive(Parser)]
#[command(name = "splatmap", version, about = "Gaussian-splat maps from multi-view images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural scenes with the analytic oracle.
    GenData {
        #[arg(long)]
        scenes: usize,
        /// Views per scene; eval16 always renders 16.
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value = "train")]
        protocol: Protocol,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a GS-map for one scene directly through the renderer.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Views that seed the map and supervise it, e.g. `0,1,2,3`.
        #[arg(long, default_value = "0,1,2,3")]
        views: String,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration JSON loss lines; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the network in one or both stages.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "both")]
        stage: StageArg,
        /// TOML file with `[model]`, `[loss]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch JSON loss lines; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Predict a GS-map from images alone.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rasterize a GS-map from a camera file.
    Render {
        #[arg(long)]
        gsmap: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image and depth metrics of a GS-map against dataset views.
    Eval {
        #[arg(long)]
        gsmap: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Views to score; defaults to every view outside the input rig.
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write a GS-map as a binary PLY point cloud of Gaussians.
    Export {
        #[arg(long)]
        gsmap: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes through a sibling temporary file so `path` only ever holds a
/// complete artifact.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> splatmap::Result<()>) -> Result<()> {
    let name = path.file_name().context("output path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".partial-{name}"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(anyhow::Error::from(e).context(format!("writing {}", path.display())));
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    })
}

fn load_views(data: &Path, scene: usize, ids: &[usize]) -> Result<Vec<View>> {
    let dir = scene_dir(data, scene);
    ids.iter()
        .map(|&k| load_view(&dir, k).with_context(|| format!("view {k} of {}", dir.display())))
        .collect()
}

fn gen_data(scenes: usize, views: usize, res: usize, protocol: Protocol, seed: u64, out: &Path) -> Result<()> {
    let rig = Rig {
        resolution: res,
        ..Rig::default()
    };
    let m = make_dataset(out, scenes, views, protocol, rig, seed)?;
    println!(
        "{} scenes x {} views at {}x{} ({:?}), inputs {:?}, seed {} -> {}",
        m.scenes,
        m.views_per_scene,
        res,
        res,
        m.protocol,
        m.input_views,
        m.seed,
        out.display()
    );
    Ok(())
}

fn run_fit(data: &Path, scene: usize, views: &str, iters: usize, out: &Path, log: Option<PathBuf>) -> Result<()> {
    let ids = viewlist::parse(views).map_err(anyhow::Error::msg)?;
    let loaded = load_views(data, scene, &ids)?;
    let refs: Vec<&View> = loaded.iter().collect();
    let init = initialize(&refs, FitOptions::default().init_opacity)?;
    let opts = FitOptions {
        iters,
        ..FitOptions::default()
    };
    let mut lines = String::new();
    let map = fit(&init, &refs, &opts, |l| {
        lines.push_str(&serde_json::to_string(l).expect("fit logs serialize"));
        lines.push('\n');
    })?;
    write_atomic(&log_path(out, log), |p| Ok(std::fs::write(p, &lines)?))?;
    write_atomic(out, |p| map.save(p))?;
    println!("fitted {} Gaussians over {} iterations -> {}", map.valid_count(), iters, out.display());
    Ok(())
}

fn run_train(
    data: &Path,
    stage: StageArg,
    config: Option<PathBuf>,
    out: &Path,
    resume: Option<PathBuf>,
    log: Option<PathBuf>,
) -> Result<()> {
    let mut trainer = match &resume {
        Some(ckpt) => Trainer::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?,
        None => {
            let config = match &config {
                Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => Config::default(),
            };
            Trainer::new(config)?
        }
    };
    if resume.is_some() && config.is_some() {
        eprintln!("note: continuing with the configuration stored in the checkpoint");
    }
    match stage {
        StageArg::One if trainer.stage == Stage::Two => bail!("checkpoint has already moved on to stage 2"),
        StageArg::Two if !trainer.stage1_complete => {
            bail!("stage 2 needs a completed stage-1 checkpoint; pass one with --resume")
        }
        _ => {}
    }
    let scenes = load_scenes(data, trainer.config.train.supervision_views)?;
    let log = log_path(out, log);
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log)?;
    let mut failure = None;
    let mut run = |trainer: &mut Trainer, epochs: usize| -> Result<()> {
        trainer.run(&scenes, epochs, |t, entry| {
            let line = entry.to_line();
            println!("{line}");
            let saved = writeln!(log_file, "{line}")
                .map_err(anyhow::Error::from)
                .and_then(|_| write_atomic(out, |p| t.save(p)));
            match saved {
                Ok(()) => true,
                Err(e) => {
                    failure = Some(e);
                    false
                }
            }
        })?;
        failure.take().map_or(Ok(()), Err)
    };
    if matches!(stage, StageArg::One | StageArg::Both) && trainer.stage == Stage::One {
        let epochs = trainer.config.train.stage1_epochs;
        run(&mut trainer, epochs)?;
    }
    if matches!(stage, StageArg::Two | StageArg::Both) {
        trainer.enter(Stage::Two)?;
        let epochs = trainer.config.train.stage2_epochs;
        run(&mut trainer, epochs)?;
    }
    write_atomic(out, |p| trainer.save(p))?;
    Ok(())
}

fn run_infer(ckpt: &Path, images: &[PathBuf], out: &Path) -> Result<()> {
    let model = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let imgs = images
        .iter()
        .map(|p| {
            let (rgb, _) = Image::load_rgba(p)?.split_alpha()?;
            Ok(rgb)
        })
        .collect::<splatmap::Result<Vec<_>>>()?;
    let map = model.infer(&imgs)?;
    write_atomic(out, |p| map.save(p))
}

fn run_render(gsmap: &Path, camera: &Path, out: &Path) -> Result<()> {
    let map = GsMap::load(gsmap)?;
    let cam = Camera::load(camera)?;
    let r = rasterize(&gaussians(&map), &cam);
    write_atomic(out, |p| r.rgb.save_png(p))
}

fn run_eval(gsmap: &Path, data: &Path, scene: usize, views: Option<String>, report: &Path) -> Result<()> {
    let manifest = Manifest::load(data)?;
    let ids = match views {
        Some(v) => viewlist::parse(&v).map_err(anyhow::Error::msg)?,
        None => (0..manifest.views_per_scene).filter(|k| !manifest.input_views.contains(k)).collect(),
    };
    let map = GsMap::load(gsmap)?;
    let loaded = load_views(data, scene, &ids)?;
    let pairs: Vec<(usize, &View)> = ids.iter().copied().zip(loaded.iter()).collect();
    let r = evaluate(&map, &pairs)?;
    let text = serde_json::to_string_pretty(&r)?;
    write_atomic(report, |p| Ok(std::fs::write(p, &text)?))?;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} views: psnr {} ssim {} abs_rel {} sq_rel {} rmse {}",
        r.views.len(),
        show(r.mean.psnr),
        show(r.mean.ssim),
        show(r.mean.abs_rel),
        show(r.mean.sq_rel),
        show(r.mean.rmse)
    );
    Ok(())
}

fn run_export(gsmap: &Path, out: &Path) -> Result<()> {
    let map = GsMap::load(gsmap)?;
    write_atomic(out, |p| export_ply(&gaussians(&map), p))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            scenes,
            views,
            res,
            protocol,
            seed,
            out,
        } => gen_data(scenes, views, res, protocol, seed, &out),
        Command::Fit {
            data,
            scene,
            views,
            iters,
            out,
            log,
        } => run_fit(&data, scene, &views, iters, &out, log),
        Command::Train {
            data,
            stage,
            config,
            out,
            resume,
            log,
        } => run_train(&data, stage, config, &out, resume, log),
        Command::Infer { ckpt, images, out } => run_infer(&ckpt, &images, &out),
        Command::Render { gsmap, camera, out } => run_render(&gsmap, &camera, &out),
        Command::Eval {
            gsmap,
            data,
            scene,
            views,
            report,
        } => run_eval(&gsmap, &data, scene, views, &report),
        Command::Export { gsmap, out } => run_export(&gsmap, &out),
    }
}
