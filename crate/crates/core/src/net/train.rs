use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::model::{forward, is_stage2_param, Ctx, Heads, Model};
use crate::data::{scene_dir, Manifest, SceneBundle, View};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, PointCloud, Vec3};
use crate::gsmap::{merge_indexed, GsMap, CHANNELS};
use crate::losses::{chamfer_with_grad, depth_loss_views_with_grad, mse_with_grad, sample_indices};
use crate::metrics::psnr;
use crate::nn::{cosine_restart_lr, AdamW, Container, Graph, Tensor};
use crate::splat::{self, RenderSettings};

/// Camera-depth disagreement below which a reprojected pixel counts as visible.
const VISIBILITY_TOL: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// One scene prepared for training.
#[derive(Debug, Clone)]
pub struct TrainScene {
    /// Input images, `[n, H, W, 3]`.
    pub input: Tensor,
    pub views: Vec<View>,
    pub inputs: Vec<usize>,
    /// Views rendered for the appearance losses, inputs first.
    pub supervision: Vec<usize>,
    pub surface: PointCloud,
    /// Flat `[view, row, col]` indices of input pixels on the object.
    pub foreground: Vec<usize>,
    /// Pixel correspondences between input views, as flat indices.
    pub matches: Vec<(usize, usize)>,
}

impl TrainScene {
    pub fn new(bundle: SceneBundle, inputs: &[usize], supervision_views: usize) -> Result<Self> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= bundle.views.len()) {
            return Err(Error::Config(format!(
                "input view {bad} missing; scene has {} views",
                bundle.views.len()
            )));
        }
        let first = &bundle.views[inputs[0]];
        let (w, h) = (first.rgb.width, first.rgb.height);
        let mut data = Vec::with_capacity(inputs.len() * w * h * 3);
        let mut foreground = Vec::new();
        for (k, &i) in inputs.iter().enumerate() {
            let v = &bundle.views[i];
            if (v.rgb.width, v.rgb.height) != (w, h) {
                return Err(Error::Shape("input views differ in resolution".into()));
            }
            data.extend_from_slice(&v.rgb.data);
            foreground.extend((0..w * h).filter(|&p| v.alpha.data[p] > 0.5).map(|p| k * w * h + p));
        }
        let mut supervision = inputs.to_vec();
        supervision.extend((0..bundle.views.len()).filter(|i| !inputs.contains(i)));
        supervision.truncate(supervision_views.max(inputs.len()));
        let views: Vec<&View> = inputs.iter().map(|&i| &bundle.views[i]).collect();
        let matches = correspondences(&views);
        Ok(Self {
            input: Tensor::new(&[inputs.len(), h, w, 3], data),
            inputs: inputs.to_vec(),
            supervision,
            surface: bundle.surface,
            foreground,
            matches,
            views: bundle.views,
        })
    }

    pub fn resolution(&self) -> usize {
        self.input.shape[1]
    }
}

/// Foreground pixels of each view whose ground-truth surface point is also
/// visible in another view, paired with the pixel it lands on there.
pub fn correspondences(views: &[&View]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (a, va) in views.iter().enumerate() {
        let (w, h) = (va.depth.width, va.depth.height);
        for (b, vb) in views.iter().enumerate() {
            if a == b {
                continue;
            }
            for v in 0..h {
                for u in 0..w {
                    let i = v * w + u;
                    if !va.depth.mask[i] {
                        continue;
                    }
                    let x = va.camera.unproject(u, v, va.depth.values[i]);
                    let pc = vb.camera.world_to_camera(&x);
                    if pc.z <= 0.0 {
                        continue;
                    }
                    let (px, py) = vb.camera.project_camera_point(&pc);
                    if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                        continue;
                    }
                    let j = py as usize * w + px as usize;
                    if vb.depth.mask[j] && (vb.depth.values[j] - pc.z).abs() < VISIBILITY_TOL {
                        out.push((a * w * h + i, b * w * h + j));
                    }
                }
            }
        }
    }
    out
}

/// Reads every scene of a dataset directory.
pub fn load_scenes(dataset: impl AsRef<Path>, supervision_views: usize) -> Result<Vec<TrainScene>> {
    let dir = dataset.as_ref();
    let manifest = Manifest::load(dir)?;
    (0..manifest.scenes)
        .map(|id| TrainScene::new(SceneBundle::load(scene_dir(dir, id))?, &manifest.input_views, supervision_views))
        .collect()
}

/// Mean losses over one epoch, written as one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    /// Optimizer steps taken in this stage so far.
    pub step: usize,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("epoch logs serialize")
    }

    pub fn loss(&self, name: &str) -> f64 {
        self.losses.get(name).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    stage: Stage,
    epoch: usize,
    step: usize,
    stage1_complete: bool,
    adam_step: u64,
}

/// Model, optimizer state and progress counters of a two-stage run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub opt: AdamW,
    pub stage: Stage,
    /// Completed epochs of the current stage.
    pub epoch: usize,
    /// Optimizer steps taken in the current stage.
    pub step: usize,
    pub stage1_complete: bool,
    pub settings: RenderSettings,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        let model = Model::new(config.model.clone(), config.train.seed)?;
        Ok(Self {
            opt: AdamW::new(config.train.beta1, config.train.beta2, config.train.weight_decay),
            config,
            model,
            stage: Stage::One,
            epoch: 0,
            step: 0,
            stage1_complete: false,
            settings: RenderSettings::training(),
        })
    }

    /// Switches to `stage`, resetting the optimizer and counters when the
    /// stage changes.
    pub fn enter(&mut self, stage: Stage) -> Result<()> {
        if stage == Stage::Two && !self.stage1_complete && self.stage == Stage::One {
            return Err(Error::Config("stage 2 needs weights from a completed stage-1 run".into()));
        }
        if stage != self.stage {
            if stage == Stage::Two {
                self.stage1_complete = true;
            }
            let t = &self.config.train;
            self.opt = AdamW::new(t.beta1, t.beta2, t.weight_decay);
            self.stage = stage;
            self.epoch = 0;
            self.step = 0;
        }
        Ok(())
    }

    /// One geometry step: Chamfer against the surface samples, depth against
    /// the input views and the correspondence objective on matching features.
    pub fn stage1_step(&mut self, scene: &TrainScene, lr: f64) -> Result<BTreeMap<String, f64>> {
        let t = &self.config.train;
        let step_seed = t.seed ^ (self.step as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
        let mut g = Graph::new();
        let x = g.constant(scene.input.clone());
        let out = {
            let mut c = Ctx::new(&mut g, &self.model.params);
            forward(&mut c, &self.model.config, x, Heads::Geometry)?
        };
        let points = g.value(out.points).clone();
        let (n, h, w) = (points.shape[0], points.shape[1], points.shape[2]);
        let hw = h * w;
        let mut grad = Tensor::zeros(&points.shape);

        let idx = sample_indices(&scene.foreground, t.chamfer_points, step_seed)?;
        let cloud = PointCloud::new(idx.iter().map(|&i| [points.data[3 * i], points.data[3 * i + 1], points.data[3 * i + 2]]).collect());
        let (chamfer, cg) = chamfer_with_grad(&cloud, &scene.surface)?;
        for (&i, gi) in idx.iter().zip(&cg) {
            for k in 0..3 {
                grad.data[3 * i + k] += gi[k];
            }
        }

        let cams: Vec<_> = scene.inputs.iter().map(|&i| &scene.views[i].camera).collect();
        let pred: Vec<DepthMap> = (0..n)
            .map(|v| {
                let values = (0..hw)
                    .map(|p| {
                        let q = &points.data[3 * (v * hw + p)..3 * (v * hw + p) + 3];
                        cams[v].world_to_camera(&Vec3::new(q[0], q[1], q[2])).z
                    })
                    .collect();
                DepthMap::new(h, w, values, vec![true; hw])
            })
            .collect::<Result<_>>()?;
        let gt: Vec<DepthMap> = scene.inputs.iter().map(|&i| scene.views[i].depth.clone()).collect();
        let (depth, dg) = depth_loss_views_with_grad(&pred, &gt, &self.config.loss)?;
        for (v, gv) in dg.iter().enumerate() {
            let r = cams[v].rotation.row(2);
            for (p, &gz) in gv.iter().enumerate() {
                if gz != 0.0 {
                    for k in 0..3 {
                        grad.data[3 * (v * hw + p) + k] += gz * r[k];
                    }
                }
            }
        }

        let mut seeds = vec![(out.points, grad)];
        let mut matching = 0.0;
        if !scene.matches.is_empty() && t.match_pairs > 0 && t.match_weight > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed.wrapping_add(1));
            let pairs: Vec<(usize, usize)> =
                (0..t.match_pairs).map(|_| scene.matches[rng.gen_range(0..scene.matches.len())]).collect();
            let (ia, ib): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let nce = g.info_nce(out.matches, &ia, &ib, t.match_tau);
            matching = g.value(nce).data[0];
            seeds.push((nce, Tensor::scalar(t.match_weight)));
        }
        let total = chamfer + depth + t.match_weight * matching;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                what: "stage-1 loss".into(),
            });
        }
        let grads = g.backward(&seeds);
        drop(g);
        self.opt.update(&mut self.model.params, &grads.params, |_| lr);
        self.step += 1;
        Ok(BTreeMap::from([
            ("total".to_string(), total),
            ("chamfer".to_string(), chamfer),
            ("depth".to_string(), depth),
            ("match".to_string(), matching),
        ]))
    }

    /// One appearance step: the refined GS-map is splatted into every
    /// supervision view and compared with its RGB and alpha.
    pub fn stage2_step(&mut self, scene: &TrainScene, lr: f64) -> Result<BTreeMap<String, f64>> {
        let mut g = Graph::new();
        let x = g.constant(scene.input.clone());
        let out = {
            let mut c = Ctx::new(&mut g, &self.model.params);
            forward(&mut c, &self.model.config, x, Heads::Full)?
        };
        let gsmap_var = out.gsmap.expect("full forward");
        let values = g.value(gsmap_var).clone();
        let (n, h, w) = (values.shape[0], values.shape[1], values.shape[2]);
        let map = GsMap::from_parts(n, h, w, values.data, vec![true; n * h * w])?;
        let (set, index) = merge_indexed(&map)?;
        let mut grad = Tensor::zeros(&[n, h, w, CHANNELS]);
        let scale = 1.0 / scene.supervision.len() as f64;
        let (mut rgb_sum, mut alpha_sum, mut psnr_sum) = (0.0, 0.0, 0.0);
        for &vi in &scene.supervision {
            let view = &scene.views[vi];
            let (render, state) = splat::forward(&set, &view.camera, &self.settings);
            let (rgb, d_rgb) = mse_with_grad(&render.rgb, &view.rgb)?;
            let (alpha, d_alpha) = mse_with_grad(&render.alpha, &view.alpha)?;
            let gb = splat::backward(&state, &d_rgb, &d_alpha);
            for (k, gk) in gb.grads.iter().enumerate() {
                let base = index[k] * CHANNELS;
                for c in 0..CHANNELS {
                    grad.data[base + c] += scale * gk[c];
                }
            }
            rgb_sum += rgb;
            alpha_sum += alpha;
            psnr_sum += psnr(&render.rgb, &view.rgb)?.min(100.0);
        }
        let (rgb, alpha) = (rgb_sum * scale, alpha_sum * scale);
        let total = rgb + alpha;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                what: "stage-2 loss".into(),
            });
        }
        let grads = g.backward(&[(gsmap_var, grad)]);
        drop(g);
        let backbone = lr * self.config.train.backbone_lr_scale;
        self.opt.update(&mut self.model.params, &grads.params, |name| if is_stage2_param(name) { lr } else { backbone });
        self.step += 1;
        Ok(BTreeMap::from([
            ("total".to_string(), total),
            ("rgb".to_string(), rgb),
            ("alpha".to_string(), alpha),
            ("psnr".to_string(), psnr_sum * scale),
        ]))
    }

    /// Trains the current stage until `epochs` epochs are complete or
    /// `on_epoch` returns `false`; either way a stage-1 run then counts as
    /// complete. Every epoch visits each scene `repeats`
    /// times in a seeded order.
    pub fn run(&mut self, scenes: &[TrainScene], epochs: usize, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> bool) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Empty("no training scenes"));
        }
        let repeats = self.config.train.repeats.max(1);
        let steps_per_epoch = scenes.len() * repeats;
        while self.epoch < epochs {
            let mut order: Vec<usize> = (0..steps_per_epoch).map(|i| i % scenes.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.train.seed.wrapping_add(self.epoch as u64)));
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            let mut lr = 0.0;
            for &s in &order {
                let t = &self.config.train;
                lr = cosine_restart_lr(t.lr, self.step as f64 / steps_per_epoch as f64, t.restart_epochs);
                let losses = match self.stage {
                    Stage::One => self.stage1_step(&scenes[s], lr)?,
                    Stage::Two => self.stage2_step(&scenes[s], lr)?,
                };
                for (k, v) in losses {
                    *sums.entry(k).or_default() += v / steps_per_epoch as f64;
                }
            }
            self.epoch += 1;
            let log = EpochLog {
                stage: self.stage.number(),
                epoch: self.epoch,
                step: self.step,
                lr,
                losses: sums,
            };
            if !on_epoch(self, &log) {
                break;
            }
        }
        if self.stage == Stage::One {
            self.stage1_complete = true;
        }
        Ok(())
    }

    /// Weights, optimizer moments and progress in one container.
    pub fn checkpoint(&self) -> Result<Container> {
        let meta = Meta {
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
            stage1_complete: self.stage1_complete,
            adam_step: self.opt.step,
        };
        let mut tensors = BTreeMap::new();
        for (name, t) in self.model.params.iter() {
            tensors.insert(format!("param/{name}"), t.clone());
            for (prefix, state) in [("adam.m", &self.opt.m), ("adam.v", &self.opt.v)] {
                if let Some(s) = state.get(name) {
                    tensors.insert(format!("{prefix}/{name}"), Tensor::new(&t.shape, s.clone()));
                }
            }
        }
        Ok(Container {
            config: self.config.to_toml()?,
            meta: serde_json::to_string(&meta)?,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn from_checkpoint(c: &Container) -> Result<Self> {
        let config = Config::from_toml(&c.config)?;
        let meta: Meta = serde_json::from_str(&c.meta)?;
        let mut params = crate::nn::ParamStore::new();
        let mut opt = AdamW::new(config.train.beta1, config.train.beta2, config.train.weight_decay);
        opt.step = meta.adam_step;
        for (name, t) in &c.tensors {
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, t.clone());
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                opt.m.insert(p.to_string(), t.data.clone());
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                opt.v.insert(p.to_string(), t.data.clone());
            } else {
                return Err(Error::Config(format!("unexpected checkpoint tensor {name}")));
            }
        }
        Ok(Self {
            model: Model::from_params(config.model.clone(), params)?,
            opt,
            config,
            stage: meta.stage,
            epoch: meta.epoch,
            step: meta.step,
            stage1_complete: meta.stage1_complete,
            settings: RenderSettings::training(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path)?)
    }
}

/// Loads only the network from a training checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Trainer::load(path).map(|t| t.model)
}
