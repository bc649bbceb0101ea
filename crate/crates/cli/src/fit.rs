//! Direct per-scene GS-map optimization through the differentiable renderer.

use serde::Serialize;
use splatmap::data::View;
use splatmap::gsmap::{
    activate, activate_pixel_backward, logit, softplus_inverse, GaussianSet, GsMap, RawGsMap, CHANNELS, COLOR,
    OPACITY, POSITION, ROTATION, SCALE, SCALE_COEFF,
};
use splatmap::losses::mse_with_grad;
use splatmap::metrics::psnr;
use splatmap::nn::{AdamW, ParamStore, Tensor};
use splatmap::splat::{self, RenderSettings};
use splatmap::{Error, Result};

/// Learning rates per channel group and the initial opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub iters: usize,
    pub lr_position: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub init_opacity: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iters: 2000,
            lr_position: 5e-5,
            lr_scale: 1e-3,
            lr_rotation: 1e-3,
            lr_opacity: 2e-2,
            lr_color: 2e-2,
            init_opacity: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitLog {
    pub iter: usize,
    pub loss: f64,
    pub rgb: f64,
    pub alpha: f64,
    pub psnr: f64,
}

const GROUPS: [(&str, std::ops::Range<usize>); 5] = [
    ("position", POSITION),
    ("scale", SCALE),
    ("rotation", ROTATION),
    ("opacity", OPACITY..OPACITY + 1),
    ("color", COLOR),
];

/// One Gaussian per object pixel of every view: positions back-projected
/// from depth, isotropic scale matching the pixel footprint, identity
/// rotation, a fixed opacity and the pixel's color.
pub fn initialize(views: &[&View], opacity: f64) -> Result<RawGsMap> {
    let first = views.first().ok_or(Error::Empty("no input views to fit"))?;
    let (w, h) = (first.rgb.width, first.rgb.height);
    let mut values = Vec::with_capacity(views.len() * w * h * CHANNELS);
    let mut mask = Vec::with_capacity(views.len() * w * h);
    for v in views {
        if (v.rgb.width, v.rgb.height) != (w, h) {
            return Err(Error::Shape("input views differ in resolution".into()));
        }
        let fx = v.camera.intrinsics.fx;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let valid = v.alpha.data[i] > 0.5 && v.depth.mask[i];
                let mut px = [0.0; CHANNELS];
                px[ROTATION.start] = 1.0;
                if valid {
                    let z = v.depth.values[i];
                    let p = v.camera.unproject(x, y, z);
                    px[POSITION].copy_from_slice(p.as_slice());
                    let s = softplus_inverse(z / fx / SCALE_COEFF);
                    px[SCALE].fill(s);
                    px[OPACITY] = logit(opacity);
                    for (k, c) in COLOR.enumerate() {
                        px[c] = logit(v.rgb.data[3 * i + k].clamp(0.02, 0.98));
                    }
                }
                values.extend_from_slice(&px);
                mask.push(valid);
            }
        }
    }
    RawGsMap::new(views.len(), h, w, values, mask)
}

fn split(raw: &RawGsMap) -> (ParamStore, Vec<usize>) {
    let index: Vec<usize> = (0..raw.mask.len()).filter(|&i| raw.mask[i]).collect();
    let mut store = ParamStore::new();
    for (name, range) in GROUPS {
        let data = index.iter().flat_map(|&i| raw.pixel(i)[range.clone()].to_vec()).collect();
        store.insert(name, Tensor::new(&[index.len(), range.len()], data));
    }
    (store, index)
}

fn join(store: &ParamStore, index: &[usize], template: &RawGsMap) -> RawGsMap {
    let mut out = template.clone();
    for (name, range) in GROUPS {
        let t = store.get(name).expect("fit parameter group");
        for (k, &i) in index.iter().enumerate() {
            out.values[i * CHANNELS + range.start..i * CHANNELS + range.end]
                .copy_from_slice(&t.data[k * range.len()..(k + 1) * range.len()]);
        }
    }
    out
}

/// Renders `map` into each view and returns mean loss terms, mean PSNR
/// and the mean per-Gaussian gradient.
fn render_loss(set: &GaussianSet, views: &[&View], settings: &RenderSettings) -> Result<(f64, f64, f64, Vec<[f64; CHANNELS]>)> {
    let scale = 1.0 / views.len() as f64;
    let mut grads = vec![[0.0; CHANNELS]; set.len()];
    let (mut rgb, mut alpha, mut ps) = (0.0, 0.0, 0.0);
    for v in views {
        let (out, state) = splat::forward(set, &v.camera, settings);
        let (l_rgb, d_rgb) = mse_with_grad(&out.rgb, &v.rgb)?;
        let (l_alpha, d_alpha) = mse_with_grad(&out.alpha, &v.alpha)?;
        for (acc, g) in grads.iter_mut().zip(splat::backward(&state, &d_rgb, &d_alpha).grads) {
            for c in 0..CHANNELS {
                acc[c] += scale * g[c];
            }
        }
        rgb += scale * l_rgb;
        alpha += scale * l_alpha;
        ps += scale * psnr(&out.rgb, &v.rgb)?.min(100.0);
    }
    Ok((rgb, alpha, ps, grads))
}

/// Optimizes all 14 channels of the initial map against the RGB and alpha
/// of `supervision`. Calls `log` once per iteration with the loss before
/// the update. Returns the activated result.
pub fn fit(
    init: &RawGsMap,
    supervision: &[&View],
    opts: &FitOptions,
    mut log: impl FnMut(&FitLog),
) -> Result<GsMap> {
    if supervision.is_empty() {
        return Err(Error::Empty("no supervision views"));
    }
    let settings = RenderSettings::default();
    let (mut store, index) = split(init);
    let mut opt = AdamW::new(0.9, 0.999, 0.0);
    let lr = |name: &str| match name {
        "position" => opts.lr_position,
        "scale" => opts.lr_scale,
        "rotation" => opts.lr_rotation,
        "opacity" => opts.lr_opacity,
        _ => opts.lr_color,
    };
    for iter in 0..opts.iters {
        let raw = join(&store, &index, init);
        let map = activate(&raw)?;
        let set = GaussianSet::new(index.iter().map(|&i| map.gaussian(i)).collect());
        let (rgb, alpha, ps, grads) = render_loss(&set, supervision, &settings)?;
        let loss = rgb + alpha;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: iter,
                what: "fit loss".into(),
            });
        }
        log(&FitLog {
            iter,
            loss,
            rgb,
            alpha,
            psnr: ps,
        });
        let mut raw_grad = [0.0; CHANNELS];
        let mut tensors: std::collections::BTreeMap<String, Tensor> = GROUPS
            .iter()
            .map(|(name, r)| (name.to_string(), Tensor::zeros(&[index.len(), r.len()])))
            .collect();
        for (k, &i) in index.iter().enumerate() {
            activate_pixel_backward(raw.pixel(i), &grads[k], &mut raw_grad);
            for (name, r) in GROUPS {
                let t = tensors.get_mut(name).expect("group tensor");
                t.data[k * r.len()..(k + 1) * r.len()].copy_from_slice(&raw_grad[r]);
            }
        }
        opt.update(&mut store, &tensors, lr);
    }
    activate(&join(&store, &index, init))
}

/// Gaussians of every valid pixel, or an empty set.
pub fn gaussians(map: &GsMap) -> GaussianSet {
    GaussianSet::new((0..map.pixel_count()).filter(|&i| map.mask[i]).map(|i| map.gaussian(i)).collect())
}
