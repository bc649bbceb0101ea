//! Novel-view image and depth metrics of a GS-map against dataset views.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use splatmap::data::View;
use splatmap::geometry::DepthMap;
use splatmap::gsmap::{GaussianSet, GsMap};
use splatmap::metrics::{depth_metrics, psnr, ssim};
use splatmap::splat::{rasterize_with, RenderOutput, RenderSettings};
use splatmap::Result;

use crate::fit::gaussians;

/// Ground-truth alpha above which a pixel takes part in depth metrics.
pub const DEPTH_ALPHA: f64 = 0.5;

/// Metrics of one view. Values that are not finite (an exact PSNR match,
/// or no jointly valid depth pixels) are written as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewMetrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub abs_rel: Option<f64>,
    pub sq_rel: Option<f64>,
    pub rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Keyed by view index.
    pub views: BTreeMap<usize, ViewMetrics>,
    /// Mean of each metric over the views where it is defined.
    pub mean: ViewMetrics,
    /// No perceptual network ships with this tool.
    pub lpips: String,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Rendered depth is valid wherever the render has any coverage.
pub fn rendered_depth(out: &RenderOutput, settings: &RenderSettings) -> DepthMap {
    let mask = out.alpha.data.iter().map(|&a| a >= settings.depth_alpha_floor).collect();
    DepthMap::new(out.depth.height, out.depth.width, out.depth.data.clone(), mask).expect("render sizes agree")
}

pub fn view_metrics(set: &GaussianSet, view: &View) -> Result<ViewMetrics> {
    let settings = RenderSettings::default();
    let out = rasterize_with(set, &view.camera, &settings);
    let pred = rendered_depth(&out, &settings);
    let mut gt = view.depth.clone();
    for (m, &a) in gt.mask.iter_mut().zip(&view.alpha.data) {
        *m &= a > DEPTH_ALPHA;
    }
    let depth = depth_metrics(&pred, &gt).ok();
    Ok(ViewMetrics {
        psnr: finite(psnr(&out.rgb, &view.rgb)?),
        ssim: finite(ssim(&out.rgb, &view.rgb)?),
        abs_rel: depth.and_then(|d| finite(d.abs_rel)),
        sq_rel: depth.and_then(|d| finite(d.sq_rel)),
        rmse: depth.and_then(|d| finite(d.rmse)),
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(map: &GsMap, views: &[(usize, &View)]) -> Result<Report> {
    let set = gaussians(map);
    let mut per_view = BTreeMap::new();
    for (k, v) in views {
        per_view.insert(*k, view_metrics(&set, v)?);
    }
    let m = |f: fn(&ViewMetrics) -> Option<f64>| mean(per_view.values().map(f));
    let mean = ViewMetrics {
        psnr: m(|v| v.psnr),
        ssim: m(|v| v.ssim),
        abs_rel: m(|v| v.abs_rel),
        sq_rel: m(|v| v.sq_rel),
        rmse: m(|v| v.rmse),
    };
    Ok(Report {
        views: per_view,
        mean,
        lpips: "n/a".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use splatmap::data::{Rig, SceneBundle, SceneSpec};
    use splatmap::gsmap::{activate, RawGsMap, CHANNELS, ROTATION};

    #[test]
    fn report_shape_and_nulls() {
        let rig = Rig {
            resolution: 32,
            ..Rig::default()
        };
        let b = SceneBundle::render(SceneSpec::textured_sphere(0.5), &[rig.camera(0.0, 0.0).unwrap()], 0);
        let mut values = vec![0.0; 32 * 32 * CHANNELS];
        for px in values.chunks_mut(CHANNELS) {
            px[ROTATION.start] = 1.0;
        }
        let raw = RawGsMap::new(1, 32, 32, values, vec![false; 32 * 32]).unwrap();
        let empty = activate(&raw).unwrap();
        let r = evaluate(&empty, &[(3, &b.views[0])]).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        let view = json["views"]["3"].as_object().unwrap();
        let keys: Vec<&str> = view.keys().map(String::as_str).collect();
        assert_eq!(keys, ["abs_rel", "psnr", "rmse", "sq_rel", "ssim"]);
        // An empty map renders black: PSNR is finite but no depth is valid.
        assert!(r.views[&3].psnr.is_some());
        assert!(view["abs_rel"].is_null() && json["mean"]["rmse"].is_null());
    }
}
