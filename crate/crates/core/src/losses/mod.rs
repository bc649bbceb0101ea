//! Geometry and appearance training losses.
//!
//! Every loss used for optimization has a `*_with_grad` variant returning the
//! gradient with respect to the prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, PointCloud, PointMap};
use crate::imaging::Image;

mod kdtree;

pub use kdtree::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the absolute depth difference.
    pub depth_l1: f64,
    /// Weight of the depth-gradient difference.
    pub depth_grad: f64,
    /// Weight of the perceptual term in the RGB loss.
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth_l1: 20.0,
            depth_grad: 20.0,
            perceptual: 0.05,
        }
    }
}

/// Pluggable perceptual distance between a rendering and its target.
pub trait PerceptualMetric {
    fn distance(&self, rendered: &Image, target: &Image) -> f64;
}

/// Draws `k` valid points uniformly with replacement. Also returns the flat
/// pixel index of every sample.
pub fn sample_pointmap_indexed(pm: &PointMap, k: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    let valid: Vec<usize> = (0..pm.mask.len()).filter(|&i| pm.mask[i]).collect();
    sample_indices(&valid, k, seed).map(|idx| {
        let points = idx.iter().map(|&i| pm.values[i]).collect();
        (PointCloud::new(points), idx)
    })
}

pub fn sample_pointmap(pm: &PointMap, k: usize, seed: u64) -> Result<PointCloud> {
    sample_pointmap_indexed(pm, k, seed).map(|(c, _)| c)
}

/// `k` uniform draws with replacement from `valid`.
pub fn sample_indices(valid: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if valid.is_empty() {
        return Err(Error::Empty("point map has no valid pixels to sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k).map(|_| valid[rng.gen_range(0..valid.len())]).collect())
}

/// Symmetric Chamfer distance: mean squared nearest-neighbour distance from
/// `s` to `t` plus from `t` to `s`.
pub fn chamfer(s: &PointCloud, t: &PointCloud) -> Result<f64> {
    chamfer_with_grad(s, t).map(|(v, _)| v)
}

/// Chamfer distance and its gradient with respect to the points of `s`.
pub fn chamfer_with_grad(s: &PointCloud, t: &PointCloud) -> Result<(f64, Vec<[f64; 3]>)> {
    if s.is_empty() || t.is_empty() {
        return Err(Error::Empty("Chamfer distance needs two non-empty clouds"));
    }
    let (ns, nt) = (s.len() as f64, t.len() as f64);
    let tree_t = KdTree::new(&t.points);
    let tree_s = KdTree::new(&s.points);
    let mut grad = vec![[0.0; 3]; s.len()];
    let mut forward = 0.0;
    for (x, g) in s.points.iter().zip(grad.iter_mut()) {
        let (j, d) = tree_t.nearest(x);
        forward += d;
        let y = &t.points[j];
        for k in 0..3 {
            g[k] += 2.0 * (x[k] - y[k]) / ns;
        }
    }
    let mut backward = 0.0;
    for y in &t.points {
        let (i, d) = tree_s.nearest(y);
        backward += d;
        let x = &s.points[i];
        for k in 0..3 {
            grad[i][k] += 2.0 * (x[k] - y[k]) / nt;
        }
    }
    Ok((forward / ns + backward / nt, grad))
}

/// Weighted L1 plus forward-difference gradient loss between depth maps,
/// averaged over pixels valid in both maps.
pub fn depth_loss(d: &DepthMap, gt: &DepthMap, w: &LossWeights) -> Result<f64> {
    depth_loss_with_grad(d, gt, w).map(|(v, _)| v)
}

/// Depth loss and its gradient with respect to `d.values`.
pub fn depth_loss_with_grad(d: &DepthMap, gt: &DepthMap, w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    depth_loss_views_with_grad(std::slice::from_ref(d), std::slice::from_ref(gt), w).map(|(v, mut g)| (v, g.remove(0)))
}

/// Depth loss over several views, averaged over the jointly valid pixels of
/// all views together. Gradient terms never cross view boundaries.
pub fn depth_loss_views_with_grad(d: &[DepthMap], gt: &[DepthMap], w: &LossWeights) -> Result<(f64, Vec<Vec<f64>>)> {
    if d.len() != gt.len() {
        return Err(Error::Shape(format!("{} predicted depth maps for {} targets", d.len(), gt.len())));
    }
    for (a, b) in d.iter().zip(gt) {
        if (a.height, a.width) != (b.height, b.width) {
            return Err(Error::Shape(format!(
                "depth maps differ: {}x{} vs {}x{}",
                a.height, a.width, b.height, b.width
            )));
        }
    }
    let joints: Vec<Vec<bool>> = d
        .iter()
        .zip(gt)
        .map(|(a, b)| a.mask.iter().zip(&b.mask).map(|(&p, &q)| p && q).collect())
        .collect();
    let count: usize = joints.iter().map(|j| j.iter().filter(|&&v| v).count()).sum();
    if count == 0 {
        return Err(Error::Empty("depth maps share no valid pixels"));
    }
    let n = count as f64;
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let (mut l1, mut lg) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(d.len());
    for ((d, gt), joint) in d.iter().zip(gt).zip(&joints) {
        let (h, wd) = (d.height, d.width);
        let mut grad = vec![0.0; d.values.len()];
        for y in 0..h {
            for x in 0..wd {
                let i = y * wd + x;
                if !joint[i] {
                    continue;
                }
                let diff = d.values[i] - gt.values[i];
                l1 += diff.abs();
                grad[i] += w.depth_l1 * sign(diff) / n;
                for j in [(x + 1 < wd).then_some(i + 1), (y + 1 < h).then_some(i + wd)]
                    .into_iter()
                    .flatten()
                {
                    if !joint[j] {
                        continue;
                    }
                    let e = (d.values[j] - d.values[i]) - (gt.values[j] - gt.values[i]);
                    lg += e.abs();
                    let s = w.depth_grad * sign(e) / n;
                    grad[j] += s;
                    grad[i] -= s;
                }
            }
        }
        grads.push(grad);
    }
    Ok((w.depth_l1 * l1 / n + w.depth_grad * lg / n, grads))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// Mean squared error and its gradient with respect to `a`.
pub fn mse_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.ensure_same_shape(b)?;
    let n = a.data.len() as f64;
    let mut sum = 0.0;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            sum += (x - y) * (x - y);
            2.0 * (x - y) / n
        })
        .collect();
    Ok((sum / n, Image::new(a.width, a.height, a.channels, data)?))
}

/// `MSE + λ · perceptual`; without a hook the perceptual term is zero.
pub fn rgb_loss(render: &Image, gt: &Image, perceptual: Option<&dyn PerceptualMetric>, w: &LossWeights) -> Result<f64> {
    let base = mse(render, gt)?;
    Ok(base + perceptual.map_or(0.0, |p| w.perceptual * p.distance(render, gt)))
}

pub fn alpha_loss(alpha: &Image, gt: &Image) -> Result<f64> {
    mse(alpha, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_chamfer(s: &[[f64; 3]], t: &[[f64; 3]]) -> f64 {
        let one = |a: &[[f64; 3]], b: &[[f64; 3]]| {
            a.iter()
                .map(|x| b.iter().map(|y| kdtree::dist2(x, y)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / a.len() as f64
        };
        one(s, t) + one(t, s)
    }

    fn cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
    }

    #[test]
    fn chamfer_closed_forms() {
        let a = PointCloud::new(vec![[0.0; 3]]);
        let b = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &PointCloud::new(vec![])).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let s = cloud(&mut rng, 500);
            let t = cloud(&mut rng, 431);
            let fast = chamfer(&s, &t).unwrap();
            assert!((fast - brute_chamfer(&s.points, &t.points)).abs() < 1e-9);
            assert_eq!(fast, chamfer(&t, &s).unwrap());
        }
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = cloud(&mut rng, 40);
        let t = cloud(&mut rng, 55);
        let (_, g) = chamfer_with_grad(&s, &t).unwrap();
        for i in 0..s.len() {
            for k in 0..3 {
                let h = 1e-7;
                let mut p = s.clone();
                let mut m = s.clone();
                p.points[i][k] += h;
                m.points[i][k] -= h;
                let fd = (chamfer(&p, &t).unwrap() - chamfer(&m, &t).unwrap()) / (2.0 * h);
                assert!((fd - g[i][k]).abs() <= 1e-3 * fd.abs().max(g[i][k].abs()).max(1e-6));
            }
        }
    }

    #[test]
    fn sampling_support_and_uniformity() {
        let pm = PointMap::new(2, 2, vec![[0.0; 3], [1.0; 3], [2.0; 3], [3.0; 3]], vec![true; 4]).unwrap();
        let a = sample_pointmap(&pm, 4, 17).unwrap();
        assert_eq!(a, sample_pointmap(&pm, 4, 17).unwrap());
        assert!(a.points.iter().all(|p| pm.values.contains(p)));

        let mut single = pm.clone();
        single.mask = vec![false, false, true, false];
        let s = sample_pointmap(&single, 10, 3).unwrap();
        assert_eq!(s.points, vec![[2.0; 3]; 10]);

        single.mask.fill(false);
        assert!(sample_pointmap(&single, 10, 3).is_err());

        let (_, idx) = sample_pointmap_indexed(&pm, 1_000_000, 5).unwrap();
        let mut counts = [0usize; 4];
        for i in idx {
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / 1e6;
            assert!((f - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    fn depth(values: Vec<f64>, w: usize) -> DepthMap {
        let n = values.len();
        DepthMap::new(n / w, w, values, vec![true; n]).unwrap()
    }

    #[test]
    fn depth_loss_closed_forms() {
        let w = LossWeights::default();
        let gt = depth((0..16).map(|i| 1.0 + 0.1 * i as f64).collect(), 4);
        assert_eq!(depth_loss(&gt, &gt, &w).unwrap(), 0.0);
        let shifted = depth(gt.values.iter().map(|v| v + 0.1).collect(), 4);
        assert!((depth_loss(&shifted, &gt, &w).unwrap() - 2.0).abs() < 1e-12);
        let mut none = gt.clone();
        none.mask.fill(false);
        assert!(depth_loss(&gt, &none, &w).is_err());
    }

    /// Straight re-evaluation of the depth loss from its definition.
    fn naive_depth_loss(d: &DepthMap, gt: &DepthMap, w: &LossWeights) -> f64 {
        let (h, wd) = (d.height, d.width);
        let ok = |x: usize, y: usize| d.mask[y * wd + x] && gt.mask[y * wd + x];
        let (mut n, mut l1, mut lg) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..wd {
                if !ok(x, y) {
                    continue;
                }
                n += 1.0;
                let at = |m: &DepthMap, x: usize, y: usize| m.values[y * wd + x];
                l1 += (at(d, x, y) - at(gt, x, y)).abs();
                if x + 1 < wd && ok(x + 1, y) {
                    lg += ((at(d, x + 1, y) - at(d, x, y)) - (at(gt, x + 1, y) - at(gt, x, y))).abs();
                }
                if y + 1 < h && ok(x, y + 1) {
                    lg += ((at(d, x, y + 1) - at(d, x, y)) - (at(gt, x, y + 1) - at(gt, x, y))).abs();
                }
            }
        }
        w.depth_l1 * l1 / n + w.depth_grad * lg / n
    }

    #[test]
    fn depth_loss_matches_naive_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = LossWeights::default();
        for _ in 0..10 {
            let mut d = depth((0..48).map(|_| rng.gen_range(0.5..3.0)).collect(), 8);
            let gt = depth((0..48).map(|_| rng.gen_range(0.5..3.0)).collect(), 8);
            for m in d.mask.iter_mut() {
                *m = rng.gen_bool(0.8);
            }
            let (v, g) = depth_loss_with_grad(&d, &gt, &w).unwrap();
            assert!((v - naive_depth_loss(&d, &gt, &w)).abs() < 1e-9);
            for i in 0..d.values.len() {
                let h = 1e-7;
                let mut p = d.clone();
                let mut m = d.clone();
                p.values[i] += h;
                m.values[i] -= h;
                let fd = (depth_loss(&p, &gt, &w).unwrap() - depth_loss(&m, &gt, &w).unwrap()) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-5, "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn multi_view_depth_loss_pools_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = LossWeights::default();
        let maps: Vec<(DepthMap, DepthMap)> = (0..3)
            .map(|_| {
                let mut d = depth((0..24).map(|_| rng.gen_range(0.5..3.0)).collect(), 6);
                for m in d.mask.iter_mut() {
                    *m = rng.gen_bool(0.7);
                }
                (d, depth((0..24).map(|_| rng.gen_range(0.5..3.0)).collect(), 6))
            })
            .collect();
        let (d, gt): (Vec<_>, Vec<_>) = maps.iter().cloned().unzip();
        let (v, g) = depth_loss_views_with_grad(&d, &gt, &w).unwrap();
        let counts: Vec<f64> = maps
            .iter()
            .map(|(a, b)| a.mask.iter().zip(&b.mask).filter(|(p, q)| **p && **q).count() as f64)
            .collect();
        let total: f64 = counts.iter().sum();
        let pooled: f64 = maps
            .iter()
            .zip(&counts)
            .map(|((a, b), c)| naive_depth_loss(a, b, &w) * c / total)
            .sum();
        assert!((v - pooled).abs() < 1e-9);
        let (single, gs) = depth_loss_with_grad(&d[1], &gt[1], &w).unwrap();
        for (a, b) in g[1].iter().zip(&gs) {
            assert!((a * total - b * counts[1]).abs() < 1e-9);
        }
        assert!(single.is_finite());
    }

    struct UnitHook;
    impl PerceptualMetric for UnitHook {
        fn distance(&self, _: &Image, _: &Image) -> f64 {
            1.0
        }
    }

    #[test]
    fn rgb_and_alpha_losses() {
        let w = LossWeights::default();
        let a = Image::filled(4, 4, 3, 0.3);
        assert_eq!(rgb_loss(&a, &a, None, &w).unwrap(), 0.0);
        let b = Image::new(4, 4, 3, a.data.iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((rgb_loss(&a, &b, None, &w).unwrap() - 0.01).abs() < 1e-12);
        assert!((rgb_loss(&a, &a, Some(&UnitHook), &w).unwrap() - 0.05).abs() < 1e-15);
        assert!(rgb_loss(&a, &Image::zeros(4, 4, 1), None, &w).is_err());

        let half = Image::filled(3, 3, 1, 0.5);
        assert_eq!(alpha_loss(&half, &half).unwrap(), 0.0);
        assert_eq!(alpha_loss(&half, &Image::zeros(3, 3, 1)).unwrap(), 0.25);

        let (v, g) = mse_with_grad(&a, &b).unwrap();
        assert!((v - 0.01).abs() < 1e-12);
        assert!(g.data.iter().all(|x| (x + 0.2 / 48.0).abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn chamfer_invariants(seed in any::<u64>(), angle in -3.0f64..3.0, shift in prop::array::uniform3(-2.0f64..2.0)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = cloud(&mut rng, 60);
            let t = cloud(&mut rng, 45);
            let base = chamfer(&s, &t).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert_eq!(base, chamfer(&t, &s).unwrap());
            let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(0.3, -0.5, 0.8)), angle);
            let mv = |c: &PointCloud| PointCloud::new(c.points.iter().map(|p| {
                let q = rot * Vec3::from(*p) + Vec3::from(shift);
                [q.x, q.y, q.z]
            }).collect());
            let moved = chamfer(&mv(&s), &mv(&t)).unwrap();
            prop_assert!((moved - base).abs() < 1e-6);
        }

        #[test]
        fn subset_clouds_have_zero_chamfer(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = cloud(&mut rng, 30);
            let mut t = s.clone();
            t.points.extend_from_slice(&s.points[..10]);
            prop_assert_eq!(chamfer(&s, &t).unwrap(), 0.0);
        }
    }
}
