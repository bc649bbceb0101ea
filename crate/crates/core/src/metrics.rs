//! Image and depth evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::imaging::Image;
use crate::losses::mse;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio for signals in [0, 1]. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// Normalized 1-d Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - half;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.map(|t| t / sum)
}

/// Valid-mode separable filtering of a single-channel plane.
fn filter(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean single-scale SSIM over all fully-inside 11×11 windows of the
/// channel-mean images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let (ga, gb) = (a.to_gray().data, b.to_gray().data);
    let (w, h) = (a.width, a.height);
    let taps = gaussian_taps();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let (mu_a, ..) = filter(&ga, w, h, &taps);
    let (mu_b, ..) = filter(&gb, w, h, &taps);
    let (e_aa, ..) = filter(&prod(&ga, &ga), w, h, &taps);
    let (e_bb, ..) = filter(&prod(&gb, &gb), w, h, &taps);
    let (e_ab, ..) = filter(&prod(&ga, &gb), w, h, &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
}

/// Abs Rel, Sq Rel and RMSE over pixels valid in both maps.
pub fn depth_metrics(d: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    if (d.height, d.width) != (gt.height, gt.width) {
        return Err(Error::Shape("depth maps differ in size".into()));
    }
    let (mut n, mut abs_rel, mut sq_rel, mut sq) = (0usize, 0.0, 0.0, 0.0);
    for i in 0..d.values.len() {
        if !(d.mask[i] && gt.mask[i]) {
            continue;
        }
        let (p, t) = (d.values[i], gt.values[i]);
        let e = p - t;
        n += 1;
        abs_rel += e.abs() / t;
        sq_rel += e * e / t;
        sq += e * e;
    }
    if n == 0 {
        return Err(Error::Empty("no jointly valid depth pixels"));
    }
    let n = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
        Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    /// Direct 2-d window evaluation with the outer-product Gaussian kernel.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let (ga, gb) = (a.to_gray(), b.to_gray());
        let taps = gaussian_taps();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=a.height - 11 {
            for x0 in 0..=a.width - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = taps[i] * taps[j];
                        ma += wgt * ga.at(x0 + i, y0 + j, 0);
                        mb += wgt * gb.at(x0 + i, y0 + j, 0);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wgt = taps[i] * taps[j];
                        let (p, q) = (ga.at(x0 + i, y0 + j, 0) - ma, gb.at(x0 + i, y0 + j, 0) - mb);
                        va += wgt * p * p;
                        vb += wgt * q * q;
                        cov += wgt * p * q;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn psnr_values() {
        let a = Image::filled(8, 8, 3, 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(8, 8, 3, 0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (x, y) = (random_image(&mut rng, 9, 7, 3), random_image(&mut rng, 9, 7, 3));
            let m: f64 = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.data.len() as f64;
            let naive = 10.0 * (1.0 / m).log10();
            assert!((psnr(&x, &y).unwrap() - naive).abs() < 1e-9);
            assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        }
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_image(&mut rng, 32, 32, 3);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.03, 0.1, 0.3] {
            let mean: f64 = (0..5)
                .map(|_| {
                    let noisy = Image::new(32, 32, 3, base.data.iter().map(|v| v + amp * rng.gen_range(-1.0..1.0)).collect()).unwrap();
                    psnr(&base, &noisy).unwrap()
                })
                .sum::<f64>()
                / 5.0;
            assert!(mean < last);
            last = mean;
        }
    }

    #[test]
    fn ssim_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 24, 20, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let bin = Image::new(16, 16, 1, (0..256).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
        let inv = Image::new(16, 16, 1, bin.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
        for _ in 0..3 {
            let (x, y) = (random_image(&mut rng, 23, 19, 3), random_image(&mut rng, 23, 19, 3));
            let s = ssim(&x, &y).unwrap();
            assert!((s - ssim_reference(&x, &y)).abs() < 1e-6);
            assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-12);
        }
        assert!(ssim(&Image::zeros(8, 8, 1), &Image::zeros(8, 8, 1)).is_err());
    }

    #[test]
    fn depth_metric_values() {
        let gt = DepthMap::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![true; 6]).unwrap();
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!((m.abs_rel, m.sq_rel, m.rmse), (0.0, 0.0, 0.0));
        let scaled = DepthMap::new(2, 3, gt.values.iter().map(|v| 1.1 * v).collect(), vec![true; 6]).unwrap();
        assert!((depth_metrics(&scaled, &gt).unwrap().abs_rel - 0.1).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DepthMap::new(4, 4, (0..16).map(|_| rng.gen_range(0.5..2.0)).collect(), (0..16).map(|_| rng.gen_bool(0.7)).collect()).unwrap();
        let t = DepthMap::new(4, 4, (0..16).map(|_| rng.gen_range(0.5..2.0)).collect(), vec![true; 16]).unwrap();
        let m = depth_metrics(&d, &t).unwrap();
        let idx: Vec<usize> = (0..16).filter(|&i| d.mask[i]).collect();
        let n = idx.len() as f64;
        let ar: f64 = idx.iter().map(|&i| (d.values[i] - t.values[i]).abs() / t.values[i]).sum::<f64>() / n;
        let sr: f64 = idx.iter().map(|&i| (d.values[i] - t.values[i]).powi(2) / t.values[i]).sum::<f64>() / n;
        let rm = (idx.iter().map(|&i| (d.values[i] - t.values[i]).powi(2)).sum::<f64>() / n).sqrt();
        assert!((m.abs_rel - ar).abs() < 1e-9 && (m.sq_rel - sr).abs() < 1e-9 && (m.rmse - rm).abs() < 1e-9);
    }
}
