//! Fixed-seed inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatmap::geometry::PointCloud;
use splatmap::gsmap::{Gaussian3D, GaussianSet, CHANNELS};

/// `n` small Gaussians scattered through the unit cube.
pub fn gaussian_cloud(n: usize, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..n)
        .map(|_| {
            let mut c = [0.0; CHANNELS];
            for v in &mut c[0..3] {
                *v = rng.gen_range(-0.8..0.8);
            }
            c[3..6].fill(0.03);
            c[6] = 1.0;
            c[10] = rng.gen_range(0.3..0.95);
            for v in &mut c[11..14] {
                *v = rng.gen();
            }
            Gaussian3D::from_channels(&c)
        })
        .collect();
    GaussianSet::new(gaussians)
}

/// `n` points drawn uniformly from the unit sphere surface.
pub fn sphere_points(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    PointCloud::new(points)
}
