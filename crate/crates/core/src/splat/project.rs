//! EWA projection of 3D Gaussians to screen space and its adjoint.

use nalgebra::{Matrix2, Matrix2x3};

use super::RenderSettings;
use crate::geometry::{Camera, Mat3, Vec3};
use crate::gsmap::{quat_to_rotation, Gaussian3D};

/// Screen-space Gaussian. `conic` is the inverse of `cov` stored as
/// `[a, b, c]` for the symmetric matrix `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean: [f64; 2],
    pub cov: [f64; 3],
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// A pixel receives this Gaussian iff `½ dᵀ Σ′⁻¹ d <= power_cut`.
    pub power_cut: f64,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]` of the influence ellipse,
    /// clipped to the frame.
    pub bounds: [usize; 4],
}

impl ProjectedGaussian {
    /// `½ dᵀ Σ′⁻¹ d` at the center of pixel `(x, y)`.
    #[inline]
    pub fn power_at(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.mean[0];
        let dy = y as f64 + 0.5 - self.mean[1];
        let [a, b, c] = self.conic;
        0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
    }
}

/// Perspective Jacobian of `(fx x/z + cx, fy y/z + cy)` at camera-space `t`.
fn jacobian(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let k = &cam.intrinsics;
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * t.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * t.y * iz * iz,
    )
}

/// Screen covariance `J W Σ Wᵀ Jᵀ + λ I` without culling.
pub fn screen_covariance(g: &Gaussian3D, cam: &Camera, settings: &RenderSettings) -> (Vec3, Matrix2<f64>) {
    let t = cam.world_to_camera(&Vec3::from(g.mean));
    let j = jacobian(cam, &t);
    let w = &cam.rotation;
    let m = w * g.covariance() * w.transpose();
    let cov = j * m * j.transpose() + Matrix2::identity() * settings.cov_regularization;
    (t, cov)
}

/// Projects one Gaussian; `None` means culled (behind the near plane, no
/// visible footprint, or too transparent to ever reach the alpha cutoff).
pub fn project(g: &Gaussian3D, cam: &Camera, settings: &RenderSettings) -> Option<ProjectedGaussian> {
    let t = cam.world_to_camera(&Vec3::from(g.mean));
    if t.z <= settings.z_near {
        return None;
    }
    let (_, cov) = screen_covariance(g, cam, settings);
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(0, 1)];
    if !(det > 0.0) {
        return None;
    }
    let power_cut = (g.opacity / settings.alpha_cutoff).ln();
    if !(power_cut >= 0.0) {
        return None;
    }
    let (mx, my) = cam.project_camera_point(&t);
    // axis-aligned half extents of the ellipse ½ dᵀΣ′⁻¹d = power_cut
    let r = (2.0 * power_cut).sqrt();
    let hx = r * cov[(0, 0)].sqrt() + 1.0;
    let hy = r * cov[(1, 1)].sqrt() + 1.0;
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    if mx + hx < 0.0 || my + hy < 0.0 || mx - hx > w || my - hy > h {
        return None;
    }
    let clip = |v: f64, hi: f64| v.clamp(0.0, hi - 1.0) as usize;
    let bounds = [
        clip((mx - hx - 0.5).floor(), w),
        clip((my - hy - 0.5).floor(), h),
        clip((mx + hx - 0.5).ceil(), w),
        clip((my + hy - 0.5).ceil(), h),
    ];
    Some(ProjectedGaussian {
        mean: [mx, my],
        cov: [cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]],
        conic: [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det],
        depth: t.z,
        opacity: g.opacity,
        color: g.color,
        power_cut,
        bounds,
    })
}

/// Gradient of a scalar with respect to the screen-space quantities of one
/// Gaussian. `conic` holds `[∂/∂a, ∂/∂b, ∂/∂c]` for the parameterization
/// `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScreenGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl ScreenGrad {
    pub fn add(&mut self, o: &ScreenGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Chains a screen-space gradient back to the 14 Gaussian parameters
/// `[μ, s, q, opacity, color]`.
pub fn project_backward(g: &Gaussian3D, cam: &Camera, settings: &RenderSettings, sg: &ScreenGrad) -> [f64; 14] {
    let k = &cam.intrinsics;
    let w = &cam.rotation;
    let t = cam.world_to_camera(&Vec3::from(g.mean));
    let j = jacobian(cam, &t);
    let rot = quat_to_rotation(&g.rotation);
    let l = rot * Mat3::from_diagonal(&Vec3::from(g.scale));
    let sigma = l * l.transpose();
    let m = w * sigma * w.transpose();
    let cov = j * m * j.transpose() + Matrix2::identity() * settings.cov_regularization;
    let conic = cov.try_inverse().expect("regularized screen covariance is invertible");

    // b sits in both off-diagonal entries
    let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov = -(conic * g_conic * conic);
    let g_m = j.transpose() * g_cov * j;
    let g_j = 2.0 * g_cov * j * m;
    let g_sigma = w.transpose() * g_m * w;
    let g_l = 2.0 * g_sigma * l;

    let mut out = [0.0; 14];

    // mean: through μ′ and through J
    let iz = 1.0 / t.z;
    let mut g_t = Vec3::new(
        sg.mean[0] * k.fx * iz,
        sg.mean[1] * k.fy * iz,
        -(sg.mean[0] * k.fx * t.x + sg.mean[1] * k.fy * t.y) * iz * iz,
    );
    g_t.x += g_j[(0, 2)] * (-k.fx * iz * iz);
    g_t.y += g_j[(1, 2)] * (-k.fy * iz * iz);
    g_t.z += g_j[(0, 0)] * (-k.fx * iz * iz)
        + g_j[(0, 2)] * (2.0 * k.fx * t.x * iz * iz * iz)
        + g_j[(1, 1)] * (-k.fy * iz * iz)
        + g_j[(1, 2)] * (2.0 * k.fy * t.y * iz * iz * iz);
    let g_mean = w.transpose() * g_t;
    out[0..3].copy_from_slice(g_mean.as_slice());

    // scale
    for c in 0..3 {
        out[3 + c] = (0..3).map(|r| g_l[(r, c)] * rot[(r, c)]).sum();
    }

    // rotation: dL/dR then through the quaternion normalization
    let g_r = g_l * Mat3::from_diagonal(&Vec3::from(g.scale));
    let q = g.rotation;
    let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (qw, qx, qy, qz) = (q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn);
    let gr = |r: usize, c: usize| g_r[(r, c)];
    let g_hat = [
        2.0 * (-qz * gr(0, 1) + qy * gr(0, 2) + qz * gr(1, 0) - qx * gr(1, 2) - qy * gr(2, 0) + qx * gr(2, 1)),
        2.0 * (qy * gr(0, 1) + qz * gr(0, 2) + qy * gr(1, 0) - 2.0 * qx * gr(1, 1) - qw * gr(1, 2)
            + qz * gr(2, 0)
            + qw * gr(2, 1)
            - 2.0 * qx * gr(2, 2)),
        2.0 * (-2.0 * qy * gr(0, 0) + qx * gr(0, 1) + qw * gr(0, 2) + qx * gr(1, 0) + qz * gr(1, 2)
            - qw * gr(2, 0)
            + qz * gr(2, 1)
            - 2.0 * qy * gr(2, 2)),
        2.0 * (-2.0 * qz * gr(0, 0) - qw * gr(0, 1) + qx * gr(0, 2) + qw * gr(1, 0) - 2.0 * qz * gr(1, 1)
            + qy * gr(1, 2)
            + qx * gr(2, 0)
            + qy * gr(2, 1)),
    ];
    let unit = [qw, qx, qy, qz];
    let dot: f64 = unit.iter().zip(&g_hat).map(|(a, b)| a * b).sum();
    for c in 0..4 {
        out[6 + c] = (g_hat[c] - unit[c] * dot) / qn;
    }

    out[10] = sg.opacity;
    out[11..14].copy_from_slice(&sg.color);
    out
}
