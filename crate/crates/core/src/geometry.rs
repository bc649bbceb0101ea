//! Cameras, coordinate transforms and the orbit-camera protocol.
//!
//! Conventions used throughout the crate: world space is right-handed with
//! `+z` up. A camera looks down its own `+z` axis with `+x` to the right and
//! `+y` down, so pixel `(0, 0)` is the top-left corner of the image. Pixel
//! `(u, v)` samples the image-plane point `(u + 0.5, v + 0.5)`.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Pinhole intrinsics shared by every camera of a rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center, horizontal field
    /// of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }
}

/// Pinhole camera with a world-to-camera rigid transform `x_cam = R x + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Mat3, translation: Vec3) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Identity pose: camera at the world origin looking down `+z`.
    pub fn identity(intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                k.fx, k.fy
            )));
        }
        if k.width == 0 || k.height == 0 {
            return Err(Error::InvalidCamera("zero image size".into()));
        }
        let r = &self.rotation;
        let dev = (r.transpose() * r - Mat3::identity()).amax();
        if !(dev < ORTHONORMAL_TOL) || r.determinant() <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "rotation is not a proper orthonormal matrix (deviation {dev:e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Projects a camera-space point to continuous pixel coordinates.
    pub fn project_camera_point(&self, p: &Vec3) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
    }

    /// Unit-z camera-space direction through the center of pixel `(u, v)`.
    pub fn pixel_direction_camera(&self, u: usize, v: usize) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new(
            (u as f64 + 0.5 - k.cx) / k.fx,
            (v as f64 + 0.5 - k.cy) / k.fy,
            1.0,
        )
    }

    /// World-space point seen at pixel `(u, v)` with camera-space depth `z`.
    pub fn unproject(&self, u: usize, v: usize, z: f64) -> Vec3 {
        self.camera_to_world(&(self.pixel_direction_camera(u, v) * z))
    }

    pub fn to_record(&self) -> CameraRecord {
        let k = &self.intrinsics;
        let r = &self.rotation;
        CameraRecord {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }

    pub fn from_record(rec: &CameraRecord) -> Result<Self> {
        Self::new(
            Intrinsics {
                fx: rec.fx,
                fy: rec.fy,
                cx: rec.cx,
                cy: rec.cy,
                width: rec.width,
                height: rec.height,
            },
            Mat3::from_row_slice(&rec.rotation),
            Vec3::from_row_slice(&rec.translation),
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(&self.to_record())?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_record(&toml::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Text record of a camera. `rotation` is the world-to-camera matrix in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Camera on a sphere of `radius` around the origin, looking at the origin
/// with world `+z` as the up direction.
pub fn orbit_camera(
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
    intrinsics: Intrinsics,
) -> Result<Camera> {
    if !(radius > 0.0) {
        return Err(Error::InvalidCamera(format!("orbit radius {radius} must be positive")));
    }
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    if e.cos().abs() < 1e-9 {
        return Err(Error::DegenerateElevation(elevation_deg));
    }
    let center = radius * Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
    let forward = -center.normalize();
    let right = forward.cross(&Vec3::z()).normalize();
    let down = forward.cross(&right);
    let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * center);
    Camera::new(intrinsics, rotation, translation)
}

/// Per-pixel world-space positions with a foreground mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

impl PointMap {
    pub fn new(height: usize, width: usize, values: Vec<[f64; 3]>, mask: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "point map {height}x{width} needs {n} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            mask,
        })
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Camera-space `z` per pixel with a validity mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "depth map {height}x{width} needs {n} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            mask,
        })
    }
}

/// Camera-space depth of every point of `pm`. Pixels that fall on or behind
/// the camera plane are marked invalid.
pub fn pointmap_to_depth(pm: &PointMap, cam: &Camera) -> DepthMap {
    let mut values = Vec::with_capacity(pm.values.len());
    let mut mask = Vec::with_capacity(pm.values.len());
    for (p, &m) in pm.values.iter().zip(&pm.mask) {
        let z = cam.world_to_camera(&Vec3::from(*p)).z;
        values.push(z);
        mask.push(m && z > 0.0);
    }
    DepthMap {
        height: pm.height,
        width: pm.width,
        values,
        mask,
    }
}

/// Back-projects every valid depth pixel to world space.
pub fn depth_to_pointmap(depth: &DepthMap, cam: &Camera) -> PointMap {
    let mut values = Vec::with_capacity(depth.values.len());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = v * depth.width + u;
            let p = if depth.mask[i] {
                cam.unproject(u, v, depth.values[i])
            } else {
                Vec3::zeros()
            };
            values.push([p.x, p.y, p.z]);
        }
    }
    PointMap {
        height: depth.height,
        width: depth.width,
        values,
        mask: depth.mask.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::from_fov(64, 64, 50.0)
    }

    #[test]
    fn identity_pose_maps_points_unchanged() {
        let cam = Camera::identity(intr());
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(cam.world_to_camera(&p), p);
        assert_eq!(cam.camera_to_world(&p), p);
    }

    #[test]
    fn translation_moves_camera_center_to_origin() {
        let cam = Camera::new(intr(), Mat3::identity(), Vec3::new(0.0, 0.0, -2.0)).unwrap();
        assert_eq!(cam.world_to_camera(&Vec3::new(0.0, 0.0, 2.0)), Vec3::zeros());
        let cam = Camera::new(intr(), Mat3::identity(), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(cam.camera_to_world(&Vec3::zeros()), Vec3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn world_camera_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = orbit_camera(33.0, 17.0, 2.5, intr()).unwrap();
        for _ in 0..100 {
            let p = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let back = cam.camera_to_world(&cam.world_to_camera(&p));
            assert!((back - p).amax() < 1e-6);
        }
    }

    #[test]
    fn orbit_centers_follow_protocol() {
        let cam = orbit_camera(0.0, 0.0, 2.0, intr()).unwrap();
        assert_relative_eq!(cam.center(), Vec3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        // origin sits on the optical axis
        let o = cam.world_to_camera(&Vec3::zeros());
        assert_relative_eq!(o, Vec3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
        let cam = orbit_camera(180.0, 0.0, 2.0, intr()).unwrap();
        assert_relative_eq!(cam.center(), Vec3::new(-2.0, 0.0, 0.0), epsilon = 1e-12);
        // world up projects to image up (negative camera y)
        let up = cam.rotation * Vec3::z();
        assert!(up.y < -0.99);
    }

    #[test]
    fn orbit_rejects_poles_and_bad_radius() {
        assert!(matches!(
            orbit_camera(10.0, 90.0, 2.0, intr()),
            Err(Error::DegenerateElevation(_))
        ));
        assert!(orbit_camera(10.0, -90.0, 2.0, intr()).is_err());
        assert!(orbit_camera(10.0, 0.0, 0.0, intr()).is_err());
    }

    #[test]
    fn antipodal_azimuths() {
        for a in [0.0, 37.0, 90.0, 211.0] {
            let c0 = orbit_camera(a, 0.0, 2.0, intr()).unwrap().center();
            let c1 = orbit_camera(a + 180.0, 0.0, 2.0, intr()).unwrap().center();
            assert!((c0 + c1).amax() < 1e-12);
        }
    }

    #[test]
    fn invalid_rotation_rejected() {
        let mut r = Mat3::identity();
        r[(0, 0)] = -1.0;
        assert!(Camera::new(intr(), r, Vec3::zeros()).is_err());
        assert!(Camera::new(intr(), Mat3::identity() * 1.1, Vec3::zeros()).is_err());
    }

    #[test]
    fn depth_of_constant_pointmap() {
        let cam = Camera::identity(intr());
        let mut pm = PointMap::new(2, 2, vec![[0.0, 0.0, 2.0]; 4], vec![true; 4]).unwrap();
        pm.mask[3] = false;
        pm.values[1] = [0.0, 0.0, -1.0];
        let d = pointmap_to_depth(&pm, &cam);
        assert_eq!(d.values[0], 2.0);
        assert!(!d.mask[1], "point behind the camera must be invalid");
        assert!(!d.mask[3]);
        assert!(d.mask[0] && d.mask[2]);
    }

    #[test]
    fn unproject_then_depth_round_trip() {
        let cam = orbit_camera(45.0, 20.0, 3.0, intr()).unwrap();
        let depth = DepthMap::new(64, 64, vec![2.5; 64 * 64], vec![true; 64 * 64]).unwrap();
        let pm = depth_to_pointmap(&depth, &cam);
        let back = pointmap_to_depth(&pm, &cam);
        for z in back.values {
            assert!((z - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn camera_text_round_trip() {
        let cam = orbit_camera(123.0, 20.0, 2.7, intr()).unwrap();
        let text = cam.to_toml().unwrap();
        assert!(text.contains("rotation") && text.contains("translation"));
        assert_eq!(Camera::from_toml(&text).unwrap(), cam);
    }
}
