//! Viewpoint protocols and the on-disk dataset layout.
//!
//! ```text
//! <out>/manifest.json
//! <out>/scene_<id>/spec.json
//! <out>/scene_<id>/surface.xyz        one "x y z" triple per line
//! <out>/scene_<id>/view_<k>.png       8-bit RGBA, alpha in A
//! <out>/scene_<id>/view_<k>.depth     u32 H, u32 W, H·W f32 (little-endian)
//! <out>/scene_<id>/view_<k>.cam       camera record (TOML)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_render, sample_surface};
use super::scene::{generate_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::{orbit_camera, Camera, DepthMap, Intrinsics, PointCloud};
use crate::imaging::Image;

/// Azimuths of the four-view input rig, all at elevation 0.
pub const INPUT_RIG_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const SURFACE_POINTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// 16 views at 22.5° azimuth steps, elevation alternating 0° and 20°.
    Eval16,
    /// The four-view input rig followed by random viewpoints.
    Train,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eval16" => Ok(Protocol::Eval16),
            "train" => Ok(Protocol::Train),
            other => Err(Error::Config(format!("unknown protocol {other:?}, expected train or eval16"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub resolution: usize,
    pub fov_deg: f64,
    pub radius: f64,
}

impl Default for Rig {
    fn default() -> Self {
        Self {
            resolution: 64,
            fov_deg: 50.0,
            radius: 2.8,
        }
    }
}

impl Rig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.resolution, self.resolution, self.fov_deg)
    }

    pub fn camera(&self, azimuth_deg: f64, elevation_deg: f64) -> Result<Camera> {
        orbit_camera(azimuth_deg, elevation_deg, self.radius, self.intrinsics())
    }
}

/// `(azimuth, elevation)` in degrees for every view of a scene.
pub fn viewpoints(protocol: Protocol, views: usize, seed: u64) -> Vec<(f64, f64)> {
    match protocol {
        Protocol::Eval16 => (0..16)
            .map(|k| (k as f64 * 22.5, if k % 2 == 0 { 0.0 } else { 20.0 }))
            .collect(),
        Protocol::Train => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..views)
                .map(|k| match INPUT_RIG_AZIMUTHS.get(k) {
                    Some(&a) => (a, 0.0),
                    None => (rng.gen_range(0.0..360.0), rng.gen_range(0.0..30.0)),
                })
                .collect()
        }
    }
}

/// Indices of the input-rig views within a protocol's view list.
pub fn input_rig(protocol: Protocol) -> [usize; 4] {
    match protocol {
        Protocol::Eval16 => [0, 4, 8, 12],
        Protocol::Train => [0, 1, 2, 3],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub rgb: Image,
    pub alpha: Image,
    pub depth: DepthMap,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub views: Vec<View>,
    pub surface: PointCloud,
}

impl SceneBundle {
    /// Renders `spec` from every camera with the oracle.
    pub fn render(spec: SceneSpec, cameras: &[Camera], surface_seed: u64) -> Self {
        let views = cameras
            .iter()
            .map(|cam| {
                let o = oracle_render(&spec, cam);
                View {
                    rgb: o.rgb,
                    alpha: o.alpha,
                    depth: o.depth,
                    camera: cam.clone(),
                }
            })
            .collect();
        let surface = sample_surface(&spec, SURFACE_POINTS, surface_seed);
        Self { spec, views, surface }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("spec.json"), self.spec.to_json())?;
        let mut xyz = String::with_capacity(self.surface.len() * 40);
        for p in &self.surface.points {
            writeln!(xyz, "{} {} {}", p[0], p[1], p[2]).expect("writing to a String");
        }
        fs::write(dir.join("surface.xyz"), xyz)?;
        for (k, v) in self.views.iter().enumerate() {
            Image::join_alpha(&v.rgb, &v.alpha)?.save_png(dir.join(format!("view_{k}.png")))?;
            write_depth(dir.join(format!("view_{k}.depth")), &v.depth)?;
            v.camera.save(dir.join(format!("view_{k}.cam")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        let surface = read_xyz(dir.join("surface.xyz"))?;
        let mut views = Vec::new();
        while dir.join(format!("view_{}.png", views.len())).exists() {
            views.push(load_view(dir, views.len())?);
        }
        Ok(Self { spec, views, surface })
    }
}

pub fn load_view(scene_dir: impl AsRef<Path>, k: usize) -> Result<View> {
    let dir = scene_dir.as_ref();
    let (rgb, alpha) = Image::load_rgba(dir.join(format!("view_{k}.png")))?.split_alpha()?;
    let depth = read_depth(dir.join(format!("view_{k}.depth")))?;
    let camera = Camera::load(dir.join(format!("view_{k}.cam")))?;
    if (depth.width, depth.height) != (rgb.width, rgb.height) {
        return Err(Error::Malformed {
            path: dir.join(format!("view_{k}.depth")),
            reason: "depth size differs from the image".into(),
        });
    }
    Ok(View {
        rgb,
        alpha,
        depth,
        camera,
    })
}

pub fn write_depth(path: impl AsRef<Path>, d: &DepthMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * d.values.len());
    bytes.extend_from_slice(&(d.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(d.width as u32).to_le_bytes());
    for (v, m) in d.values.iter().zip(&d.mask) {
        let v = if *m { *v as f32 } else { f32::INFINITY };
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a depth file; non-finite entries become masked pixels.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            found: bytes.len(),
        });
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + 4 * h * w;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mask = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
    DepthMap::new(h, w, values, mask)
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", line_no + 1),
            })?;
        if vals.len() != 3 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 3 values, got {}", line_no + 1, vals.len()),
            });
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    Ok(PointCloud::new(points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub protocol: Protocol,
    pub scenes: usize,
    pub views_per_scene: usize,
    pub rig: Rig,
    pub seed: u64,
    pub input_views: [usize; 4],
}

impl Manifest {
    pub fn load(dataset_dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dataset_dir.as_ref().join("manifest.json"))?)?)
    }
}

pub fn scene_dir(dataset_dir: impl AsRef<Path>, id: usize) -> PathBuf {
    dataset_dir.as_ref().join(format!("scene_{id}"))
}

/// Per-scene seed derived from the dataset seed.
pub fn scene_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id as u64)
}

/// Generates and writes `n_scenes` scenes. `views` is ignored by `eval16`.
pub fn make_dataset(
    out: impl AsRef<Path>,
    n_scenes: usize,
    views: usize,
    protocol: Protocol,
    rig: Rig,
    seed: u64,
) -> Result<Manifest> {
    let out = out.as_ref();
    if protocol == Protocol::Train && views < INPUT_RIG_AZIMUTHS.len() {
        return Err(Error::Config(format!("train protocol needs at least 4 views, got {views}")));
    }
    fs::create_dir_all(out)?;
    let mut views_per_scene = 0;
    for id in 0..n_scenes {
        let s = scene_seed(seed, id);
        let spec = generate_scene(s);
        let cameras = viewpoints(protocol, views, s)
            .into_iter()
            .map(|(a, e)| rig.camera(a, e))
            .collect::<Result<Vec<_>>>()?;
        views_per_scene = cameras.len();
        SceneBundle::render(spec, &cameras, s).save(scene_dir(out, id))?;
    }
    let manifest = Manifest {
        protocol,
        scenes: n_scenes,
        views_per_scene,
        rig,
        seed,
        input_views: input_rig(protocol),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
