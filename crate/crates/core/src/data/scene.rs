//! Procedural scenes made of spheres and axis-aligned boxes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Primitives stay inside `[-EXTENT, EXTENT]³`, well within the unit cube.
pub const EXTENT: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { color: [f64; 3] },
    /// Alternating colors on a 3-d lattice with `frequency` cells per unit.
    Checker { a: [f64; 3], b: [f64; 3], frequency: f64 },
    /// Linear blend from `a` at coordinate −1 to `b` at +1 along `axis`.
    Gradient { a: [f64; 3], b: [f64; 3], axis: usize },
}

impl Texture {
    pub fn color_at(&self, p: &Vec3) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { a, b, frequency } => {
                let cell = (p.x * frequency).floor() + (p.y * frequency).floor() + (p.z * frequency).floor();
                if (cell as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { a, b, axis } => {
                let t = ((p[*axis] + 1.0) * 0.5).clamp(0.0, 1.0);
                [0, 1, 2].map(|c| a[c] * (1.0 - t) + b[c] * t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, texture: Texture },
    /// Axis-aligned box.
    Cuboid { center: [f64; 3], half_extents: [f64; 3], texture: Texture },
}

impl Primitive {
    pub fn texture(&self) -> &Texture {
        match self {
            Primitive::Sphere { texture, .. } | Primitive::Cuboid { texture, .. } => texture,
        }
    }

    pub fn surface_area(&self) -> f64 {
        match self {
            Primitive::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Primitive::Cuboid { half_extents: h, .. } => 8.0 * (h[1] * h[2] + h[0] * h[2] + h[0] * h[1]),
        }
    }

    /// Signed implicit function: negative inside, zero on the surface.
    pub fn implicit(&self, p: &Vec3) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - Vec3::from(*center)).norm() - radius,
            Primitive::Cuboid { center, half_extents, .. } => {
                let d = (p - Vec3::from(*center)).abs() - Vec3::from(*half_extents);
                d.max()
            }
        }
    }

    /// Corners of the axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let c = Vec3::from(*center);
                (c.add_scalar(-radius), c.add_scalar(*radius))
            }
            Primitive::Cuboid { center, half_extents, .. } => {
                let (c, h) = (Vec3::from(*center), Vec3::from(*half_extents));
                (c - h, c + h)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    /// One gradient-textured sphere at the origin.
    pub fn textured_sphere(radius: f64) -> Self {
        Self {
            seed: 0,
            primitives: vec![Primitive::Sphere {
                center: [0.0; 3],
                radius,
                texture: Texture::Gradient {
                    a: [0.85, 0.25, 0.15],
                    b: [0.15, 0.35, 0.85],
                    axis: 2,
                },
            }],
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene specs always serialize")
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.gen_range(0.1..0.9))
}

fn random_texture(rng: &mut impl Rng) -> Texture {
    match rng.gen_range(0..3) {
        0 => Texture::Solid {
            color: random_color(rng),
        },
        1 => Texture::Checker {
            a: random_color(rng),
            b: random_color(rng),
            frequency: rng.gen_range(1.0..3.0),
        },
        _ => Texture::Gradient {
            a: random_color(rng),
            b: random_color(rng),
            axis: rng.gen_range(0..3),
        },
    }
}

/// Deterministic random scene of 1–4 primitives inside the unit cube.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=4);
    let primitives = (0..count)
        .map(|_| {
            let texture = random_texture(&mut rng);
            if rng.gen_bool(0.5) {
                let radius = rng.gen_range(0.2..0.5);
                let lim = EXTENT - radius;
                Primitive::Sphere {
                    center: [0, 1, 2].map(|_| rng.gen_range(-lim..lim)),
                    radius,
                    texture,
                }
            } else {
                let half_extents = [0, 1, 2].map(|_| rng.gen_range(0.15..0.4));
                let center = [0, 1, 2].map(|c| {
                    let lim = EXTENT - half_extents[c];
                    rng.gen_range(-lim..lim)
                });
                Primitive::Cuboid {
                    center,
                    half_extents,
                    texture,
                }
            }
        })
        .collect();
    SceneSpec { seed, primitives }
}
