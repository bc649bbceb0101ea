//! GS-maps: one 3D Gaussian per pixel per view.
//!
//! Every pixel carries 14 channels in the order
//! `[px, py, pz, sx, sy, sz, qw, qx, qy, qz, opacity, r, g, b]`.
//! A [`RawGsMap`] holds network outputs before activation; [`GsMap`] holds
//! the activated parameters that satisfy the Gaussian invariants.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

pub mod ply;

pub const CHANNELS: usize = 14;
pub const POSITION: std::ops::Range<usize> = 0..3;
pub const SCALE: std::ops::Range<usize> = 3..6;
pub const ROTATION: std::ops::Range<usize> = 6..10;
pub const OPACITY: usize = 10;
pub const COLOR: std::ops::Range<usize> = 11..14;

/// Multiplier applied after the softplus of the scale channels.
pub const SCALE_COEFF: f64 = 0.1;
/// Quaternions shorter than this at a valid pixel are rejected.
pub const MIN_QUAT_NORM: f64 = 1e-8;
/// Logit range for sigmoid/softplus inputs; keeps opacity and color strictly
/// inside (0, 1) and scale strictly positive in f64.
const LOGIT_LIMIT: f64 = 30.0;

const MAGIC: [u8; 4] = *b"GSMP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
    1.0 / (1.0 + (-x).exp())
}

fn sigmoid_grad(x: f64) -> f64 {
    if x.abs() > LOGIT_LIMIT {
        return 0.0;
    }
    let s = sigmoid(x);
    s * (1.0 - s)
}

pub fn softplus(x: f64) -> f64 {
    let x = x.clamp(-LOGIT_LIMIT, LOGIT_LIMIT * 10.0);
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_grad(x: f64) -> f64 {
    if x < -LOGIT_LIMIT || x > LOGIT_LIMIT * 10.0 {
        return 0.0;
    }
    sigmoid(x)
}

/// Inverse of [`sigmoid`] for values in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`softplus`] for positive values.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 20.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Activates one pixel. Returns `None` when the quaternion is degenerate.
pub fn activate_pixel(raw: &[f64]) -> Option<[f64; CHANNELS]> {
    let mut out = [0.0; CHANNELS];
    for c in POSITION {
        out[c] = raw[c].clamp(-1.0, 1.0);
    }
    for c in SCALE {
        out[c] = SCALE_COEFF * softplus(raw[c]);
    }
    let q = &raw[ROTATION];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= MIN_QUAT_NORM) {
        return None;
    }
    for (o, v) in out[ROTATION].iter_mut().zip(q) {
        *o = v / norm;
    }
    out[OPACITY] = sigmoid(raw[OPACITY]);
    for c in COLOR {
        out[c] = sigmoid(raw[c]);
    }
    Some(out)
}

/// Vector-Jacobian product of [`activate_pixel`]: maps a gradient on the
/// activated channels back to the raw channels.
pub fn activate_pixel_backward(raw: &[f64], grad_out: &[f64], grad_raw: &mut [f64]) {
    for c in POSITION {
        grad_raw[c] = if raw[c] > -1.0 && raw[c] < 1.0 {
            grad_out[c]
        } else {
            0.0
        };
    }
    for c in SCALE {
        grad_raw[c] = SCALE_COEFF * softplus_grad(raw[c]) * grad_out[c];
    }
    let q = &raw[ROTATION];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm >= MIN_QUAT_NORM {
        let g = &grad_out[ROTATION];
        // d(q/|q|) = (I - q̂ q̂ᵀ) / |q|
        let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
        for k in 0..4 {
            grad_raw[ROTATION.start + k] = (g[k] - q[k] / norm * dot) / norm;
        }
    } else {
        grad_raw[ROTATION].fill(0.0);
    }
    grad_raw[OPACITY] = sigmoid_grad(raw[OPACITY]) * grad_out[OPACITY];
    for c in COLOR {
        grad_raw[c] = sigmoid_grad(raw[c]) * grad_out[c];
    }
}

/// Rotation matrix of a quaternion `(w, x, y, z)`; the quaternion is
/// normalized first.
pub fn quat_to_rotation(q: &[f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(scale)`.
pub fn covariance(scale: &[f64; 3], q: &[f64; 4]) -> Mat3 {
    let m = quat_to_rotation(q) * Mat3::from_diagonal(&Vec3::from(*scale));
    m * m.transpose()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian3D {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    /// `(w, x, y, z)`
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn from_channels(c: &[f64]) -> Self {
        Self {
            mean: [c[0], c[1], c[2]],
            scale: [c[3], c[4], c[5]],
            rotation: [c[6], c[7], c[8], c[9]],
            opacity: c[OPACITY],
            color: [c[11], c[12], c[13]],
        }
    }

    pub fn to_channels(&self) -> [f64; CHANNELS] {
        let mut c = [0.0; CHANNELS];
        c[POSITION].copy_from_slice(&self.mean);
        c[SCALE].copy_from_slice(&self.scale);
        c[ROTATION].copy_from_slice(&self.rotation);
        c[OPACITY] = self.opacity;
        c[COLOR].copy_from_slice(&self.color);
        c
    }

    pub fn covariance(&self) -> Mat3 {
        covariance(&self.scale, &self.rotation)
    }

    pub fn is_valid(&self) -> bool {
        let qn: f64 = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.mean.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|&s| s > 0.0 && s.is_finite())
            && (qn - 1.0).abs() < 1e-6
            && self.opacity > 0.0
            && self.opacity < 1.0
            && self.color.iter().all(|&c| c > 0.0 && c < 1.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianSet {
    pub fn new(gaussians: Vec<Gaussian3D>) -> Self {
        Self { gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

fn check_layout(n_views: usize, height: usize, width: usize, values: &[f64], mask: &[bool]) -> Result<()> {
    let pixels = n_views * height * width;
    if values.len() != pixels * CHANNELS || mask.len() != pixels {
        return Err(Error::Shape(format!(
            "GS-map {n_views}x{height}x{width} needs {} values and {pixels} mask entries, got {} and {}",
            pixels * CHANNELS,
            values.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Pre-activation GS-map.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGsMap {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl RawGsMap {
    pub fn new(n_views: usize, height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        check_layout(n_views, height, width, &values, &mask)?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            n_views,
            height,
            width,
            values,
            mask,
        })
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * CHANNELS..(index + 1) * CHANNELS]
    }
}

/// Activated GS-map.
#[derive(Debug, Clone, PartialEq)]
pub struct GsMap {
    pub n_views: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GsMap {
    /// Wraps already-activated values; only the layout is checked.
    pub fn from_parts(n_views: usize, height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        check_layout(n_views, height, width, &values, &mask)?;
        Ok(Self {
            n_views,
            height,
            width,
            values,
            mask,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.n_views * self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * CHANNELS..(index + 1) * CHANNELS]
    }

    pub fn gaussian(&self, index: usize) -> Gaussian3D {
        Gaussian3D::from_channels(self.pixel(index))
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks the per-pixel invariants at every pixel, returning the first
    /// offending flat pixel index.
    pub fn check_invariants(&self) -> std::result::Result<(), usize> {
        for i in 0..self.pixel_count() {
            let p = self.pixel(i);
            let g = Gaussian3D::from_channels(p);
            let in_cube = g.mean.iter().all(|v| (-1.0..=1.0).contains(v));
            if !(in_cube && g.is_valid()) {
                return Err(i);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4 + self.mask.len());
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, self.n_views as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend(self.mask.iter().map(|&m| m as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: MAGIC,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (n_views, height, width) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let pixels = n_views * height * width;
        let expected = HEADER_LEN + pixels * CHANNELS * 4 + pixels;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Malformed {
                path: Default::default(),
                reason: format!("{} trailing bytes after GS-map payload", bytes.len() - expected),
            });
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + pixels * CHANNELS * 4];
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mask = bytes[HEADER_LEN + pixels * CHANNELS * 4..]
            .iter()
            .map(|&b| b != 0)
            .collect();
        Self::from_parts(n_views, height, width, values, mask)
    }
}

/// Applies the channel activations to every pixel.
///
/// Masked-out pixels with a degenerate quaternion receive the identity
/// rotation; a degenerate quaternion at a valid pixel is an error.
pub fn activate(raw: &RawGsMap) -> Result<GsMap> {
    let mut values = Vec::with_capacity(raw.values.len());
    let hw = raw.height * raw.width;
    for i in 0..raw.mask.len() {
        let px = raw.pixel(i);
        match activate_pixel(px) {
            Some(a) => values.extend_from_slice(&a),
            None if !raw.mask[i] => {
                let mut fixed = [0.0; CHANNELS];
                fixed.copy_from_slice(px);
                fixed[ROTATION].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                values.extend_from_slice(&activate_pixel(&fixed).expect("identity quaternion"));
            }
            None => {
                let q = &px[ROTATION];
                return Err(Error::DegenerateRotation {
                    view: i / hw,
                    row: (i % hw) / raw.width,
                    col: i % raw.width,
                    norm: q.iter().map(|v| v * v).sum::<f64>().sqrt(),
                });
            }
        }
    }
    GsMap::from_parts(raw.n_views, raw.height, raw.width, values, raw.mask.clone())
}

/// Flattens all valid pixels into one Gaussian set, view-major then
/// row-major. Also returns the flat pixel index of every Gaussian.
pub fn merge_indexed(map: &GsMap) -> Result<(GaussianSet, Vec<usize>)> {
    let index: Vec<usize> = (0..map.pixel_count()).filter(|&i| map.mask[i]).collect();
    if index.is_empty() {
        return Err(Error::Empty("GS-map has no valid pixels to merge"));
    }
    let gaussians = index.iter().map(|&i| map.gaussian(i)).collect();
    Ok((GaussianSet::new(gaussians), index))
}

pub fn merge(map: &GsMap) -> Result<GaussianSet> {
    merge_indexed(map).map(|(set, _)| set)
}

/// Stacks per-view maps of equal resolution into one multi-view map.
pub fn stack_views(maps: &[GsMap]) -> Result<GsMap> {
    let first = maps.first().ok_or(Error::Empty("no GS-maps to stack"))?;
    let mut values = Vec::new();
    let mut mask = Vec::new();
    let mut n_views = 0;
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::Shape(format!(
                "cannot stack {}x{} with {}x{} GS-maps",
                m.height, m.width, first.height, first.width
            )));
        }
        values.extend_from_slice(&m.values);
        mask.extend_from_slice(&m.mask);
        n_views += m.n_views;
    }
    GsMap::from_parts(n_views, first.height, first.width, values, mask)
}
