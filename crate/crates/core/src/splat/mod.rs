//! Tile-based software rasterizer for 3D Gaussians with analytic gradients.
//!
//! Each pixel composites its contributors front to back:
//! `C = Σ cᵢ αᵢ Πⱼ<ᵢ (1 − αⱼ)` with `αᵢ = min(0.99, oᵢ exp(−½ dᵀ Σ′ᵢ⁻¹ d))`.
//! Contributors are ordered by camera depth, ties broken by input index.

use rayon::prelude::*;

use crate::geometry::Camera;
use crate::gsmap::{GaussianSet, CHANNELS};
use crate::imaging::Image;

mod project;

pub use project::{project, project_backward, screen_covariance, ProjectedGaussian, ScreenGrad};

pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Isotropic dilation added to every screen covariance, in pixels².
    pub cov_regularization: f64,
    /// Per-Gaussian alpha never exceeds this value.
    pub max_alpha: f64,
    /// Compositing stops once transmittance falls below this value.
    pub min_transmittance: f64,
    /// Contributions with `o·exp(−power)` below this value are dropped.
    pub alpha_cutoff: f64,
    pub z_near: f64,
    /// Output alpha below this value yields depth 0.
    pub depth_alpha_floor: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            cov_regularization: 0.3,
            max_alpha: 0.99,
            min_transmittance: 1e-4,
            alpha_cutoff: 1e-10,
            z_near: 0.01,
            depth_alpha_floor: 1e-6,
        }
    }
}

impl RenderSettings {
    /// Drops contributions below 1/255 like common real-time renderers.
    /// Much cheaper, but alpha jumps at the footprint edge.
    pub fn training() -> Self {
        Self {
            alpha_cutoff: 1.0 / 255.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Image,
    /// Alpha-normalized expected depth.
    pub depth: Image,
    /// Number of Gaussians blended into each pixel.
    pub contributors: Vec<u32>,
}

/// Per-Gaussian gradient in channel order `[μ, s, q, opacity, color]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub grads: Vec<[f64; CHANNELS]>,
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        Self {
            grads: vec![[0.0; CHANNELS]; n],
        }
    }
}

/// Forward-pass record needed by the backward pass.
pub struct ForwardState<'a> {
    set: &'a GaussianSet,
    camera: &'a Camera,
    settings: RenderSettings,
    projected: Vec<Option<ProjectedGaussian>>,
    /// Per tile, indices into the set in compositing order.
    tiles: Vec<Vec<u32>>,
    final_transmittance: Vec<f64>,
    /// Per pixel, how many entries of its tile list were visited.
    visited: Vec<u32>,
}

struct TileResult {
    rgb: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    depth: Vec<f64>,
    contributors: Vec<u32>,
    final_t: Vec<f64>,
    visited: Vec<u32>,
}

fn tile_grid(cam: &Camera) -> (usize, usize) {
    (cam.width().div_ceil(TILE_SIZE), cam.height().div_ceil(TILE_SIZE))
}

/// Side of the pixel blocks a tile list is further split into.
const BLOCK: usize = 4;
const BLOCKS_PER_SIDE: usize = TILE_SIZE / BLOCK;

/// Positions in a tile list whose bounds touch each block of the tile,
/// in list order.
fn block_bins(local: &[ProjectedGaussian], cam: &Camera, tile: usize) -> Vec<Vec<u32>> {
    let (tx_count, _) = tile_grid(cam);
    let (x0, y0) = ((tile % tx_count) * TILE_SIZE, (tile / tx_count) * TILE_SIZE);
    let mut bins = vec![Vec::new(); BLOCKS_PER_SIDE * BLOCKS_PER_SIDE];
    for (k, p) in local.iter().enumerate() {
        let [bx0, by0, bx1, by1] = p.bounds;
        let lo = |v: usize, o: usize| v.saturating_sub(o) / BLOCK;
        let hi = |v: usize, o: usize| ((v.saturating_sub(o)) / BLOCK).min(BLOCKS_PER_SIDE - 1);
        if bx1 < x0 || by1 < y0 {
            continue;
        }
        for by in lo(by0, y0)..=hi(by1, y0) {
            for bx in lo(bx0, x0)..=hi(bx1, x0) {
                bins[by * BLOCKS_PER_SIDE + bx].push(k as u32);
            }
        }
    }
    bins
}

fn block_of(x: usize, y: usize) -> usize {
    ((y % TILE_SIZE) / BLOCK) * BLOCKS_PER_SIDE + (x % TILE_SIZE) / BLOCK
}

fn tile_pixels(cam: &Camera, tile: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx_count, _) = tile_grid(cam);
    let (tx, ty) = (tile % tx_count, tile / tx_count);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(cam.width());
    let y1 = (y0 + TILE_SIZE).min(cam.height());
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Indices of visible Gaussians sorted by depth, ties by input index.
pub fn depth_order(projected: &[Option<ProjectedGaussian>]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..projected.len() as u32)
        .filter(|&i| projected[i as usize].is_some())
        .collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (
            projected[a as usize].as_ref().unwrap().depth,
            projected[b as usize].as_ref().unwrap().depth,
        );
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

/// Alpha of a projected Gaussian at pixel `(x, y)`, or `None` when the
/// pixel lies outside its influence region.
#[inline]
fn alpha_at(p: &ProjectedGaussian, x: usize, y: usize, max_alpha: f64) -> Option<(f64, f64, bool)> {
    let [x0, y0, x1, y1] = p.bounds;
    if x < x0 || x > x1 || y < y0 || y > y1 {
        return None;
    }
    let power = p.power_at(x, y);
    if !(power <= p.power_cut) {
        return None;
    }
    let g = (-power).exp();
    let raw = p.opacity * g;
    Some(if raw > max_alpha {
        (max_alpha, g, true)
    } else {
        (raw, g, false)
    })
}

pub fn rasterize(set: &GaussianSet, cam: &Camera) -> RenderOutput {
    rasterize_with(set, cam, &RenderSettings::default())
}

pub fn rasterize_with(set: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> RenderOutput {
    forward(set, cam, settings).0
}

/// Renders and keeps the state required by [`backward`].
pub fn forward<'a>(set: &'a GaussianSet, cam: &'a Camera, settings: &RenderSettings) -> (RenderOutput, ForwardState<'a>) {
    let projected: Vec<Option<ProjectedGaussian>> = set
        .gaussians
        .iter()
        .map(|g| project(g, cam, settings))
        .collect();
    let order = depth_order(&projected);
    let (tx_count, ty_count) = tile_grid(cam);
    let mut tiles = vec![Vec::new(); tx_count * ty_count];
    for &i in &order {
        let [x0, y0, x1, y1] = projected[i as usize].as_ref().unwrap().bounds;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tx_count + tx].push(i);
            }
        }
    }

    let results: Vec<TileResult> = tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let n = tile_pixels(cam, tile).count();
            let mut r = TileResult {
                rgb: Vec::with_capacity(n),
                alpha: Vec::with_capacity(n),
                depth: Vec::with_capacity(n),
                contributors: Vec::with_capacity(n),
                final_t: Vec::with_capacity(n),
                visited: Vec::with_capacity(n),
            };
            let local: Vec<ProjectedGaussian> = list.iter().map(|&gi| projected[gi as usize].unwrap()).collect();
            let bins = block_bins(&local, cam, tile);
            for (x, y) in tile_pixels(cam, tile) {
                let mut t = 1.0;
                let mut c = [0.0; 3];
                let mut d = 0.0;
                let mut count = 0;
                let mut visited = 0;
                for &k in &bins[block_of(x, y)] {
                    let k = k as usize;
                    let p = &local[k];
                    let Some((a, _, _)) = alpha_at(p, x, y, settings.max_alpha) else {
                        continue;
                    };
                    let w = a * t;
                    for ch in 0..3 {
                        c[ch] += p.color[ch] * w;
                    }
                    d += p.depth * w;
                    t *= 1.0 - a;
                    count += 1;
                    visited = k + 1;
                    if t < settings.min_transmittance {
                        break;
                    }
                }
                let alpha = 1.0 - t;
                r.rgb.push(c);
                r.alpha.push(alpha);
                r.depth.push(if alpha < settings.depth_alpha_floor { 0.0 } else { d / alpha });
                r.contributors.push(count);
                r.final_t.push(t);
                r.visited.push(visited as u32);
            }
            r
        })
        .collect();

    let (w, h) = (cam.width(), cam.height());
    let mut rgb = Image::zeros(w, h, 3);
    let mut alpha = Image::zeros(w, h, 1);
    let mut depth = Image::zeros(w, h, 1);
    let mut contributors = vec![0; w * h];
    let mut final_transmittance = vec![1.0; w * h];
    let mut visited = vec![0; w * h];
    for (tile, r) in results.iter().enumerate() {
        for (k, (x, y)) in tile_pixels(cam, tile).enumerate() {
            let i = y * w + x;
            rgb.data[3 * i..3 * i + 3].copy_from_slice(&r.rgb[k]);
            alpha.data[i] = r.alpha[k];
            depth.data[i] = r.depth[k];
            contributors[i] = r.contributors[k];
            final_transmittance[i] = r.final_t[k];
            visited[i] = r.visited[k];
        }
    }
    let out = RenderOutput {
        rgb,
        alpha,
        depth,
        contributors,
    };
    let state = ForwardState {
        set,
        camera: cam,
        settings: *settings,
        projected,
        tiles,
        final_transmittance,
        visited,
    };
    (out, state)
}

/// Backpropagates image-space gradients to every Gaussian parameter.
///
/// Tiles are processed independently; their partial sums are combined in
/// tile order, so results are bitwise reproducible.
pub fn backward(state: &ForwardState<'_>, d_rgb: &Image, d_alpha: &Image) -> GradientBuffer {
    let cam = state.camera;
    let w = cam.width();
    let max_alpha = state.settings.max_alpha;
    let partials: Vec<Vec<ScreenGrad>> = state
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut acc = vec![ScreenGrad::default(); list.len()];
            let local: Vec<ProjectedGaussian> = list.iter().map(|&gi| state.projected[gi as usize].unwrap()).collect();
            let bins = block_bins(&local, cam, tile);
            for (x, y) in tile_pixels(cam, tile) {
                let i = y * w + x;
                let g_c = [d_rgb.data[3 * i], d_rgb.data[3 * i + 1], d_rgb.data[3 * i + 2]];
                let g_a = d_alpha.data[i];
                if g_c == [0.0; 3] && g_a == 0.0 {
                    continue;
                }
                let t_final = state.final_transmittance[i];
                let mut t = t_final;
                // color accumulated by contributors behind the current one
                let mut behind = [0.0; 3];
                let bin = &bins[block_of(x, y)];
                let end = bin.partition_point(|&k| k < state.visited[i]);
                for &k in bin[..end].iter().rev() {
                    let k = k as usize;
                    let p = &local[k];
                    let Some((a, gauss, clamped)) = alpha_at(p, x, y, max_alpha) else {
                        continue;
                    };
                    let one_minus = 1.0 - a;
                    t /= one_minus;
                    let wgt = a * t;
                    let sg = &mut acc[k];
                    let mut g_alpha = g_a * t_final / one_minus;
                    for ch in 0..3 {
                        sg.color[ch] += g_c[ch] * wgt;
                        g_alpha += g_c[ch] * (p.color[ch] * t - behind[ch] / one_minus);
                        behind[ch] += p.color[ch] * wgt;
                    }
                    if clamped {
                        continue;
                    }
                    sg.opacity += g_alpha * gauss;
                    // α = o·exp(−power); ∂α/∂power = −α
                    let g_power = -g_alpha * a;
                    let dx = x as f64 + 0.5 - p.mean[0];
                    let dy = y as f64 + 0.5 - p.mean[1];
                    let [ca, cb, cc] = p.conic;
                    sg.conic[0] += g_power * 0.5 * dx * dx;
                    sg.conic[1] += g_power * dx * dy;
                    sg.conic[2] += g_power * 0.5 * dy * dy;
                    sg.mean[0] -= g_power * (ca * dx + cb * dy);
                    sg.mean[1] -= g_power * (cb * dx + cc * dy);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); state.set.len()];
    for (list, acc) in state.tiles.iter().zip(&partials) {
        for (&gi, sg) in list.iter().zip(acc) {
            screen[gi as usize].add(sg);
        }
    }
    let grads = state
        .set
        .gaussians
        .iter()
        .zip(&state.projected)
        .zip(&screen)
        .map(|((g, p), sg)| match p {
            Some(_) => project_backward(g, cam, &state.settings, sg),
            None => [0.0; CHANNELS],
        })
        .collect();
    GradientBuffer { grads }
}

/// Recomputes the forward pass and backpropagates `dL/dRGB`, `dL/dAlpha`.
pub fn rasterize_backward(set: &GaussianSet, cam: &Camera, d_rgb: &Image, d_alpha: &Image) -> GradientBuffer {
    let (_, state) = forward(set, cam, &RenderSettings::default());
    backward(&state, d_rgb, d_alpha)
}
