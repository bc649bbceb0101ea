//! Differentiable operations. Spatial tensors are channel-last
//! `[batch, height, width, channels]`; token tensors are `[batch, tokens, dim]`.

use std::rc::Rc;

use super::graph::{Graph, Var};
use super::tensor::{gemm, Mat, Tensor};
use crate::error::{Error, Result};
use crate::gsmap::{activate_pixel, activate_pixel_backward, CHANNELS};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable softmax over rows of length `cols`.
pub fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Attention probabilities `[batch, heads, tq, tk]` for `q: [batch, tq, d]`
/// and `k: [batch, tk, d]`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Vec<f64> {
    let (b, tq, d) = (q.shape[0], q.shape[1], q.shape[2]);
    let tk = k.shape[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; b * heads * tq * tk];
    for bi in 0..b {
        for h in 0..heads {
            let s = &mut p[(bi * heads + h) * tq * tk..][..tq * tk];
            let qo = bi * tq * d + h * dh;
            let ko = bi * tk * d + h * dh;
            gemm(
                tq,
                dh,
                tk,
                Mat::strided(&q.data[qo..], d, 1),
                Mat::strided(&k.data[ko..], d, 1).t(),
                0.0,
                s,
                tk,
            );
            s.iter_mut().for_each(|v| *v *= scale);
            softmax_rows(s, tk);
        }
    }
    p
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn kc(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Calls `f(col_offset, x_offset)` for every in-bounds kernel tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let kc = self.kc();
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * kc;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            f(row + (ky * self.k + kx) * self.c, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let c = self.c;
        let mut col = vec![0.0; self.n * self.ho * self.wo * self.kc()];
        self.for_each_tap(|dst, src| col[dst..dst + c].copy_from_slice(&x[src..src + c]));
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let c = self.c;
        let mut x = vec![0.0; self.n * self.h * self.w * c];
        self.for_each_tap(|dst, src| {
            for (a, b) in x[src..src + c].iter_mut().zip(&col[dst..dst + c]) {
                *a += b;
            }
        });
        x
    }
}

/// Source rows and weights of half-pixel bilinear resampling along one axis.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn sum_rows(g: &Tensor, cols: usize) -> Tensor {
    let mut s = vec![0.0; cols];
    for row in g.data.chunks(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::new(&[cols], s)
}

impl Graph {
    /// `x · w + b` over the last axis of `x`. `w` holds `in × out` values in
    /// row-major order whatever its shape; `b` has `out` entries.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.shared(x), self.shared(w));
        let din = xv.last_dim();
        let dout = wv.last_dim();
        assert_eq!(wv.len(), din * dout, "weight {:?} does not map {din} inputs", wv.shape);
        let r = xv.rows();
        let mut out = vec![0.0; r * dout];
        let bv = b.map(|b| self.shared(b));
        if let Some(bv) = &bv {
            assert_eq!(bv.len(), dout);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(&bv.data);
            }
        }
        gemm(r, din, dout, Mat::rows(&xv.data, din), Mat::rows(&wv.data, dout), 1.0, &mut out, dout);
        let mut shape = xv.shape.clone();
        *shape.last_mut().expect("non-empty shape") = dout;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        let wshape = wv.shape.clone();
        self.push(
            Tensor::new(&shape, out),
            parents,
            Box::new(move |g, need| {
                let dx = need[0].then(|| {
                    let mut d = vec![0.0; r * din];
                    gemm(r, dout, din, Mat::rows(&g.data, dout), Mat::rows(&wv.data, dout).t(), 0.0, &mut d, din);
                    Tensor::new(&xv.shape, d)
                });
                let dw = need[1].then(|| {
                    let mut d = vec![0.0; din * dout];
                    gemm(din, r, dout, Mat::rows(&xv.data, din).t(), Mat::rows(&g.data, dout), 0.0, &mut d, dout);
                    Tensor::new(&wshape, d)
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(need[2].then(|| sum_rows(g, dout)));
                }
                grads
            }),
        )
    }

    /// 2-d convolution of `x: [n, h, w, c]` with `w: [k, k, c, o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.shared(x), self.shared(w));
        assert_eq!(xv.shape.len(), 4, "conv2d input must be [n, h, w, c]");
        assert_eq!(wv.shape.len(), 4, "conv2d weight must be [k, k, c, o]");
        let k = wv.shape[0];
        if k == 1 && stride == 1 && pad == 0 {
            return self.linear(x, w, b);
        }
        let (n, h, wd, c) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        assert_eq!(wv.shape[2], c, "conv2d channel mismatch");
        let o = wv.shape[3];
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            c,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let rows = n * geom.ho * geom.wo;
        let kc = geom.kc();
        let col = geom.im2col(&xv.data);
        let mut out = vec![0.0; rows * o];
        let bv = b.map(|b| self.shared(b));
        if let Some(bv) = &bv {
            for row in out.chunks_mut(o) {
                row.copy_from_slice(&bv.data);
            }
        }
        gemm(rows, kc, o, Mat::rows(&col, kc), Mat::rows(&wv.data, o), 1.0, &mut out, o);
        drop(col);
        let shape = [n, geom.ho, geom.wo, o];
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = b.is_some();
        self.push(
            Tensor::new(&shape, out),
            parents,
            Box::new(move |g, need| {
                let dx = need[0].then(|| {
                    let mut dcol = vec![0.0; rows * kc];
                    gemm(rows, o, kc, Mat::rows(&g.data, o), Mat::rows(&wv.data, o).t(), 0.0, &mut dcol, kc);
                    Tensor::new(&xv.shape, geom.col2im(&dcol))
                });
                let dw = need[1].then(|| {
                    let col = geom.im2col(&xv.data);
                    let mut d = vec![0.0; kc * o];
                    gemm(kc, rows, o, Mat::rows(&col, kc).t(), Mat::rows(&g.data, o), 0.0, &mut d, o);
                    Tensor::new(&wv.shape, d)
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(need[2].then(|| sum_rows(g, o)));
                }
                grads
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        self.push(
            Tensor::new(&shape, data),
            vec![a, b],
            Box::new(|g, need| vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]),
        )
    }

    /// `x + p` where `p` repeats over the leading axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, p: Var) -> Var {
        let (xv, pv) = (self.value(x), self.value(p));
        let m = pv.len();
        assert!(m > 0 && xv.len() % m == 0 && xv.shape.ends_with(&pv.shape), "broadcast shape mismatch");
        let mut data = xv.data.clone();
        for chunk in data.chunks_mut(m) {
            for (a, b) in chunk.iter_mut().zip(&pv.data) {
                *a += b;
            }
        }
        let (shape, pshape) = (xv.shape.clone(), pv.shape.clone());
        self.push(
            Tensor::new(&shape, data),
            vec![x, p],
            Box::new(move |g, need| {
                let dp = need[1].then(|| {
                    let mut s = vec![0.0; m];
                    for chunk in g.data.chunks(m) {
                        for (a, b) in s.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    Tensor::new(&pshape, s)
                });
                vec![need[0].then(|| g.clone()), dp]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(&xv.shape, xv.data.iter().map(|v| v * s).collect());
        self.push(
            t,
            vec![x],
            Box::new(move |g, _| vec![Some(Tensor::new(&g.shape, g.data.iter().map(|v| v * s).collect()))]),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.shared(x);
        let t = Tensor::new(&xv.shape, xv.data.iter().map(|&v| gelu(v)).collect());
        self.push(
            t,
            vec![x],
            Box::new(move |g, _| {
                let d = g.data.iter().zip(&xv.data).map(|(gv, &v)| gv * gelu_grad(v)).collect();
                vec![Some(Tensor::new(&g.shape, d))]
            }),
        )
    }

    /// Elementwise clamp; the gradient passes strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = self.shared(x);
        let t = Tensor::new(&xv.shape, xv.data.iter().map(|v| v.clamp(lo, hi)).collect());
        self.push(
            t,
            vec![x],
            Box::new(move |g, _| {
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(gv, &v)| if v > lo && v < hi { *gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(&g.shape, d))]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.shared(x), self.shared(gamma), self.value(beta).clone());
        let d = xv.last_dim();
        assert!(gv.len() == d && bv.len() == d, "layer norm width mismatch");
        let r = xv.rows();
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xv.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                xhat[i * d + j] = xh;
                out[i * d + j] = gv.data[j] * xh + bv.data[j];
            }
        }
        let shape = xv.shape.clone();
        self.push(
            Tensor::new(&shape, out),
            vec![x, gamma, beta],
            Box::new(move |g, need| {
                let mut dx = vec![0.0; r * d];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for i in 0..r {
                    let gr = &g.data[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..d {
                        let dxh = gr[j] * gv.data[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                        dg[j] += gr[j] * xh[j];
                        db[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[i * d + j] = rstd[i] * (gr[j] * gv.data[j] - m1 - xh[j] * m2);
                    }
                }
                vec![
                    need[0].then(|| Tensor::new(&g.shape, dx)),
                    need[1].then(|| Tensor::new(&[d], dg)),
                    need[2].then(|| Tensor::new(&[d], db)),
                ]
            }),
        )
    }

    /// Multi-head scaled dot-product attention. `q: [b, tq, d]`,
    /// `k, v: [b, tk, d]`; heads split `d` into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.shared(q), self.shared(k), self.shared(v));
        assert!(qv.shape.len() == 3 && kv.shape.len() == 3 && vv.shape == kv.shape, "attention shapes");
        let (b, tq, d) = (qv.shape[0], qv.shape[1], qv.shape[2]);
        let tk = kv.shape[1];
        assert!(kv.shape[0] == b && kv.shape[2] == d && d % heads == 0, "attention shapes");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = attention_probs(&qv, &kv, heads);
        let mut out = vec![0.0; b * tq * d];
        for bi in 0..b {
            for h in 0..heads {
                let pb = &p[(bi * heads + h) * tq * tk..][..tq * tk];
                gemm(
                    tq,
                    tk,
                    dh,
                    Mat::rows(pb, tk),
                    Mat::strided(&vv.data[bi * tk * d + h * dh..], d, 1),
                    0.0,
                    &mut out[bi * tq * d + h * dh..],
                    d,
                );
            }
        }
        self.push(
            Tensor::new(&[b, tq, d], out),
            vec![q, k, v],
            Box::new(move |g, _| {
                let mut dq = vec![0.0; b * tq * d];
                let mut dk = vec![0.0; b * tk * d];
                let mut dv = vec![0.0; b * tk * d];
                let mut ds = vec![0.0; tq * tk];
                for bi in 0..b {
                    for h in 0..heads {
                        let pb = &p[(bi * heads + h) * tq * tk..][..tq * tk];
                        let (qo, ko) = (bi * tq * d + h * dh, bi * tk * d + h * dh);
                        let go = Mat::strided(&g.data[qo..], d, 1);
                        gemm(tk, tq, dh, Mat::rows(pb, tk).t(), go, 0.0, &mut dv[ko..], d);
                        gemm(tq, dh, tk, go, Mat::strided(&vv.data[ko..], d, 1).t(), 0.0, &mut ds, tk);
                        for (prow, srow) in pb.chunks(tk).zip(ds.chunks_mut(tk)) {
                            let dot: f64 = prow.iter().zip(srow.iter()).map(|(a, b)| a * b).sum();
                            for (s, pv) in srow.iter_mut().zip(prow) {
                                *s = pv * (*s - dot) * scale;
                            }
                        }
                        gemm(tq, tk, dh, Mat::rows(&ds, tk), Mat::strided(&kv.data[ko..], d, 1), 0.0, &mut dq[qo..], d);
                        gemm(tk, tq, dh, Mat::rows(&ds, tk).t(), Mat::strided(&qv.data[qo..], d, 1), 0.0, &mut dk[ko..], d);
                    }
                }
                vec![
                    Some(Tensor::new(&[b, tq, d], dq)),
                    Some(Tensor::new(&[b, tk, d], dk)),
                    Some(Tensor::new(&[b, tk, d], dv)),
                ]
            }),
        )
    }

    /// Half-pixel bilinear resampling of `[n, h, w, c]` to `[n, ho, wo, c]`.
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape.len(), 4, "resize input must be [n, h, w, c]");
        let (n, h, w, c) = (xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]);
        let ty = bilinear_taps(h, ho);
        let tx = bilinear_taps(w, wo);
        let mut out = vec![0.0; n * ho * wo * c];
        let each = |f: &mut dyn FnMut(usize, usize, f64)| {
            for b in 0..n {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let o = ((b * ho + oy) * wo + ox) * c;
                        for (yy, wyy) in [(y0, 1.0 - wy), (y1, wy)] {
                            for (xx, wxx) in [(x0, 1.0 - wx), (x1, wx)] {
                                f(o, ((b * h + yy) * w + xx) * c, wyy * wxx);
                            }
                        }
                    }
                }
            }
        };
        each(&mut |o, i, wt| {
            for k in 0..c {
                out[o + k] += wt * xv.data[i + k];
            }
        });
        let in_shape = xv.shape.clone();
        self.push(
            Tensor::new(&[n, ho, wo, c], out),
            vec![x],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * h * w * c];
                let ty = bilinear_taps(h, ho);
                let tx = bilinear_taps(w, wo);
                for b in 0..n {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let o = ((b * ho + oy) * wo + ox) * c;
                            for (yy, wyy) in [(y0, 1.0 - wy), (y1, wy)] {
                                for (xx, wxx) in [(x0, 1.0 - wx), (x1, wx)] {
                                    let i = ((b * h + yy) * w + xx) * c;
                                    let wt = wyy * wxx;
                                    for k in 0..c {
                                        dx[i + k] += wt * g.data[o + k];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&in_shape, dx))]
            }),
        )
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&x| self.shared(x)).collect();
        let lead = &vals[0].shape[..vals[0].shape.len() - 1];
        for v in &vals {
            assert_eq!(&v.shape[..v.shape.len() - 1], lead, "concat leading shapes differ");
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let r = vals[0].rows();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (v, &wd) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data[i * wd..(i + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape.clone()).collect();
        self.push(
            Tensor::new(&shape, out),
            xs.to_vec(),
            Box::new(move |g, need| {
                let mut off = 0;
                widths
                    .iter()
                    .zip(&shapes)
                    .enumerate()
                    .map(|(j, (&wd, shape))| {
                        let start = off;
                        off += wd;
                        need[j].then(|| {
                            let mut d = Vec::with_capacity(r * wd);
                            for i in 0..r {
                                d.extend_from_slice(&g.data[i * total + start..i * total + start + wd]);
                            }
                            Tensor::new(shape, d)
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let wd = xv.last_dim();
        assert!(start + len <= wd, "slice out of range");
        let r = xv.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data[i * wd + start..i * wd + start + len]);
        }
        let in_shape = xv.shape.clone();
        let mut shape = in_shape.clone();
        *shape.last_mut().expect("non-empty shape") = len;
        self.push(
            Tensor::new(&shape, out),
            vec![x],
            Box::new(move |g, _| {
                let mut d = vec![0.0; r * wd];
                for i in 0..r {
                    d[i * wd + start..i * wd + start + len].copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                vec![Some(Tensor::new(&in_shape, d))]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape.clone();
        let t = xv.clone().reshaped(shape);
        self.push(
            t,
            vec![x],
            Box::new(move |g, _| vec![Some(g.clone().reshaped(&in_shape))]),
        )
    }

    /// Rows of the first axis in the order given by `idx`.
    pub fn gather_batch(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let b = xv.shape[0];
        let m = xv.len() / b;
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&xv.data[i * m..(i + 1) * m]);
        }
        let in_shape = xv.shape.clone();
        let mut shape = in_shape.clone();
        shape[0] = idx.len();
        let idx = idx.to_vec();
        self.push(
            Tensor::new(&shape, out),
            vec![x],
            Box::new(move |g, _| {
                let mut d = vec![0.0; b * m];
                for (j, &i) in idx.iter().enumerate() {
                    for (a, v) in d[i * m..(i + 1) * m].iter_mut().zip(&g.data[j * m..(j + 1) * m]) {
                        *a += v;
                    }
                }
                vec![Some(Tensor::new(&in_shape, d))]
            }),
        )
    }

    /// Gaussian-map activation applied to every 14-channel pixel of `raw`.
    pub fn gs_activate(&mut self, raw: Var) -> Result<Var> {
        let rv = self.shared(raw);
        if rv.last_dim() != CHANNELS {
            return Err(Error::Shape(format!("expected {CHANNELS} channels, got {}", rv.last_dim())));
        }
        let mut out = Vec::with_capacity(rv.len());
        for (i, px) in rv.data.chunks(CHANNELS).enumerate() {
            let a = activate_pixel(px).ok_or_else(|| {
                let norm = px[crate::gsmap::ROTATION].iter().map(|v| v * v).sum::<f64>().sqrt();
                Error::DegenerateRotation {
                    view: 0,
                    row: 0,
                    col: i,
                    norm,
                }
            })?;
            out.extend_from_slice(&a);
        }
        let shape = rv.shape.clone();
        Ok(self.push(
            Tensor::new(&shape, out),
            vec![raw],
            Box::new(move |g, _| {
                let mut d = vec![0.0; rv.len()];
                for ((px, gp), dp) in rv.data.chunks(CHANNELS).zip(g.data.chunks(CHANNELS)).zip(d.chunks_mut(CHANNELS)) {
                    activate_pixel_backward(px, gp, dp);
                }
                vec![Some(Tensor::new(&rv.shape, d))]
            }),
        ))
    }

    /// Scalar `Σ x ⊙ c` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: &Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), c.len(), "probe size mismatch");
        let s: f64 = xv.data.iter().zip(&c.data).map(|(a, b)| a * b).sum();
        let (c, shape) = (c.clone(), xv.shape.clone());
        self.push(
            Tensor::scalar(s),
            vec![x],
            Box::new(move |g, _| {
                let s = g.data[0];
                vec![Some(Tensor::new(&shape, c.data.iter().map(|v| v * s).collect()))]
            }),
        )
    }

    /// Sum of scalar nodes with weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, w)| w * self.value(v).data[0]).sum();
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        self.push(
            Tensor::scalar(s),
            terms.iter().map(|t| t.0).collect(),
            Box::new(move |g, _| weights.iter().map(|w| Some(Tensor::scalar(w * g.data[0]))).collect()),
        )
    }

    /// Symmetric InfoNCE over matched rows: row `ia[i]` of `feat` (viewed as
    /// `rows × channels`) should be closest, in cosine similarity scaled by
    /// `1/tau`, to row `ib[i]` among all `ib`, and vice versa.
    pub fn info_nce(&mut self, feat: Var, ia: &[usize], ib: &[usize], tau: f64) -> Var {
        assert_eq!(ia.len(), ib.len());
        let fv = self.shared(feat);
        let c = fv.last_dim();
        let m = ia.len();
        let unit = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
            let mut u = Vec::with_capacity(idx.len() * c);
            let mut norms = Vec::with_capacity(idx.len());
            for &i in idx {
                let row = &fv.data[i * c..(i + 1) * c];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                norms.push(n);
                u.extend(row.iter().map(|v| v / n));
            }
            (u, norms)
        };
        let (a, na) = unit(ia);
        let (b, nb) = unit(ib);
        let mut s = vec![0.0; m * m];
        gemm(m, c, m, Mat::rows(&a, c), Mat::rows(&b, c).t(), 0.0, &mut s, m);
        s.iter_mut().for_each(|v| *v /= tau);
        let mut p = s.clone();
        softmax_rows(&mut p, m);
        let mut st = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                st[j * m + i] = s[i * m + j];
            }
        }
        let mut q = st.clone();
        softmax_rows(&mut q, m);
        let loss: f64 = (0..m).map(|i| -(p[i * m + i].ln() + q[i * m + i].ln())).sum::<f64>() / (2.0 * m as f64);
        let (ia, ib) = (ia.to_vec(), ib.to_vec());
        self.push(
            Tensor::scalar(loss),
            vec![feat],
            Box::new(move |g, _| {
                let scale = g.data[0] / (2.0 * m as f64 * tau);
                // dL/dS[i][j] from both the row and column softmax terms.
                let mut gs = vec![0.0; m * m];
                for i in 0..m {
                    for j in 0..m {
                        let delta = if i == j { 1.0 } else { 0.0 };
                        gs[i * m + j] = scale * ((p[i * m + j] - delta) + (q[j * m + i] - delta));
                    }
                }
                let mut da = vec![0.0; m * c];
                let mut db = vec![0.0; m * c];
                gemm(m, m, c, Mat::rows(&gs, m), Mat::rows(&b, c), 0.0, &mut da, c);
                gemm(m, m, c, Mat::rows(&gs, m).t(), Mat::rows(&a, c), 0.0, &mut db, c);
                let mut d = vec![0.0; fv.len()];
                for (idx, u, du, norms) in [(&ia, &a, &da, &na), (&ib, &b, &db, &nb)] {
                    for (r, &row) in idx.iter().enumerate() {
                        let ur = &u[r * c..(r + 1) * c];
                        let dr = &du[r * c..(r + 1) * c];
                        let dot: f64 = ur.iter().zip(dr).map(|(x, y)| x * y).sum();
                        for k in 0..c {
                            d[row * c + k] += (dr[k] - ur[k] * dot) / norms[r];
                        }
                    }
                }
                vec![Some(Tensor::new(&fv.shape, d))]
            }),
        )
    }
}
