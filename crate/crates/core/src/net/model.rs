use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gsmap::{GsMap, CHANNELS};
use crate::imaging::Image;
use crate::nn::{Graph, ParamStore, Tensor, Var};

/// Initial value of a parameter created on first use.
#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform in ±1/√fan_in.
    FanIn(usize),
    /// Uniform in ±bound.
    Uniform(f64),
    Zeros,
    Ones,
    Values(Vec<f64>),
}

enum Store<'a> {
    Frozen(&'a ParamStore),
    Growing(&'a mut ParamStore, ChaCha8Rng),
}

/// Graph plus parameter source. In growing mode missing parameters are
/// created from their [`Init`]; otherwise they must already exist.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: Store<'a>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamStore) -> Self {
        Self {
            g,
            store: Store::Frozen(params),
        }
    }

    pub fn growing(g: &'a mut Graph, params: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            g,
            store: Store::Growing(params, ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn p(&mut self, name: &str, shape: &[usize], init: Init) -> Var {
        match &mut self.store {
            Store::Frozen(s) => {
                assert!(s.contains(name), "missing parameter {name:?}");
                self.g.param(s, name)
            }
            Store::Growing(s, rng) => {
                if !s.contains(name) {
                    let n: usize = shape.iter().product();
                    let t = match init {
                        Init::FanIn(f) => Tensor::uniform(shape, 1.0 / (f as f64).sqrt(), rng),
                        Init::Uniform(b) => Tensor::uniform(shape, b, rng),
                        Init::Zeros => Tensor::zeros(shape),
                        Init::Ones => Tensor::full(shape, 1.0),
                        Init::Values(v) => {
                            assert_eq!(v.len(), n);
                            Tensor::new(shape, v)
                        }
                    };
                    s.insert(name, t);
                }
                self.g.param(s, name)
            }
        }
    }

    pub fn linear(&mut self, name: &str, x: Var, din: usize, dout: usize, zero: bool) -> Var {
        let init = if zero { Init::Zeros } else { Init::FanIn(din) };
        let w = self.p(&format!("{name}.w"), &[din, dout], init);
        let b = self.p(&format!("{name}.b"), &[dout], Init::Zeros);
        self.g.linear(x, w, Some(b))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, x: Var, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, zero: bool) -> Var {
        let init = if zero { Init::Zeros } else { Init::FanIn(k * k * cin) };
        let w = self.p(&format!("{name}.w"), &[k, k, cin, cout], init);
        let b = self.p(&format!("{name}.b"), &[cout], Init::Zeros);
        self.g.conv2d(x, w, Some(b), stride, pad)
    }

    /// Same-size 3×3 convolution.
    pub fn conv3(&mut self, name: &str, x: Var, cin: usize, cout: usize) -> Var {
        self.conv(name, x, cin, cout, 3, 1, 1, false)
    }

    pub fn ln(&mut self, name: &str, x: Var, d: usize) -> Var {
        let g = self.p(&format!("{name}.g"), &[d], Init::Ones);
        let b = self.p(&format!("{name}.b"), &[d], Init::Zeros);
        self.g.layer_norm(x, g, b)
    }

    /// Multi-head attention of `xq` over `xkv`, both `[b, t, d]`.
    pub fn mha(&mut self, name: &str, xq: Var, xkv: Var, d: usize, heads: usize, zero_out: bool) -> Var {
        let q = self.linear(&format!("{name}.q"), xq, d, d, false);
        let k = self.linear(&format!("{name}.k"), xkv, d, d, false);
        let v = self.linear(&format!("{name}.v"), xkv, d, d, false);
        let a = self.g.attention(q, k, v, heads);
        self.linear(&format!("{name}.o"), a, d, d, zero_out)
    }

    pub fn mlp(&mut self, name: &str, x: Var, d: usize, ratio: usize) -> Var {
        let h = self.linear(&format!("{name}.fc1"), x, d, d * ratio, false);
        let h = self.g.gelu(h);
        self.linear(&format!("{name}.fc2"), h, d * ratio, d, false)
    }
}

fn encoder_block(c: &mut Ctx, name: &str, x: Var, cfg: &ModelConfig) -> Var {
    let d = cfg.dim;
    let h = c.ln(&format!("{name}.ln1"), x, d);
    let a = c.mha(&format!("{name}.sa"), h, h, d, cfg.heads, false);
    let x = c.g.add(x, a);
    let h = c.ln(&format!("{name}.ln2"), x, d);
    let m = c.mlp(&format!("{name}.mlp"), h, d, cfg.mlp_ratio);
    c.g.add(x, m)
}

/// Self-attention on the stream, cross-attention to the partner stream,
/// then the feed-forward layer; pre-norm residuals throughout.
fn decoder_block(c: &mut Ctx, name: &str, x: Var, partner: Var, cfg: &ModelConfig) -> Var {
    let d = cfg.dim;
    let h = c.ln(&format!("{name}.ln1"), x, d);
    let a = c.mha(&format!("{name}.sa"), h, h, d, cfg.heads, false);
    let x = c.g.add(x, a);
    let h = c.ln(&format!("{name}.ln2"), x, d);
    let mem = c.ln(&format!("{name}.ln_mem"), partner, d);
    let a = c.mha(&format!("{name}.ca"), h, mem, d, cfg.heads, false);
    let x = c.g.add(x, a);
    let h = c.ln(&format!("{name}.ln3"), x, d);
    let m = c.mlp(&format!("{name}.mlp"), h, d, cfg.mlp_ratio);
    c.g.add(x, m)
}

/// Patch embedding, learned positions and the encoder stack. Every view
/// goes through the same weights.
pub fn encode(c: &mut Ctx, cfg: &ModelConfig, images: Var) -> Var {
    let n = c.g.value(images).shape[0];
    let (p, d, t) = (cfg.patch, cfg.dim, cfg.tokens());
    let x = c.conv("enc.patch", images, 3, d, p, p, 0, false);
    let x = c.g.reshape(x, &[n, t, d]);
    let pos = c.p("enc.pos", &[t, d], Init::Uniform(0.02));
    let mut x = c.g.add_broadcast(x, pos);
    for i in 0..cfg.encoder_depth {
        x = encoder_block(c, &format!("enc.{i}"), x, cfg);
    }
    c.ln("enc.ln", x, d)
}

/// Partner of every view under consecutive pairing `(0,1), (2,3), …`.
pub fn partners(n: usize) -> Result<Vec<usize>> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::OddViewCount(n));
    }
    Ok((0..n).map(|i| i ^ 1).collect())
}

/// Runs the weight-shared twin decoders and returns every layer's output.
pub fn decode(c: &mut Ctx, cfg: &ModelConfig, tokens: Var) -> Result<Vec<Var>> {
    let n = c.g.value(tokens).shape[0];
    let idx = partners(n)?;
    let mut layers = Vec::with_capacity(cfg.decoder_depth);
    let mut x = tokens;
    for i in 0..cfg.decoder_depth {
        let partner = c.g.gather_batch(x, &idx);
        x = decoder_block(c, &format!("dec.{i}"), x, partner, cfg);
        layers.push(x);
    }
    Ok(layers)
}

/// Joint self-attention over the tokens of all views, one block per tap.
/// The output projection starts at zero, so a fresh block is the identity.
pub fn global_fusion(c: &mut Ctx, cfg: &ModelConfig, taps: &[Var]) -> Vec<Var> {
    taps.iter()
        .enumerate()
        .map(|(i, &x)| {
            let shape = c.g.value(x).shape.clone();
            let (n, t, d) = (shape[0], shape[1], shape[2]);
            let flat = c.g.reshape(x, &[1, n * t, d]);
            let h = c.ln(&format!("fuse.{i}.ln"), flat, d);
            let a = c.mha(&format!("fuse.{i}.sa"), h, h, d, cfg.heads, true);
            let y = c.g.add(flat, a);
            c.g.reshape(y, &[n, t, d])
        })
        .collect()
}

fn rcu(c: &mut Ctx, name: &str, x: Var, f: usize) -> Var {
    let h = c.g.gelu(x);
    let h = c.conv3(&format!("{name}.c1"), h, f, f);
    let h = c.g.gelu(h);
    let h = c.conv3(&format!("{name}.c2"), h, f, f);
    c.g.add(x, h)
}

fn upsample2(c: &mut Ctx, x: Var) -> Var {
    let s = c.g.value(x).shape.clone();
    c.g.resize_bilinear(x, 2 * s[1], 2 * s[2])
}

/// Dense prediction head over four token maps. Returns the map at half the
/// input resolution and its bilinear upsampling to full resolution.
pub fn dpt_head(c: &mut Ctx, cfg: &ModelConfig, name: &str, taps: &[Var], out: usize) -> (Var, Var) {
    let (g, d, f) = (cfg.grid(), cfg.dim, cfg.head_width);
    let n = c.g.value(taps[0]).shape[0];
    let maps: Vec<Var> = taps
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let x = c.g.reshape(t, &[n, g, g, d]);
            let x = c.conv(&format!("{name}.proj{i}"), x, d, f, 1, 1, 0, false);
            match i {
                0 => {
                    let x = upsample2(c, x);
                    c.conv3(&format!("{name}.rs0"), x, f, f)
                }
                1 => x,
                2 => c.conv(&format!("{name}.rs2"), x, f, f, 3, 2, 1, false),
                _ => c.conv(&format!("{name}.rs3"), x, f, f, 4, 4, 0, false),
            }
        })
        .collect();
    let mut x = rcu(c, &format!("{name}.fuse3.rcu2"), maps[3], f);
    x = upsample2(c, x);
    x = c.conv(&format!("{name}.fuse3.out"), x, f, f, 1, 1, 0, false);
    for i in (0..3).rev() {
        let skip = rcu(c, &format!("{name}.fuse{i}.rcu1"), maps[i], f);
        x = c.g.add(x, skip);
        x = rcu(c, &format!("{name}.fuse{i}.rcu2"), x, f);
        x = upsample2(c, x);
        x = c.conv(&format!("{name}.fuse{i}.out"), x, f, f, 1, 1, 0, false);
    }
    let h = f / 2;
    x = c.conv3(&format!("{name}.out1"), x, f, h);
    x = c.g.gelu(x);
    x = c.conv3(&format!("{name}.out2"), x, h, h);
    x = c.g.gelu(x);
    let native = c.conv(&format!("{name}.out3"), x, h, out, 1, 1, 0, false);
    let full = c.g.resize_bilinear(native, cfg.image_size, cfg.image_size);
    (native, full)
}

/// Bias of the appearance head's last layer: unit quaternion `w` and a
/// small initial scale.
fn gaussian_head_bias(c: &mut Ctx, name: &str) {
    let mut b = vec![0.0; CHANNELS - 3];
    b[0..3].fill(-1.0);
    b[3] = 1.0;
    c.p(&format!("{name}.out3.b"), &[CHANNELS - 3], Init::Values(b));
}

fn res_block(c: &mut Ctx, name: &str, x: Var, ch: usize) -> Var {
    rcu(c, name, x, ch)
}

/// Self-attention over the pixels of all views together.
fn view_attention(c: &mut Ctx, name: &str, x: Var, ch: usize, heads: usize) -> Var {
    let shape = c.g.value(x).shape.clone();
    let flat = c.g.reshape(x, &[1, shape[0] * shape[1] * shape[2], ch]);
    let h = c.ln(&format!("{name}.ln"), flat, ch);
    let a = c.mha(&format!("{name}.sa"), h, h, ch, heads, false);
    let y = c.g.add(flat, a);
    c.g.reshape(y, &shape)
}

/// Residual U-Net over `[GS-map, matching features, RGB]` per view. The
/// last layer starts at zero so the network initially predicts no change.
pub fn refine_delta(c: &mut Ctx, cfg: &ModelConfig, input: Var) -> Var {
    let cin = c.g.value(input).shape[3];
    let w = cfg.refine_width;
    let heads = cfg.refine_heads;
    let e0 = c.conv3("refine.in", input, cin, w);
    let e0 = res_block(c, "refine.e0", e0, w);
    let e1 = c.conv("refine.down1", e0, w, 2 * w, 3, 2, 1, false);
    let e1 = res_block(c, "refine.e1", e1, 2 * w);
    let e2 = c.conv("refine.down2", e1, 2 * w, 2 * w, 3, 2, 1, false);
    let e2 = res_block(c, "refine.e2", e2, 2 * w);
    let e2 = view_attention(c, "refine.attn2", e2, 2 * w, heads);
    let e3 = c.conv("refine.down3", e2, 2 * w, 4 * w, 3, 2, 1, false);
    let e3 = res_block(c, "refine.e3", e3, 4 * w);
    let e3 = view_attention(c, "refine.attn3", e3, 4 * w, heads);
    let up = upsample2(c, e3);
    let d2 = c.g.concat_last(&[up, e2]);
    let d2 = c.conv3("refine.up2", d2, 6 * w, 2 * w);
    let d2 = res_block(c, "refine.d2", d2, 2 * w);
    let up = upsample2(c, d2);
    let d1 = c.g.concat_last(&[up, e1]);
    let d1 = c.conv3("refine.up1", d1, 4 * w, 2 * w);
    let d1 = res_block(c, "refine.d1", d1, 2 * w);
    let up = upsample2(c, d1);
    let d0 = c.g.concat_last(&[up, e0]);
    let d0 = c.conv3("refine.up0", d0, 3 * w, w);
    let d0 = res_block(c, "refine.d0", d0, w);
    c.conv("refine.out", d0, w, CHANNELS, 1, 1, 0, true)
}

/// Which outputs a forward pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    /// Point and matching heads only.
    Geometry,
    /// Everything through the refined GS-map.
    Full,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    /// Every decoder layer's tokens, `[n, tokens, dim]`.
    pub decoder: Vec<Var>,
    /// Fused tokens of the tapped layers.
    pub fused: Vec<Var>,
    /// Raw point-head output at half resolution.
    pub point_native: Var,
    /// World positions clamped to the unit cube, `[n, H, W, 3]`.
    pub points: Var,
    pub matches: Var,
    /// Raw 14-channel map before refinement.
    pub raw: Option<Var>,
    /// Activated map before refinement.
    pub coarse: Option<Var>,
    /// Activated map after refinement.
    pub gsmap: Option<Var>,
}

/// Full network. `images` is `[n, H, W, 3]`; no camera enters anywhere.
pub fn forward(c: &mut Ctx, cfg: &ModelConfig, images: Var, heads: Heads) -> Result<Outputs> {
    let s = c.g.value(images).shape.clone();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != 3 {
        return Err(Error::Shape(format!(
            "expected [n, {0}, {0}, 3] images, got {s:?}",
            cfg.image_size
        )));
    }
    let tokens = encode(c, cfg, images);
    let decoder = decode(c, cfg, tokens)?;
    let taps: Vec<Var> = cfg.taps.iter().map(|&t| decoder[t - 1]).collect();
    let fused = global_fusion(c, cfg, &taps);
    let (point_native, point_raw) = dpt_head(c, cfg, "head.point", &fused, 3);
    let points = c.g.clamp(point_raw, -1.0, 1.0);
    let (_, matches) = dpt_head(c, cfg, "head.match", &taps, cfg.match_dim);
    let mut out = Outputs {
        decoder,
        fused: fused.clone(),
        point_native,
        points,
        matches,
        raw: None,
        coarse: None,
        gsmap: None,
    };
    if heads == Heads::Full {
        gaussian_head_bias(c, "head.gauss");
        let (_, appearance) = dpt_head(c, cfg, "head.gauss", &fused, CHANNELS - 3);
        let raw = c.g.concat_last(&[point_raw, appearance]);
        let coarse = c.g.gs_activate(raw)?;
        let input = c.g.concat_last(&[coarse, matches, images]);
        let delta = refine_delta(c, cfg, input);
        let refined_raw = c.g.add(raw, delta);
        out.raw = Some(raw);
        out.coarse = Some(coarse);
        out.gsmap = Some(c.g.gs_activate(refined_raw)?);
    }
    Ok(out)
}

/// Parameter names owned by the second training stage.
pub fn is_stage2_param(name: &str) -> bool {
    name.starts_with("head.gauss.") || name.starts_with("refine.")
}

/// Network configuration and weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        {
            let mut g = Graph::inference();
            let images = g.constant(Tensor::zeros(&[2, config.image_size, config.image_size, 3]));
            let toy = ModelConfig { views: 2, ..config.clone() };
            let mut c = Ctx::growing(&mut g, &mut params, seed);
            forward(&mut c, &toy, images, Heads::Full)?;
        }
        Ok(Self { config, params })
    }

    /// Builds a model from stored weights, checking that exactly the
    /// expected parameters with the expected shapes are present.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        let want: BTreeSet<&str> = reference.params.names().collect();
        let have: BTreeSet<&str> = params.names().collect();
        if want != have {
            let missing: Vec<_> = want.difference(&have).take(3).collect();
            let extra: Vec<_> = have.difference(&want).take(3).collect();
            return Err(Error::Config(format!(
                "weights do not match the model: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = &params.get(name).expect("checked above").shape;
            if got != &t.shape {
                return Err(Error::Config(format!("parameter {name} has shape {got:?}, expected {:?}", t.shape)));
            }
        }
        Ok(Self { config, params })
    }

    /// Stacks RGB images into the `[n, H, W, 3]` network input.
    pub fn input_tensor(&self, images: &[Image]) -> Result<Tensor> {
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for img in images {
            if img.width != s || img.height != s || img.channels != 3 {
                return Err(Error::Shape(format!(
                    "expected {s}x{s} RGB input, got {}x{}x{}",
                    img.width, img.height, img.channels
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(&[images.len(), s, s, 3], data))
    }

    /// Pose-free inference: RGB views in, one GS-map per view out.
    pub fn infer(&self, images: &[Image]) -> Result<GsMap> {
        let input = self.input_tensor(images)?;
        let mut g = Graph::inference();
        let x = g.constant(input);
        let mut c = Ctx::new(&mut g, &self.params);
        let out = forward(&mut c, &self.config, x, Heads::Full)?;
        let t = g.value(out.gsmap.expect("full forward")).clone();
        let s = self.config.image_size;
        GsMap::from_parts(images.len(), s, s, t.data, vec![true; images.len() * s * s])
    }
}
