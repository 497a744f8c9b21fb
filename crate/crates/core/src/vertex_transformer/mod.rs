//! Per-vertex descriptors from a source image.
//!
//! Coarse vertices become query tokens (learnable embedding plus sine encodings
//! of their projected position and depth). They attend jointly with CNN image
//! tokens through a pre-norm encoder. The vertex slice of the output is
//! projected to descriptors and upsampled to the full mesh.

use std::sync::Arc;

use rand::Rng;

use crate::camera::{project, CameraParams};
use crate::head_model::HeadModel;
use crate::numerics::{Activation, Real, Tape, Tensor, Var};
use crate::weights::{scaled_normal, Bound, Weights};
use crate::{Error, Result};

/// Total stride of the image encoder.
pub const ENCODER_STRIDE: usize = 16;
const ENCODER_CONVS: usize = 4;
const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    /// Token width `C'`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Descriptor width `C`.
    pub descriptor_dim: usize,
    /// Multiplier applied to NDC `u`, `v` before encoding.
    pub uv_scale: f64,
    /// Multiplier applied to depth before encoding.
    pub depth_scale: f64,
}

impl TransformerConfig {
    pub fn paper() -> Self {
        TransformerConfig { width: 128, layers: 6, heads: 4, descriptor_dim: 32, uv_scale: 64.0, depth_scale: 64.0 }
    }

    pub fn toy() -> Self {
        TransformerConfig { width: 32, layers: 2, heads: 4, descriptor_dim: 16, uv_scale: 64.0, depth_scale: 64.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.width % 4 != 0 {
            return Err(Error::Config(format!("width {} must be divisible by 4 for 2-d encodings", self.width)));
        }
        if self.descriptor_dim == 0 || self.layers == 0 {
            return Err(Error::Config("layers and descriptor_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn cnn_channels(&self) -> [usize; ENCODER_CONVS] {
        let w = self.width;
        [(w / 4).max(1), (w / 2).max(1), w, w]
    }
}

/// Sine encoding: channel `2i` is `sin(p/10000^(2i/d))`, `2i+1` the cosine.
pub fn sine_encoding_1d<R: Real>(positions: &[f64], dim: usize) -> Result<Tensor<R>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("sine encoding dim must be even and positive, got {dim}")));
    }
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim / 2 {
            let a = p / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(R::of(a.sin()));
            data.push(R::of(a.cos()));
        }
    }
    Tensor::new([positions.len(), dim], data)
}

/// First `d/2` channels encode `u`, the rest encode `v`.
pub fn sine_encoding_2d<R: Real>(u: &[f64], v: &[f64], dim: usize) -> Result<Tensor<R>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("2-d sine encoding dim must be a positive multiple of 4, got {dim}")));
    }
    if u.len() != v.len() {
        return Err(Error::shape(format!("{} u positions but {} v positions", u.len(), v.len())));
    }
    let eu = sine_encoding_1d::<R>(u, dim / 2)?;
    let ev = sine_encoding_1d::<R>(v, dim / 2)?;
    let data = (0..u.len()).flat_map(|i| eu.row(i).iter().chain(ev.row(i)).copied().collect::<Vec<_>>()).collect();
    Tensor::new([u.len(), dim], data)
}

/// Random initial weights for `n_coarse` tokens and `stages` upsample mixers.
pub fn init_weights(cfg: &TransformerConfig, n_coarse: usize, stages: usize, rng: &mut impl Rng) -> Result<Weights> {
    cfg.validate()?;
    let mut w = Weights::new();
    let mut cin = 3;
    for (i, &c) in cfg.cnn_channels().iter().enumerate() {
        w.insert(format!("cnn.conv{i}.w"), scaled_normal([c, cin, 4, 4], cin * 16, 2f64.sqrt(), rng));
        w.insert(format!("cnn.conv{i}.b"), Tensor::zeros([c]));
        cin = c;
    }
    w.insert("vertex_tokens", Tensor::randn([n_coarse, cfg.width], 0.5, rng));
    let d = cfg.width;
    for l in 0..cfg.layers {
        let p = format!("enc.layer{l}");
        for proj in ["q", "k", "v", "o"] {
            w.insert(format!("{p}.{proj}.w"), scaled_normal([d, d], d, 1.0, rng));
            w.insert(format!("{p}.{proj}.b"), Tensor::zeros([d]));
        }
        w.insert(format!("{p}.mlp1.w"), scaled_normal([d, MLP_RATIO * d], d, 2f64.sqrt(), rng));
        w.insert(format!("{p}.mlp1.b"), Tensor::zeros([MLP_RATIO * d]));
        w.insert(format!("{p}.mlp2.w"), scaled_normal([MLP_RATIO * d, d], MLP_RATIO * d, 1.0, rng));
        w.insert(format!("{p}.mlp2.b"), Tensor::zeros([d]));
        for ln in ["ln1", "ln2"] {
            w.insert(format!("{p}.{ln}.w"), Tensor::full([d], 1.0));
            w.insert(format!("{p}.{ln}.b"), Tensor::zeros([d]));
        }
    }
    w.insert("head.w", scaled_normal([d, cfg.descriptor_dim], d, 1.0, rng));
    w.insert("head.b", Tensor::zeros([cfg.descriptor_dim]));
    for s in 0..stages {
        w.insert(format!("mix{s}.w"), Tensor::eye(cfg.descriptor_dim));
        w.insert(format!("mix{s}.b"), Tensor::zeros([cfg.descriptor_dim]));
    }
    Ok(w)
}

/// Token grid size for an `h × w` image.
pub fn token_grid(h: usize, w: usize) -> Result<(usize, usize)> {
    if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
        return Err(Error::shape(format!("image {h}x{w} is not divisible by {ENCODER_STRIDE}")));
    }
    Ok((h / ENCODER_STRIDE, w / ENCODER_STRIDE))
}

/// Strided CNN over a `[3, H, W]` image, flattened row-major to `[hw, C']` tokens.
pub fn encode_image<R: Real>(t: &mut Tape<R>, b: &Bound, image: Var) -> Result<Var> {
    let s = t.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("encoder expects a [3, H, W] image, got {s:?}")));
    }
    let (gh, gw) = token_grid(s[1], s[2])?;
    let mut x = image;
    for i in 0..ENCODER_CONVS {
        x = t.conv2d(x, b.get(&format!("cnn.conv{i}.w"))?, Some(b.get(&format!("cnn.conv{i}.b"))?), 2, 1)?;
        if i + 1 < ENCODER_CONVS {
            x = t.activation(x, Activation::Gelu)?;
        }
    }
    let c = t.shape(x)[0];
    let flat = t.reshape(x, &[c, gh * gw])?;
    t.transpose(flat)
}

/// Encoding added to vertex tokens: 2-d encoding of projected `(u, v)` plus
/// 1-d encoding of depth.
pub fn vertex_encoding<R: Real>(cfg: &TransformerConfig, vertices: &Tensor, camera: &CameraParams) -> Result<Tensor<R>> {
    if vertices.rank() != 2 || vertices.dim(1) != 3 {
        return Err(Error::shape(format!("vertices must be [N, 3], got {:?}", vertices.shape())));
    }
    let proj: Vec<_> = vertices.data().chunks_exact(3).map(|k| project([k[0], k[1], k[2]], camera)).collect();
    let u: Vec<f64> = proj.iter().map(|p| p.u as f64 * cfg.uv_scale).collect();
    let v: Vec<f64> = proj.iter().map(|p| p.v as f64 * cfg.uv_scale).collect();
    let d: Vec<f64> = proj.iter().map(|p| p.d as f64 * cfg.depth_scale).collect();
    let e = sine_encoding_2d::<R>(&u, &v, cfg.width)?;
    let ed = sine_encoding_1d::<R>(&d, cfg.width)?;
    e.zip_map(&ed, |a, b| a + b)
}

/// Encoding of the image-token grid at the NDC centres of its cells.
pub fn grid_encoding<R: Real>(cfg: &TransformerConfig, gh: usize, gw: usize) -> Result<Tensor<R>> {
    let mut u = Vec::with_capacity(gh * gw);
    let mut v = Vec::with_capacity(gh * gw);
    for y in 0..gh {
        for x in 0..gw {
            u.push(((x as f64 + 0.5) / gw as f64 * 2.0 - 1.0) * cfg.uv_scale);
            v.push(((y as f64 + 0.5) / gh as f64 * 2.0 - 1.0) * cfg.uv_scale);
        }
    }
    sine_encoding_2d(&u, &v, cfg.width)
}

/// Concatenated vertex and image tokens.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub vertex_count: usize,
    pub image_count: usize,
}

/// `[X_v + E_uv + E_dep ; F + E]`. With `encodings` false both additive terms
/// are dropped.
pub fn build_tokens<R: Real>(
    t: &mut Tape<R>,
    b: &Bound,
    cfg: &TransformerConfig,
    coarse_vertices: &Tensor,
    camera: &CameraParams,
    image_tokens: Var,
    grid: (usize, usize),
    encodings: bool,
) -> Result<TokenSequence> {
    let xv = b.get("vertex_tokens")?;
    let n = t.shape(xv)[0];
    if coarse_vertices.shape() != [n, 3] {
        return Err(Error::shape(format!(
            "{n} vertex tokens but coarse vertices are {:?}",
            coarse_vertices.shape()
        )));
    }
    let hw = grid.0 * grid.1;
    if t.shape(image_tokens) != [hw, cfg.width] {
        return Err(Error::shape(format!(
            "image tokens {:?} do not match grid {grid:?} at width {}",
            t.shape(image_tokens),
            cfg.width
        )));
    }
    let (vt, it) = if encodings {
        let ev = t.constant(vertex_encoding(cfg, coarse_vertices, camera)?);
        let eg = t.constant(grid_encoding(cfg, grid.0, grid.1)?);
        (t.add(xv, ev)?, t.add(image_tokens, eg)?)
    } else {
        (xv, image_tokens)
    };
    let tokens = t.concat(&[vt, it], 0)?;
    Ok(TokenSequence { tokens, vertex_count: n, image_count: hw })
}

/// Multi-head self-attention `softmax(QKᵀ/√D)V` over all rows of `x`.
pub fn attention<R: Real>(t: &mut Tape<R>, b: &Bound, prefix: &str, heads: usize, x: Var) -> Result<Var> {
    let width = t.shape(x)[1];
    if width % heads != 0 {
        return Err(Error::shape(format!("width {width} not divisible by {heads} heads")));
    }
    let d = width / heads;
    let lin = |t: &mut Tape<R>, name: &str, x: Var| -> Result<Var> {
        t.linear(x, b.get(&format!("{prefix}.{name}.w"))?, b.get(&format!("{prefix}.{name}.b"))?)
    };
    let q = lin(t, "q", x)?;
    let k = lin(t, "k", x)?;
    let v = lin(t, "v", x)?;
    let scale = R::of(1.0 / (d as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice(q, 1, h * d, d)?;
        let kh = t.slice(k, 1, h * d, d)?;
        let vh = t.slice(v, 1, h * d, d)?;
        let kt = t.transpose(kh)?;
        let scores = t.matmul(qh, kt)?;
        let scores = t.scale(scores, scale)?;
        let a = t.softmax(scores)?;
        outs.push(t.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { t.concat(&outs, 1)? };
    lin(t, "o", cat)
}

/// Pre-norm encoder block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
fn encoder_block<R: Real>(t: &mut Tape<R>, b: &Bound, layer: usize, heads: usize, x: Var) -> Result<Var> {
    let p = format!("enc.layer{layer}");
    let g = |name: &str| b.get(&format!("{p}.{name}"));
    let h = t.layer_norm(x, g("ln1.w")?, g("ln1.b")?, LN_EPS)?;
    let a = attention(t, b, &p, heads, h)?;
    let x = t.add(x, a)?;
    let h = t.layer_norm(x, g("ln2.w")?, g("ln2.b")?, LN_EPS)?;
    let h = t.linear(h, g("mlp1.w")?, g("mlp1.b")?)?;
    let h = t.activation(h, Activation::Gelu)?;
    let h = t.linear(h, g("mlp2.w")?, g("mlp2.b")?)?;
    t.add(x, h)
}

/// Encoder stack over the full sequence; returns the vertex-token states.
pub fn transformer_forward<R: Real>(t: &mut Tape<R>, b: &Bound, cfg: &TransformerConfig, seq: &TokenSequence) -> Result<Var> {
    let s = t.shape(seq.tokens);
    if s != [seq.vertex_count + seq.image_count, cfg.width] {
        return Err(Error::shape(format!("token sequence {s:?} does not match width {}", cfg.width)));
    }
    let mut x = seq.tokens;
    for l in 0..cfg.layers {
        x = encoder_block(t, b, l, cfg.heads, x)?;
    }
    t.slice(x, 0, 0, seq.vertex_count)
}

/// Affine map from token width to descriptor width.
pub fn project_descriptors<R: Real>(t: &mut Tape<R>, b: &Bound, states: Var) -> Result<Var> {
    t.linear(states, b.get("head.w")?, b.get("head.b")?)
}

/// Coarse descriptors through each upsample matrix and its feature mixer.
pub fn upsample_descriptors<R: Real>(t: &mut Tape<R>, b: &Bound, model: &HeadModel, coarse: Var) -> Result<Var> {
    let mut x = coarse;
    for (i, m) in model.upsample_chain.iter().enumerate() {
        x = t.sparse_matmul(Arc::clone(m), x)?;
        x = t.linear(x, b.get(&format!("mix{i}.w"))?, b.get(&format!("mix{i}.b"))?)?;
    }
    Ok(x)
}

/// Everything from a source frame to full-resolution descriptors `[N, C]`.
pub struct DescriptorInputs<'a> {
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: &'a Tensor,
    /// Source mesh `[N, 3]`.
    pub vertices: &'a Tensor,
    pub camera: &'a CameraParams,
}

pub fn descriptors<R: Real>(
    t: &mut Tape<R>,
    b: &Bound,
    cfg: &TransformerConfig,
    model: &HeadModel,
    src: &DescriptorInputs,
) -> Result<Var> {
    let img = t.constant(src.image.cast());
    let grid = token_grid(src.image.dim(1), src.image.dim(2))?;
    let tokens = encode_image(t, b, img)?;
    let coarse = model.coarse_vertices(src.vertices)?;
    let seq = build_tokens(t, b, cfg, &coarse, src.camera, tokens, grid, true)?;
    let states = transformer_forward(t, b, cfg, &seq)?;
    let desc = project_descriptors(t, b, states)?;
    upsample_descriptors(t, b, model, desc)
}

/// Bilinear sample of `features` `[C, H, W]` at each vertex's projection, with
/// pixel centres on the lattice and border clamping. Returns `[N, C]`.
pub fn pixel_aligned_features<R: Real>(features: &Tensor<R>, vertices: &Tensor, camera: &CameraParams) -> Result<Tensor<R>> {
    if features.rank() != 3 {
        return Err(Error::shape(format!("feature map must be [C, H, W], got {:?}", features.shape())));
    }
    let (c, h, w) = (features.dim(0), features.dim(1), features.dim(2));
    let f = features.data();
    let mut out = Vec::with_capacity(vertices.dim(0) * c);
    for k in vertices.data().chunks_exact(3) {
        let p = project([k[0], k[1], k[2]], camera);
        let x = ((p.u as f64 + 1.0) * 0.5 * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let y = ((p.v as f64 + 1.0) * 0.5 * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (R::of(x - x0 as f64), R::of(y - y0 as f64));
        let one = R::one();
        for ch in 0..c {
            let at = |yy: usize, xx: usize| f[(ch * h + yy) * w + xx];
            let top = at(y0, x0) * (one - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (one - fx) + at(y1, x1) * fx;
            out.push(top * (one - fy) + bot * fy);
        }
    }
    Tensor::new([vertices.dim(0), c], out)
}

/// Feature map for the pixel-aligned baseline: encoder tokens through the
/// descriptor head, laid out as `[C, h, w]`.
pub fn baseline_feature_map<R: Real>(t: &mut Tape<R>, b: &Bound, image: &Tensor) -> Result<Tensor<R>> {
    let (gh, gw) = token_grid(image.dim(1), image.dim(2))?;
    let img = t.constant(image.cast());
    let tokens = encode_image(t, b, img)?;
    let proj = project_descriptors(t, b, tokens)?;
    let planar = t.transpose(proj)?;
    let c = t.shape(planar)[0];
    t.value(planar).clone().reshape([c, gh, gw])
}

#[cfg(test)]
mod tests;
