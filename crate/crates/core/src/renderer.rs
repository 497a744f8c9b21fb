//! U-Net mapping splatted feature and depth planes to RGB and a foreground mask.
//!
//! Encoder: a 3×3 stem at full resolution, then `depth_levels` stride-2 4×4
//! convolutions that double the channel count. A 3×3 bottleneck follows. Each
//! decoder level upsamples by 2 (nearest), concatenates the matching encoder
//! activation and applies a 3×3 convolution. A 1×1 head yields 4 channels: RGB
//! through tanh, mask through sigmoid. All convolutions zero-pad.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Activation, Real, Tape, Tensor, Var};
use crate::rasterizer::{SplatImage, SplatPlan};
use crate::weights::{scaled_normal, Bound, Weights};
use crate::{Error, Result};

pub const OUT_CHANNELS: usize = 4;
const PREFIX: &str = "unet.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendererConfig {
    pub depth_levels: usize,
    pub base_channels: usize,
    /// Descriptor channels plus one depth channel.
    pub in_channels: usize,
}

impl RendererConfig {
    pub fn toy(descriptor_dim: usize) -> Self {
        RendererConfig { depth_levels: 3, base_channels: 8, in_channels: descriptor_dim + 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_levels == 0 || self.depth_levels > 8 || self.base_channels == 0 || self.in_channels < 2 {
            return Err(Error::Config(format!(
                "renderer needs 1..=8 levels, base channels > 0 and at least 2 inputs, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial multiple every input side must satisfy.
    pub fn divisor(&self) -> usize {
        1 << self.depth_levels
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let m = self.divisor();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("renderer input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Rendered frame: planar `rgb` `[3, H, W]` in `[-1, 1]`, `mask` `[1, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub rgb: Tensor,
    pub mask: Tensor,
    /// Milliseconds per stage.
    pub timing: BTreeMap<String, f64>,
}

pub fn init_weights(cfg: &RendererConfig, rng: &mut impl Rng) -> Result<Weights> {
    cfg.validate()?;
    let gain = 2f64.sqrt();
    let mut w = Weights::new();
    let mut conv = |w: &mut Weights, name: &str, cout: usize, cin: usize, k: usize, gain: f64| {
        w.insert(format!("{PREFIX}{name}.w"), scaled_normal([cout, cin, k, k], cin * k * k, gain, rng));
        w.insert(format!("{PREFIX}{name}.b"), Tensor::zeros([cout]));
    };
    let l = cfg.depth_levels;
    conv(&mut w, "enc0", cfg.channels(0), cfg.in_channels, 3, gain);
    for i in 1..=l {
        conv(&mut w, &format!("down{i}"), cfg.channels(i), cfg.channels(i - 1), 4, gain);
    }
    conv(&mut w, "mid", cfg.channels(l), cfg.channels(l), 3, gain);
    for i in (1..=l).rev() {
        conv(&mut w, &format!("up{i}"), cfg.channels(i - 1), cfg.channels(i) + cfg.channels(i - 1), 3, gain);
    }
    conv(&mut w, "out", OUT_CHANNELS, cfg.channels(0), 1, 0.1);
    Ok(w)
}

fn conv<R: Real>(t: &mut Tape<R>, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.get(&format!("{PREFIX}{name}.w"))?;
    let bias = b.get(&format!("{PREFIX}{name}.b"))?;
    t.conv2d(x, w, Some(bias), stride, pad)
}

fn conv_gelu<R: Real>(t: &mut Tape<R>, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = conv(t, b, name, x, stride, pad)?;
    t.activation(y, Activation::Gelu)
}

/// Forward pass over `[in_channels, H, W]`; returns `(rgb, mask)` handles.
pub fn forward<R: Real>(t: &mut Tape<R>, b: &Bound, cfg: &RendererConfig, input: Var) -> Result<(Var, Var)> {
    let s = t.shape(input).to_vec();
    if s.len() != 3 || s[0] != cfg.in_channels {
        return Err(Error::shape(format!("renderer expects [{}, H, W], got {s:?}", cfg.in_channels)));
    }
    cfg.check_dims(s[1], s[2])?;
    let mut skips = vec![conv_gelu(t, b, "enc0", input, 1, 1)?];
    for i in 1..=cfg.depth_levels {
        let prev = *skips.last().unwrap();
        skips.push(conv_gelu(t, b, &format!("down{i}"), prev, 2, 1)?);
    }
    let mut x = conv_gelu(t, b, "mid", skips.pop().unwrap(), 1, 1)?;
    for i in (1..=cfg.depth_levels).rev() {
        let up = t.upsample2x(x)?;
        let skip = skips.pop().unwrap();
        let cat = t.concat(&[up, skip], 0)?;
        x = conv_gelu(t, b, &format!("up{i}"), cat, 1, 1)?;
    }
    let out = conv(t, b, "out", x, 1, 0)?;
    let rgb = t.slice(out, 0, 0, 3)?;
    let rgb = t.activation(rgb, Activation::Tanh)?;
    let logit = t.slice(out, 0, 3, 1)?;
    let mask = t.activation(logit, Activation::Sigmoid)?;
    Ok((rgb, mask))
}

/// Renderer input built on the tape from a splat plan: gathered descriptor
/// planes (background `fill`) followed by the depth plane.
pub fn splat_input<R: Real>(t: &mut Tape<R>, plan: &SplatPlan, descriptors: Var, fill: R) -> Result<Var> {
    let index: Arc<[u32]> = plan.index.clone().into();
    let planes = t.gather_rows_planar(descriptors, index, fill)?;
    let c = t.shape(planes)[0];
    let planes = t.reshape(planes, &[c, plan.height, plan.width])?;
    let depth = Tensor::new([1, plan.height, plan.width], plan.depth.iter().map(|&d| R::of(d as f64)).collect())?;
    let depth = t.constant(depth);
    t.concat(&[planes, depth], 0)
}

/// Input tensor `[C + 1, H, W]` from a finished splat.
pub fn input_tensor(splat: &SplatImage) -> Tensor {
    let mut data = splat.features.clone();
    data.extend_from_slice(&splat.depth);
    Tensor::new([splat.channels + 1, splat.height, splat.width], data).expect("splat planes are consistent")
}

/// Inference on a finished splat.
pub fn render(splat: &SplatImage, weights: &Weights, cfg: &RendererConfig) -> Result<FrameResult> {
    if splat.channels + 1 != cfg.in_channels {
        return Err(Error::shape(format!(
            "splat has {} channels, renderer expects {}",
            splat.channels,
            cfg.in_channels - 1
        )));
    }
    cfg.check_dims(splat.height, splat.width)?;
    let start = Instant::now();
    let mut t = Tape::<f32>::new();
    let b = weights.bind(&mut t, false);
    let x = t.constant(input_tensor(splat));
    let (rgb, mask) = forward(&mut t, &b, cfg, x)?;
    let mut timing = BTreeMap::new();
    timing.insert("render_ms".to_string(), start.elapsed().as_secs_f64() * 1e3);
    Ok(FrameResult { rgb: t.value(rgb).clone(), mask: t.value(mask).clone(), timing })
}
