//! Reference shader producing ground-truth frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::head_model::{AvatarParams, HeadModel, OffsetSpace};
use crate::numerics::Tensor;
use crate::rasterizer::splat;
use crate::{Error, Result};

pub const AMBIENT: f64 = 0.3;
pub const DIFFUSE: f64 = 0.7;
/// Light along the camera axis, towards the viewer.
pub const DEFAULT_LIGHT: [f64; 3] = [0.0, 0.0, 1.0];

/// Lambertian shading factor for a unit normal.
pub fn shade(n: [f64; 3], light: [f64; 3]) -> f64 {
    let d = n[0] * light[0] + n[1] * light[1] + n[2] * light[2];
    AMBIENT + DIFFUSE * d.max(0.0)
}

fn unit(v: [f64; 3]) -> Result<[f64; 3]> {
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(len > 0.0) || !len.is_finite() {
        return Err(Error::shape("light direction must be a nonzero finite vector"));
    }
    Ok(v.map(|c| c / len))
}

/// Shaded frame of `params`: `image` `[3, H, W]` in `[-1, 1]` with background 0,
/// `mask` `[1, H, W]` equal to the splat occupancy.
pub fn oracle_render(
    model: &HeadModel,
    params: &AvatarParams,
    albedo: &Tensor,
    width: usize,
    height: usize,
    light: [f64; 3],
) -> Result<(Tensor, Tensor)> {
    let n = model.n_vertices();
    if albedo.shape() != [n, 3] {
        return Err(Error::shape(format!("albedo must be [{n}, 3], got {:?}", albedo.shape())));
    }
    let light = unit(light)?;
    let verts = model.drive(params, OffsetSpace::Canonical)?;
    let normals = model.vertex_normals(&verts)?;
    let colors = Tensor::from_fn([n, 3], |i| {
        let s = shade(normals[i / 3], light);
        (2.0 * albedo.data()[i] as f64 * s - 1.0) as f32
    });
    let s = splat(&verts, &colors, &params.camera, width, height, 0.0)?;
    let image = Tensor::new([3, height, width], s.features)?;
    let mask = Tensor::new([1, height, width], s.occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?;
    Ok((image, mask))
}

/// Smooth per-vertex colour in `[0, 1]` for one identity: a random base tone
/// with low-frequency variation over the template, darker towards the neck.
pub fn synthetic_albedo(model: &HeadModel, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xa1be_d0);
    let base: [f64; 3] = [r.gen_range(0.55..0.85), r.gen_range(0.35..0.65), r.gen_range(0.25..0.55)];
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let dir = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            (dir, r.gen_range(1.0..3.0), r.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let amp = 0.12;
    let t = model.template.data();
    Tensor::from_fn([model.n_vertices(), 3], |i| {
        let (v, c) = (i / 3, i % 3);
        let p = [t[v * 3] as f64, t[v * 3 + 1] as f64, t[v * 3 + 2] as f64];
        let (dir, freq, phase) = waves[c];
        let wave = (freq * (dir[0] * p[0] + dir[1] * p[1] + dir[2] * p[2]) + phase).sin();
        let neck = 0.15 * (-(p[1] + 0.2)).max(0.0);
        (base[c] + amp * wave - neck).clamp(0.0, 1.0) as f32
    })
}
