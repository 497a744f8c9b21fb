//! Procedural head model standing in for licensed scan-derived assets.
//!
//! The mesh is a stack of latitude rings around the `y` axis, closed by a pole
//! at the crown and open (or capped) at the neck. The face looks down `+z`.
//! Every back vertex is the `z`-mirror of a front vertex, so the template has
//! pairs with bitwise-equal `(x, y)`: under a frontal view they share a pixel.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::HeadModel;
use crate::numerics::{SparseMatrix, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_vertices: usize,
    pub n_coarse: usize,
    pub shape_dims: usize,
    pub expr_dims: usize,
    pub joints: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { seed: 0, n_vertices: 5023, n_coarse: 314, shape_dims: 20, expr_dims: 10, joints: 4 }
    }
}

impl SyntheticConfig {
    pub fn with_seed(seed: u64) -> Self {
        SyntheticConfig { seed, ..Default::default() }
    }
}

const HEAD_CENTER_Y: f64 = 0.15;
const HEAD_RY: f64 = 0.72;
const HEAD_RX: f64 = 0.68;
const HEAD_RZ: f64 = 0.78;
const NECK_RADIUS: f64 = 0.55;
const NECK_DROP: f64 = 0.35;
const JOINT_TARGETS: [[f64; 3]; 4] = [[0.0, -0.45, 0.0], [0.0, -0.1, 0.0], [0.25, 0.22, 0.9], [-0.25, 0.22, 0.9]];
const REGRESSOR_SUPPORT: usize = 8;
const WEIGHT_CUTOFF: f64 = 1e-3;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Profile at latitude `lat ∈ (0, π]`: (y, radial scale).
fn profile(lat: f64) -> (f64, f64) {
    let neck = ((lat - 0.75 * PI) / (0.25 * PI)).max(0.0);
    let y = HEAD_CENTER_Y + HEAD_RY * lat.cos() - NECK_DROP * neck;
    let r = if lat > PI / 2.0 { lat.sin().max(NECK_RADIUS) } else { lat.sin() };
    (y, r)
}

/// Face relief as a `z` displacement; depends on `(x, y)` only and vanishes behind.
fn relief(x: f64, y: f64, z: f64) -> f64 {
    let front = (z / 0.2).clamp(0.0, 1.0);
    let g = |dx: f64, dy: f64, sx: f64, sy: f64| (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
    let nose = 0.18 * g(x, y, 0.06, 0.1);
    let sockets = -0.04 * (g(x - 0.25, y - 0.22, 0.06, 0.06) + g(x + 0.25, y - 0.22, 0.06, 0.06));
    let chin = 0.05 * g(x, y + 0.45, 0.15, 0.08);
    front * (nose + sockets + chin)
}

struct Ring {
    start: usize,
    count: usize,
    offset: f64,
}

fn ring_counts(total: usize, radii: &[f64]) -> Vec<usize> {
    let sum: f64 = radii.iter().sum();
    let mut counts: Vec<usize> = radii
        .iter()
        .map(|r| {
            let c = (total as f64 * r / sum / 2.0).round() as usize * 2;
            c.max(4)
        })
        .collect();
    let mut have: usize = counts.iter().sum();
    // Rebalance two vertices at a time on the widest rings.
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| radii[b].total_cmp(&radii[a]).then(a.cmp(&b)));
    let mut k = 0;
    while have != total {
        let i = order[k % order.len()];
        if have < total {
            counts[i] += 2;
            have += 2;
        } else if counts[i] > 4 {
            counts[i] -= 2;
            have -= 2;
        }
        k += 1;
    }
    counts
}

fn orient(tri: [u32; 3], p: &[[f64; 3]], outward: [f64; 3]) -> [u32; 3] {
    let [a, b, c] = tri.map(|i| p[i as usize]);
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
    if n[0] * outward[0] + n[1] * outward[1] + n[2] * outward[2] < 0.0 {
        [tri[0], tri[2], tri[1]]
    } else {
        tri
    }
}

fn centroid(tri: [u32; 3], p: &[[f64; 3]]) -> [f64; 3] {
    let [a, b, c] = tri.map(|i| p[i as usize]);
    [0, 1, 2].map(|k| (a[k] + b[k] + c[k]) / 3.0)
}

fn side_outward(c: [f64; 3]) -> [f64; 3] {
    if c[1] < HEAD_CENTER_Y {
        [c[0], 0.0, c[2]]
    } else {
        [c[0], c[1] - HEAD_CENTER_Y, c[2]]
    }
}

/// Template positions and outward-facing triangles.
pub(crate) fn build_mesh(n: usize) -> Result<(Vec<[f64; 3]>, Vec<[u32; 3]>)> {
    if n < 10 {
        return Err(Error::Config(format!("synthetic mesh needs at least 10 vertices, got {n}")));
    }
    let bottom_pole = (n - 1) % 2 == 1;
    let ring_total = n - 1 - usize::from(bottom_pole);
    let n_rings = ((PI * n as f64 / 4.0).sqrt().round() as usize).clamp(2, ring_total / 4);
    let denom = n_rings as f64 + if bottom_pole { 1.0 } else { 0.5 };
    let lats: Vec<f64> = (0..n_rings).map(|i| PI * (i + 1) as f64 / denom).collect();
    let radii: Vec<f64> = lats.iter().map(|&l| profile(l).1).collect();
    let counts = ring_counts(ring_total, &radii);

    let mut pos = vec![[0.0, HEAD_CENTER_Y + HEAD_RY, 0.0]];
    let mut rings = Vec::with_capacity(n_rings);
    for (i, (&lat, &m)) in lats.iter().zip(&counts).enumerate() {
        let (y, r) = profile(lat);
        let offset = if i % 2 == 0 { 0.0 } else { 0.5 };
        let start = pos.len();
        let angle = |k: usize| 2.0 * PI * (k as f64 + offset) / m as f64;
        for k in 0..m {
            pos.push([HEAD_RX * r * angle(k).sin(), y, HEAD_RZ * r * angle(k).cos()]);
        }
        // φ ↦ π − φ pairs ring slot k with k' = m/2 − k − 2·offset (mod m).
        let shift = (2.0 * offset) as usize;
        for k in 0..m {
            let partner = (m + m / 2 - k - shift) % m;
            if partner == k {
                pos[start + k][2] = 0.0;
            } else if angle(k).cos() < 0.0 {
                let front = pos[start + partner];
                pos[start + k] = [front[0], front[1], -front[2]];
            }
        }
        rings.push(Ring { start, count: m, offset });
    }
    if bottom_pole {
        let (y, _) = profile(PI);
        pos.push([0.0, y, 0.0]);
    }
    for p in pos.iter_mut() {
        p[2] += relief(p[0], p[1], p[2]);
    }

    let mut faces = Vec::new();
    let first = &rings[0];
    for k in 0..first.count {
        let tri = [0, (first.start + k) as u32, (first.start + (k + 1) % first.count) as u32];
        faces.push(orient(tri, &pos, [0.0, 1.0, 0.0]));
    }
    for pair in rings.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (mut i, mut j) = (0usize, 0usize);
        let ang = |ring: &Ring, k: usize| (k as f64 + ring.offset) / ring.count as f64;
        while i < a.count || j < b.count {
            let va = (a.start + i % a.count) as u32;
            let vb = (b.start + j % b.count) as u32;
            let advance_a = j >= b.count || (i < a.count && ang(a, i + 1) <= ang(b, j + 1));
            let tri = if advance_a {
                i += 1;
                [va, vb, (a.start + i % a.count) as u32]
            } else {
                j += 1;
                [va, vb, (b.start + j % b.count) as u32]
            };
            faces.push(orient(tri, &pos, side_outward(centroid(tri, &pos))));
        }
    }
    if bottom_pole {
        let last = rings.last().expect("at least two rings");
        let pole = (pos.len() - 1) as u32;
        for k in 0..last.count {
            let tri = [pole, (last.start + k) as u32, (last.start + (k + 1) % last.count) as u32];
            faces.push(orient(tri, &pos, [0.0, -1.0, 0.0]));
        }
    }
    debug_assert_eq!(pos.len(), n);
    Ok((pos, faces))
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Farthest-point ordering of `count` vertices starting from vertex 0.
pub(crate) fn farthest_points(pos: &[[f64; 3]], count: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    let mut best: Vec<f64> = pos.iter().map(|&p| dist2(p, pos[0])).collect();
    while chosen.len() < count {
        let next = (0..pos.len())
            .max_by(|&a, &b| best[a].total_cmp(&best[b]).then(b.cmp(&a)))
            .expect("non-empty");
        chosen.push(next);
        for (b, &p) in best.iter_mut().zip(pos) {
            *b = b.min(dist2(p, pos[next]));
        }
    }
    chosen
}

/// Clamped barycentric weights of `p` against triangle `t`, inverse distance if degenerate.
fn barycentric(p: [f64; 3], t: [[f64; 3]; 3]) -> [f64; 3] {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let (v0, v1, v2) = (sub(t[1], t[0]), sub(t[2], t[0]), sub(p, t[0]));
    let (d00, d01, d11, d20, d21) = (dot(v0, v0), dot(v0, v1), dot(v1, v1), dot(v2, v0), dot(v2, v1));
    let den = d00 * d11 - d01 * d01;
    let mut w = if den > 1e-12 * d00.max(d11).powi(2).max(f64::MIN_POSITIVE) {
        let b = (d11 * d20 - d01 * d21) / den;
        let c = (d00 * d21 - d01 * d20) / den;
        [1.0 - b - c, b, c]
    } else {
        t.map(|q| 1.0 / (dist2(p, q).sqrt() + 1e-9))
    };
    for x in &mut w {
        *x = x.max(0.0);
    }
    let s: f64 = w.iter().sum();
    if s <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    w.map(|x| x / s)
}

/// Upsample matrix from the points `src` (positions of `from`) onto every point
/// of `to`; points present in `from` copy themselves.
fn upsample_stage(pos: &[[f64; 3]], from: &[usize], to: &[usize]) -> Result<SparseMatrix> {
    let slot: std::collections::HashMap<usize, usize> = from.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut trip = Vec::with_capacity(to.len() * 3);
    for (row, &v) in to.iter().enumerate() {
        if let Some(&i) = slot.get(&v) {
            trip.push((row, i, 1.0f32));
            continue;
        }
        let mut near: Vec<(f64, usize)> = Vec::with_capacity(3);
        for (i, &u) in from.iter().enumerate() {
            let d = dist2(pos[v], pos[u]);
            if near.len() < 3 || d < near[near.len() - 1].0 {
                if near.len() == 3 {
                    near.pop();
                }
                let at = near.partition_point(|&(e, _)| e <= d);
                near.insert(at, (d, i));
            }
        }
        if near.len() < 3 {
            for &(_, i) in &near {
                trip.push((row, i, 1.0 / near.len() as f32));
            }
            continue;
        }
        let tri = [0, 1, 2].map(|k| pos[from[near[k].1]]);
        let w = barycentric(pos[v], tri);
        // Renormalise after rounding so every row sums to one in f32 as well.
        let w32 = w.map(|x| x as f32);
        let s: f64 = w32.iter().map(|&x| x as f64).sum();
        for k in 0..3 {
            if w32[k] > 0.0 {
                trip.push((row, near[k].1, (w32[k] as f64 / s) as f32));
            }
        }
    }
    SparseMatrix::from_triplets(to.len(), from.len(), &trip)
}

fn skin_weights(pos: &[[f64; 3]], joints: &[[f64; 3]]) -> Vec<f32> {
    let nj = joints.len();
    let mut out = Vec::with_capacity(pos.len() * nj);
    for &p in pos {
        let mut w: Vec<f64> = (0..nj)
            .map(|j| match j {
                0 => 1.0,
                1 => {
                    let below_mouth = logistic((-0.05 - p[1]) / 0.04);
                    let front = logistic((p[2] - 0.15) / 0.05);
                    let above_neck = logistic((p[1] + 0.55) / 0.04);
                    8.0 * below_mouth * front * above_neck
                }
                _ => 30.0 * (-dist2(p, joints[j]) / (2.0 * 0.05 * 0.05)).exp(),
            })
            .collect();
        for _ in 0..2 {
            let s: f64 = w.iter().sum();
            for x in &mut w {
                *x /= s;
                if *x < WEIGHT_CUTOFF {
                    *x = 0.0;
                }
            }
        }
        let s: f64 = w.iter().sum();
        out.extend(w.iter().map(|&x| (x / s) as f32));
    }
    out
}

/// Smooth random displacement bases `[N, 3, dims]`.
fn smooth_basis(pos: &[[f64; 3]], dims: usize, amp: f64, mask: impl Fn([f64; 3]) -> f64, rng: &mut ChaCha8Rng) -> Tensor {
    const WAVES: usize = 4;
    let freq = Normal::new(0.0, 1.5).expect("valid");
    let height = Normal::new(0.0, amp).expect("valid");
    let waves: Vec<Vec<([f64; 3], f64, [f64; 3])>> = (0..dims)
        .map(|_| {
            (0..WAVES)
                .map(|_| {
                    let k = [0; 3].map(|_| freq.sample(rng));
                    let phase = rng.gen_range(0.0..2.0 * PI);
                    let a = [0; 3].map(|_| height.sample(rng));
                    (k, phase, a)
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0f32; pos.len() * 3 * dims];
    for (v, &p) in pos.iter().enumerate() {
        let m = mask(p);
        for (b, wave) in waves.iter().enumerate() {
            let mut d = [0.0f64; 3];
            for &(k, phase, a) in wave {
                let c = (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos();
                for i in 0..3 {
                    d[i] += a[i] * c;
                }
            }
            for i in 0..3 {
                data[(v * 3 + i) * dims + b] = (m * d[i]) as f32;
            }
        }
    }
    Tensor::new([pos.len(), 3, dims], data).expect("sized above")
}

/// Deterministic synthetic head model; every [`HeadModel`] invariant holds.
pub fn generate_synthetic_model(cfg: &SyntheticConfig) -> Result<HeadModel> {
    let n = cfg.n_vertices;
    if cfg.n_coarse == 0 || cfg.n_coarse >= n {
        return Err(Error::Config(format!("n_coarse must be in 1..{n}, got {}", cfg.n_coarse)));
    }
    if !(1..=JOINT_TARGETS.len()).contains(&cfg.joints) {
        return Err(Error::Config(format!("joints must be in 1..=4, got {}", cfg.joints)));
    }
    if cfg.shape_dims == 0 || cfg.expr_dims == 0 {
        return Err(Error::Config("shape and expression dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (pos, faces) = build_mesh(n)?;

    let support = REGRESSOR_SUPPORT.min(n);
    let mut regressor = Vec::new();
    let mut joints = Vec::new();
    for (j, target) in JOINT_TARGETS.iter().take(cfg.joints).enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dist2(pos[a], *target).total_cmp(&dist2(pos[b], *target)).then(a.cmp(&b)));
        let mut c = [0.0; 3];
        for &v in &order[..support] {
            regressor.push((j, v, 1.0 / support as f32));
            for k in 0..3 {
                c[k] += pos[v][k] / support as f64;
            }
        }
        joints.push(c);
    }
    let joint_regressor = SparseMatrix::from_triplets(cfg.joints, n, &regressor)?;
    let parents: Vec<i32> = (0..cfg.joints).map(|j| if j == 0 { -1 } else { 0 }).collect();
    let skin = Tensor::new([n, cfg.joints], skin_weights(&pos, &joints))?;

    let shape_basis = smooth_basis(&pos, cfg.shape_dims, 0.02, |_| 1.0, &mut rng);
    let expr_basis = smooth_basis(&pos, cfg.expr_dims, 0.015, |p| logistic((p[2] - 0.1) / 0.08), &mut rng);

    let mid = ((cfg.n_coarse as f64 * n as f64).sqrt().round() as usize).clamp(cfg.n_coarse, n);
    let fps = farthest_points(&pos, mid);
    let coarse = &fps[..cfg.n_coarse];
    let all: Vec<usize> = (0..n).collect();
    let chain = vec![Arc::new(upsample_stage(&pos, coarse, &fps)?), Arc::new(upsample_stage(&pos, &fps, &all)?)];

    let template = Tensor::new([n, 3], pos.iter().flat_map(|p| p.map(|x| x as f32)).collect())?;
    let model = HeadModel {
        template,
        shape_basis,
        expr_basis,
        skin_weights: skin,
        joint_regressor: Arc::new(joint_regressor),
        parents,
        faces,
        coarse_index: coarse.iter().map(|&v| v as u32).collect(),
        upsample_chain: chain,
    };
    model.validate()?;
    Ok(model)
}
