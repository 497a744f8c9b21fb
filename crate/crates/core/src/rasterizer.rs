//! Nearest-vertex point splatting with a z-buffer.
//!
//! Each vertex lands in the single pixel addressed by its projection. When
//! several vertices share a pixel the larger depth wins (closer to the camera);
//! equal depths go to the smaller vertex index, so the result does not depend
//! on processing order.

use crate::camera::{project, to_pixel, CameraParams};
use crate::imaging::Image8;
use crate::numerics::{Tensor, NO_SOURCE};
use crate::{Error, Result};

/// Per-pixel winning vertex and normalised depth for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPlan {
    pub width: usize,
    pub height: usize,
    /// Winning vertex per pixel (row-major), [`NO_SOURCE`] when empty.
    pub index: Vec<u32>,
    /// Depth in `[0, 1]` over occupied pixels, 0 elsewhere.
    pub depth: Vec<f32>,
}

/// Splatted planes. Features are stored channel-planar: `features[(c·H + y)·W + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub features: Vec<f32>,
    pub depth: Vec<f32>,
    pub occupancy: Vec<bool>,
}

impl SplatPlan {
    pub fn occupancy(&self) -> Vec<bool> {
        self.index.iter().map(|&i| i != NO_SOURCE).collect()
    }

    pub fn occupied_count(&self) -> usize {
        self.index.iter().filter(|&&i| i != NO_SOURCE).count()
    }
}

impl SplatImage {
    pub fn feature(&self, x: usize, y: usize, c: usize) -> f32 {
        self.features[(c * self.height + y) * self.width + x]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }
}

fn check_vertices(vertices: &Tensor) -> Result<usize> {
    if vertices.rank() != 2 || vertices.dim(1) != 3 {
        return Err(Error::shape(format!("vertices must be [N, 3], got {:?}", vertices.shape())));
    }
    Ok(vertices.dim(0))
}

/// Z-buffer pass: the winning vertex and its normalised depth at every pixel.
pub fn plan(vertices: &Tensor, camera: &CameraParams, width: usize, height: usize) -> Result<SplatPlan> {
    let n = check_vertices(vertices)?;
    plan_in_order(vertices, camera, width, height, 0..n)
}

/// [`plan`] visiting vertices in the given order; the result is the same for
/// every order that visits each vertex once.
pub fn plan_in_order(
    vertices: &Tensor,
    camera: &CameraParams,
    width: usize,
    height: usize,
    order: impl IntoIterator<Item = usize>,
) -> Result<SplatPlan> {
    check_vertices(vertices)?;
    if width == 0 || height == 0 {
        return Err(Error::shape(format!("splat target {width}x{height} is empty")));
    }
    let mut index = vec![NO_SOURCE; width * height];
    let mut raw = vec![0.0f32; width * height];
    let data = vertices.data();
    for i in order {
        let k = &data[i * 3..i * 3 + 3];
        let p = project([k[0], k[1], k[2]], camera);
        let Some((px, py)) = to_pixel(p.u, p.v, width, height) else { continue };
        let at = py * width + px;
        let cur = index[at];
        let wins = cur == NO_SOURCE || p.d > raw[at] || (p.d == raw[at] && (i as u32) < cur);
        if wins {
            index[at] = i as u32;
            raw[at] = p.d;
        }
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (&i, &d) in index.iter().zip(&raw) {
        if i != NO_SOURCE {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    // A single depth level is passed through unchanged.
    if hi > lo {
        let span = hi - lo;
        for (&i, d) in index.iter().zip(raw.iter_mut()) {
            if i != NO_SOURCE {
                *d = (*d - lo) / span;
            }
        }
    }
    Ok(SplatPlan { width, height, index, depth: raw })
}

/// Splat `descriptors` `[N, C]` at the projections of `vertices` `[N, 3]`.
pub fn splat(
    vertices: &Tensor,
    descriptors: &Tensor,
    camera: &CameraParams,
    width: usize,
    height: usize,
    background: f32,
) -> Result<SplatImage> {
    let n = check_vertices(vertices)?;
    if descriptors.rank() != 2 || descriptors.dim(0) != n {
        return Err(Error::shape(format!("{n} vertices but descriptors are {:?}", descriptors.shape())));
    }
    let plan = plan(vertices, camera, width, height)?;
    Ok(splat_with_plan(&plan, descriptors, background))
}

/// Fill feature planes from an existing plan.
pub fn splat_with_plan(plan: &SplatPlan, descriptors: &Tensor, background: f32) -> SplatImage {
    let c = descriptors.dim(1);
    let hw = plan.width * plan.height;
    let mut features = vec![background; c * hw];
    let src = descriptors.data();
    for (pix, &i) in plan.index.iter().enumerate() {
        if i == NO_SOURCE {
            continue;
        }
        let row = &src[i as usize * c..(i as usize + 1) * c];
        for (ch, &v) in row.iter().enumerate() {
            features[ch * hw + pix] = v;
        }
    }
    SplatImage {
        width: plan.width,
        height: plan.height,
        channels: c,
        features,
        depth: plan.depth.clone(),
        occupancy: plan.occupancy(),
    }
}

/// Feature channels 0–2 (repeated when fewer), each min–max stretched to 8 bits.
pub fn splat_view(s: &SplatImage) -> Image8 {
    let hw = s.width * s.height;
    let mut data = vec![0u8; hw * 3];
    for out_c in 0..3 {
        let c = out_c.min(s.channels.saturating_sub(1));
        let plane = &s.features[c * hw..(c + 1) * hw];
        let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (p, &v) in plane.iter().enumerate() {
            data[p * 3 + out_c] = to_u8((v - lo) / span);
        }
    }
    Image8 { width: s.width, height: s.height, channels: 3, data }
}

/// Depth plane as 8-bit grey.
pub fn depth_view(s: &SplatImage) -> Image8 {
    grey(s.width, s.height, &s.depth)
}

/// [`depth_view`] straight from a plan.
pub fn plan_depth_view(p: &SplatPlan) -> Image8 {
    grey(p.width, p.height, &p.depth)
}

fn grey(width: usize, height: usize, depth: &[f32]) -> Image8 {
    Image8 { width, height, channels: 1, data: depth.iter().map(|&d| to_u8(d)).collect() }
}

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn verts(rows: &[[f32; 3]]) -> Tensor {
        Tensor::new([rows.len(), 3], rows.iter().flatten().copied().collect()).unwrap()
    }

    /// NDC coordinate of the centre of pixel `p` on an axis of `n` pixels.
    fn centre(p: usize, n: usize) -> f32 {
        (p as f32 + 0.5) / n as f32 * 2.0 - 1.0
    }

    #[test]
    fn single_splat() {
        let v = verts(&[[centre(3, 8), -centre(4, 8), 0.2]]);
        let d = Tensor::new([1, 2], vec![5.0, -6.0]).unwrap();
        let s = splat(&v, &d, &CameraParams::default(), 8, 8, 0.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let hit = (x, y) == (3, 4);
                assert_eq!(s.occupancy[y * 8 + x], hit);
                assert_eq!(s.feature(x, y, 0), if hit { 5.0 } else { 0.0 });
                assert_eq!(s.feature(x, y, 1), if hit { -6.0 } else { 0.0 });
            }
        }
        // One depth level passes through unnormalised.
        assert_eq!(s.depth[4 * 8 + 3], 0.2);
    }

    #[test]
    fn closer_vertex_wins() {
        let v = verts(&[[0.1, 0.1, 0.3], [0.1, 0.1, 0.7], [0.9, 0.9, 0.3]]);
        let d = Tensor::new([3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let s = splat(&v, &d, &CameraParams::default(), 4, 4, -1.0).unwrap();
        let (x, y) = to_pixel(0.1, -0.1, 4, 4).unwrap();
        assert_eq!(s.feature(x, y, 0), 2.0);
        assert_eq!(s.depth[y * 4 + x], 1.0);
        assert_eq!(s.occupied_count(), 2);
    }

    #[test]
    fn out_of_frame_is_culled() {
        let v = verts(&[[1.2, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let d = Tensor::full([2, 1], 1.0);
        let s = splat(&v, &d, &CameraParams::default(), 16, 16, 0.0).unwrap();
        // (0, 1) projects to v = -1, the top row, so only the first is culled.
        assert_eq!(s.occupied_count(), 1);
        assert!(matches!(splat(&v, &Tensor::full([3, 1], 1.0), &CameraParams::default(), 4, 4, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn equal_depth_goes_to_smaller_index() {
        let v = verts(&[[0.0, 0.0, 0.5], [0.0, 0.0, 0.5]]);
        let d = Tensor::new([2, 1], vec![1.0, 2.0]).unwrap();
        let p = plan(&v, &CameraParams::default(), 4, 4).unwrap();
        assert_eq!(p.index.iter().filter(|&&i| i != NO_SOURCE).copied().collect::<Vec<_>>(), vec![0]);
        let s = splat_with_plan(&p, &d, 0.0);
        assert_eq!(s.features.iter().filter(|&&f| f != 0.0).copied().collect::<Vec<_>>(), vec![1.0]);
    }

    /// Brute force: every pixel scans every vertex.
    fn oracle(v: &Tensor, d: &Tensor, w: usize, h: usize, bg: f32) -> (Vec<f32>, Vec<f32>) {
        let c = d.dim(1);
        let n = v.dim(0);
        let mut feats = vec![bg; c * w * h];
        let mut depth = vec![0.0f32; w * h];
        let mut winners = Vec::new();
        for py in 0..h {
            for px in 0..w {
                let mut best: Option<(f32, usize)> = None;
                for i in 0..n {
                    let (u, vv, z) = (v.at(&[i, 0]), -v.at(&[i, 1]), v.at(&[i, 2]));
                    let fx = ((u + 1.0) * 0.5 * w as f32).floor();
                    let fy = ((vv + 1.0) * 0.5 * h as f32).floor();
                    if fx != px as f32 || fy != py as f32 {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bi)) => z > bd || (z == bd && i < bi),
                    };
                    if better {
                        best = Some((z, i));
                    }
                }
                if let Some((z, i)) = best {
                    winners.push((py * w + px, z));
                    for ch in 0..c {
                        feats[(ch * h + py) * w + px] = d.at(&[i, ch]);
                    }
                }
            }
        }
        let lo = winners.iter().map(|w| w.1).fold(f32::INFINITY, f32::min);
        let hi = winners.iter().map(|w| w.1).fold(f32::NEG_INFINITY, f32::max);
        for &(p, z) in &winners {
            depth[p] = if hi > lo { (z - lo) / (hi - lo) } else { z };
        }
        (feats, depth)
    }

    pub(crate) fn random_config(seed: u64) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.gen_range(1..=50);
        // Depths from a coarse lattice so that equal-depth ties actually occur.
        let v = Tensor::from_fn([n, 3], |i| if i % 3 == 2 { r.gen_range(0..5) as f32 * 0.25 } else { r.gen_range(-1.2..1.2) });
        let d = Tensor::from_fn([n, 4], |_| r.gen_range(-1.0..1.0));
        (v, d)
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..300 {
            let (v, d) = random_config(seed);
            let s = splat(&v, &d, &CameraParams::default(), 16, 16, 0.0).unwrap();
            let (f, depth) = oracle(&v, &d, 16, 16, 0.0);
            assert_eq!(s.features, f, "seed {seed}");
            assert_eq!(s.depth, depth, "seed {seed}");
        }
    }

    #[test]
    fn views_have_expected_sizes() {
        let (v, d) = random_config(3);
        let s = splat(&v, &d, &CameraParams::default(), 16, 8, 0.0).unwrap();
        let sv = splat_view(&s);
        assert_eq!((sv.width, sv.height, sv.channels, sv.data.len()), (16, 8, 3, 384));
        let dv = depth_view(&s);
        assert_eq!(dv.data.len(), 128);
    }

    proptest! {
        #[test]
        fn processing_order_does_not_matter(seed in 0u64..100_000, perm_seed in any::<u64>()) {
            let (v, d) = random_config(seed);
            let n = v.dim(0);
            let mut order: Vec<usize> = (0..n).collect();
            let mut r = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..n).rev() {
                order.swap(i, r.gen_range(0..=i));
            }
            let cam = CameraParams::default();
            let a = plan(&v, &cam, 16, 16).unwrap();
            let b = plan_in_order(&v, &cam, 16, 16, order).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(splat_with_plan(&a, &d, 0.0), splat_with_plan(&b, &d, 0.0));
            prop_assert!(a.occupied_count() <= n.min(256));
        }
    }
}
