//! Per-stage timing of the full pipeline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{project_all, CameraParams};
use crate::head_model::{AvatarParams, OffsetSpace};
use crate::numerics::Tensor;
use crate::pipeline::Avatar;
use crate::rasterizer::splat;
use crate::renderer;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub median: f64,
    pub p95: f64,
}

/// Timings in milliseconds. `end_to_end_fps` is derived from the per-iteration
/// sum of stages: its `median` is the rate at the median latency and its
/// `p95` the rate at the 95th-percentile latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iters: usize,
    pub size: usize,
    pub n_vertices: usize,
    pub descriptor_dim: usize,
    pub reconstruct_ms: Stat,
    pub project_ms: Stat,
    pub transformer_ms: Stat,
    pub splat_ms: Stat,
    pub render_ms: Stat,
    pub end_to_end_fps: Stat,
    /// Splats per second at the median splat time.
    pub splats_per_sec: f64,
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

fn stat(samples: &[f64]) -> Stat {
    Stat { median: percentile(samples, 50.0), p95: percentile(samples, 95.0) }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn run_bench(avatar: &Avatar, params: &AvatarParams, size: usize, iters: usize) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::Usage("bench needs at least one iteration".into()));
    }
    params.validate(&avatar.model)?;
    avatar.network.check_frame(size, size)?;
    let source = avatar.source_frame(&avatar.default_source(params), size, size, OffsetSpace::Canonical)?;
    let mut t = [vec![], vec![], vec![], vec![], vec![]];
    let mut total = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        let verts = avatar.model.drive(params, OffsetSpace::Canonical)?;
        t[0].push(ms(start));

        let start = Instant::now();
        let rows: Vec<[f32; 3]> = verts.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        std::hint::black_box(project_all(&rows, &params.camera));
        t[1].push(ms(start));

        let start = Instant::now();
        let desc = avatar.network.descriptors(&avatar.model, &source)?;
        t[2].push(ms(start));

        let start = Instant::now();
        let s = splat(&verts, &desc, &params.camera, size, size, 0.0)?;
        t[3].push(ms(start));

        let start = Instant::now();
        std::hint::black_box(renderer::render(&s, &avatar.network.weights, &avatar.network.renderer)?);
        t[4].push(ms(start));

        total.push(t.iter().map(|v| v.last().copied().unwrap_or(0.0)).sum::<f64>());
    }
    let splat_stat = stat(&t[3]);
    let lat = stat(&total);
    Ok(BenchReport {
        iters,
        size,
        n_vertices: avatar.model.n_vertices(),
        descriptor_dim: avatar.network.transformer.descriptor_dim,
        reconstruct_ms: stat(&t[0]),
        project_ms: stat(&t[1]),
        transformer_ms: stat(&t[2]),
        splat_ms: splat_stat,
        render_ms: stat(&t[4]),
        end_to_end_fps: Stat { median: 1e3 / lat.median, p95: 1e3 / lat.p95 },
        splats_per_sec: 1e3 / splat_stat.median.max(1e-9),
    })
}

/// Splat-only throughput for `n` vertices with `c` channels into `size²`.
pub fn splat_throughput(vertices: &Tensor, descriptors: &Tensor, size: usize, reps: usize) -> Result<f64> {
    let cam = CameraParams::default();
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(splat(vertices, descriptors, &cam, size, size, 0.0)?);
    }
    Ok(reps as f64 / start.elapsed().as_secs_f64())
}
