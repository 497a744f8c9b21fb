//! Depth-ambiguity probe comparing pixel-aligned features with the vertex
//! transformer.
//!
//! Vertex pairs that project to the same source location but sit at different
//! depths (an occluder and the vertex it hides) are collected from the source
//! view. A pixel-aligned sampler cannot tell them apart; the transformer can.
//! The driving view turns the head so both members of a pair become exposed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::camera::project_all;
use crate::head_model::{AvatarParams, HeadModel, OffsetSpace};
use crate::numerics::{Tape, Tensor, NO_SOURCE};
use crate::pipeline::{Network, SourceFrame};
use crate::rasterizer::plan;
use crate::training::{oracle_render, synthetic_albedo, DEFAULT_LIGHT};
use crate::vertex_transformer::{baseline_feature_map, pixel_aligned_features};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Pairs sharing a source `(u, v)` at distinct depths.
    pub pairs: usize,
    /// Pairs where both vertices win a pixel in the driving view.
    pub exposed_after_turn: usize,
    /// Largest per-pair max-abs difference of baseline descriptors.
    pub baseline_max_diff: f64,
    pub transformer_min_diff: f64,
    pub transformer_median_diff: f64,
}

fn pair_diff(x: &Tensor, i: usize, j: usize) -> f64 {
    x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max)
}

/// Index pairs with bitwise-equal projected `(u, v)` and different depth.
pub fn shared_location_pairs(vertices: &Tensor, source: &AvatarParams) -> Vec<(usize, usize)> {
    let rows: Vec<[f32; 3]> = vertices.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let proj = project_all(&rows, &source.camera);
    let mut groups: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (i, p) in proj.iter().enumerate() {
        groups.entry((p.u.to_bits(), p.v.to_bits())).or_default().push(i);
    }
    let mut pairs: Vec<(usize, usize)> = groups
        .into_values()
        .filter(|g| g.len() == 2 && proj[g[0]].d != proj[g[1]].d)
        .map(|g| (g[0].min(g[1]), g[0].max(g[1])))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Probe `net` with a frontal `source` at `size²` and a driving view turned
/// by `yaw` radians about the vertical axis.
pub fn depth_ambiguity(model: &HeadModel, net: &Network, source: &AvatarParams, yaw: f32, size: usize) -> Result<AblationReport> {
    source.validate(model)?;
    let albedo = synthetic_albedo(model, 0);
    let (image, _) = oracle_render(model, source, &albedo, size, size, DEFAULT_LIGHT)?;
    let vertices = model.drive(source, OffsetSpace::Canonical)?;
    let pairs = shared_location_pairs(&vertices, source);

    let mut t = Tape::<f32>::new();
    let b = net.weights.bind(&mut t, false);
    let map = baseline_feature_map(&mut t, &b, &image)?;
    let baseline = pixel_aligned_features(&map, &vertices, &source.camera)?;
    let src = SourceFrame { image, vertices, camera: source.camera };
    let ours = net.descriptors(model, &src)?;

    let mut driving = source.clone();
    driving.theta[1] += yaw;
    let driven = model.drive(&driving, OffsetSpace::Canonical)?;
    let p = plan(&driven, &driving.camera, size, size)?;
    let mut visible = vec![false; model.n_vertices()];
    for &k in p.index.iter().filter(|&&k| k != NO_SOURCE) {
        visible[k as usize] = true;
    }

    let mut diffs: Vec<f64> = pairs.iter().map(|&(i, j)| pair_diff(&ours, i, j)).collect();
    diffs.sort_by(f64::total_cmp);
    Ok(AblationReport {
        pairs: pairs.len(),
        exposed_after_turn: pairs.iter().filter(|&&(i, j)| visible[i] && visible[j]).count(),
        baseline_max_diff: pairs.iter().map(|&(i, j)| pair_diff(&baseline, i, j)).fold(0.0, f64::max),
        transformer_min_diff: diffs.first().copied().unwrap_or(0.0),
        transformer_median_diff: diffs.get(diffs.len() / 2).copied().unwrap_or(0.0),
    })
}
