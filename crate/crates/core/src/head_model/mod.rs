//! Parametric head mesh: blendshapes, linear blend skinning and driven vertices.

mod io;
mod synthetic;

use std::collections::HashSet;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use io::{load_model, model_from_container, model_to_container, save_model};
pub use synthetic::{generate_synthetic_model, SyntheticConfig};

use crate::camera::CameraParams;
use crate::numerics::{SparseMatrix, Tensor};
use crate::{Error, Result};

/// Joint names of the synthetic skeleton, in kinematic order.
pub const JOINT_NAMES: [&str; 4] = ["neck", "jaw", "eye_left", "eye_right"];

/// Tolerance on skinning-weight row sums.
pub const SKIN_SUM_TOL: f64 = 1e-6;
const UPSAMPLE_SUM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    /// Canonical template `[N, 3]`.
    pub template: Tensor,
    /// `[N, 3, L]`.
    pub shape_basis: Tensor,
    /// `[N, 3, K]`.
    pub expr_basis: Tensor,
    /// `[N, J]`, rows convex.
    pub skin_weights: Tensor,
    /// `J × N`, regresses rest joints from vertices.
    pub joint_regressor: Arc<SparseMatrix>,
    /// Parent joint per joint; `-1` marks the root.
    pub parents: Vec<i32>,
    pub faces: Vec<[u32; 3]>,
    /// Coarse token vertices, in token order.
    pub coarse_index: Vec<u32>,
    /// Row-stochastic matrices composing `N' → N`, applied first to last.
    pub upsample_chain: Vec<Arc<SparseMatrix>>,
}

/// Where supplied per-vertex offsets enter the deformation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetSpace {
    /// Added to the blendshaped mesh before skinning, so they follow the pose.
    #[default]
    Canonical,
    /// Added to the posed mesh.
    World,
}

impl FromStr for OffsetSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" => Ok(OffsetSpace::Canonical),
            "world" => Ok(OffsetSpace::World),
            _ => Err(Error::Config(format!("unknown offset space `{s}` (canonical|world)"))),
        }
    }
}

/// Full control vector of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvatarParams {
    pub beta: Vec<f32>,
    pub phi: Vec<f32>,
    pub theta: Vec<f32>,
    pub camera: CameraParams,
    #[serde(default)]
    pub offsets: Option<Vec<[f32; 3]>>,
}

impl AvatarParams {
    /// All-zero coefficients and the default camera for `model`.
    pub fn zeros(model: &HeadModel) -> Self {
        AvatarParams {
            beta: vec![0.0; model.shape_dims()],
            phi: vec![0.0; model.expr_dims()],
            theta: vec![0.0; model.pose_dims()],
            camera: CameraParams::default(),
            offsets: None,
        }
    }

    /// Check every length against `model`; errors name the field.
    pub fn validate(&self, model: &HeadModel) -> Result<()> {
        let check = |field: &str, v: &[f32], want: usize| {
            if v.len() != want {
                return Err(Error::param(field, format!("expected {want} values, got {}", v.len())));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::param(field, format!("value {i} is not finite")));
            }
            Ok(())
        };
        check("beta", &self.beta, model.shape_dims())?;
        check("phi", &self.phi, model.expr_dims())?;
        check("theta", &self.theta, model.pose_dims())?;
        self.camera.validate()?;
        if let Some(off) = &self.offsets {
            if off.len() != model.n_vertices() {
                return Err(Error::param(
                    "offsets",
                    format!("expected {} rows, got {}", model.n_vertices(), off.len()),
                ));
            }
            if off.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::param("offsets", "values must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Rigid {
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Rigid {
    const IDENTITY: Rigid = Rigid { r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] };

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.r;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.t[i])
    }

    /// `self ∘ other`.
    fn then_after(&self, other: &Rigid) -> Rigid {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (0..3).map(|k| self.r[i][k] * other.r[k][j]).sum();
            }
        }
        Rigid { r, t: self.apply(other.t) }
    }
}

/// Rotation matrix of an axis-angle vector (Rodrigues).
pub fn rodrigues(w: [f64; 3]) -> [[f64; 3]; 3] {
    let angle = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if angle == 0.0 {
        return Rigid::IDENTITY.r;
    }
    let k = w.map(|x| x / angle);
    let (s, c) = angle.sin_cos();
    let v = 1.0 - c;
    [
        [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
        [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
        [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
    ]
}

fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()
}

fn to_tensor(rows: &[[f64; 3]]) -> Tensor {
    let data = rows.iter().flat_map(|r| r.map(|x| x as f32)).collect();
    Tensor::new([rows.len(), 3], data).expect("rows are 3-wide")
}

impl HeadModel {
    pub fn n_vertices(&self) -> usize {
        self.template.dim(0)
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_index.len()
    }

    pub fn shape_dims(&self) -> usize {
        self.shape_basis.dim(2)
    }

    pub fn expr_dims(&self) -> usize {
        self.expr_basis.dim(2)
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    /// Length of `theta`: global rotation plus one axis-angle per joint.
    pub fn pose_dims(&self) -> usize {
        3 * self.n_joints() + 3
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.template.dim(0);
        let shaped = |name: &str, t: &Tensor, want: &[usize]| -> Result<()> {
            let s = t.shape();
            let ok = s.len() == want.len() && s.iter().zip(want).all(|(&a, &b)| b == usize::MAX || a == b);
            if !ok {
                return Err(Error::format(name, format!("shape {s:?} does not match {want:?}")));
            }
            if !t.is_finite() {
                return Err(Error::format(name, "non-finite values"));
            }
            Ok(())
        };
        shaped("template", &self.template, &[usize::MAX, 3])?;
        shaped("shape_basis", &self.shape_basis, &[n, 3, usize::MAX])?;
        shaped("expr_basis", &self.expr_basis, &[n, 3, usize::MAX])?;
        let j = self.parents.len();
        if j == 0 {
            return Err(Error::format("parents", "at least one joint is required"));
        }
        shaped("skin_weights", &self.skin_weights, &[n, j])?;
        for (v, row) in self.skin_weights.data().chunks_exact(j).enumerate() {
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::Invariant(format!("skin_weights row {v} has a negative weight")));
            }
            let sum: f64 = row.iter().map(|&w| w as f64).sum();
            if (sum - 1.0).abs() > SKIN_SUM_TOL {
                return Err(Error::Invariant(format!("skin_weights row {v} sums to {sum}, expected 1")));
            }
        }
        if self.joint_regressor.rows() != j || self.joint_regressor.cols() != n {
            return Err(Error::format(
                "joint_regressor",
                format!("is {}x{}, expected {j}x{n}", self.joint_regressor.rows(), self.joint_regressor.cols()),
            ));
        }
        for (i, &p) in self.parents.iter().enumerate() {
            let ok = if i == 0 { p == -1 } else { p >= 0 && (p as usize) < i };
            if !ok {
                return Err(Error::Invariant(format!(
                    "parents[{i}] = {p}: joint 0 must be the only root and parents must precede children"
                )));
            }
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::format("faces", format!("face {f:?} indexes past {n} vertices")));
        }
        let mut seen = HashSet::new();
        for &c in &self.coarse_index {
            if c as usize >= n || !seen.insert(c) {
                return Err(Error::Invariant(format!("coarse_index entry {c} is out of range or repeated")));
            }
        }
        if self.coarse_index.is_empty() || self.coarse_index.len() >= n {
            return Err(Error::Invariant("coarse_index must select fewer than N vertices".into()));
        }
        let mut rows = self.coarse_index.len();
        for (i, m) in self.upsample_chain.iter().enumerate() {
            if m.cols() != rows {
                return Err(Error::format(
                    format!("upsample_{i}"),
                    format!("expects {} input rows, previous stage gives {rows}", m.cols()),
                ));
            }
            if !m.is_row_stochastic(UPSAMPLE_SUM_TOL) {
                return Err(Error::Invariant(format!("upsample_{i} is not row-stochastic")));
            }
            rows = m.rows();
        }
        if rows != n {
            return Err(Error::Invariant(format!("upsample chain ends at {rows} rows, expected {n}")));
        }
        Ok(())
    }

    /// `V_b + S·β + E·φ`.
    pub fn apply_blendshapes(&self, beta: &[f32], phi: &[f32]) -> Result<Tensor> {
        let (l, k) = (self.shape_dims(), self.expr_dims());
        if beta.len() != l || phi.len() != k {
            return Err(Error::shape(format!(
                "blendshapes expect beta[{l}] and phi[{k}], got beta[{}] and phi[{}]",
                beta.len(),
                phi.len()
            )));
        }
        let s = self.shape_basis.data();
        let e = self.expr_basis.data();
        let out = self
            .template
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut acc = v as f64;
                for (b, &c) in s[i * l..(i + 1) * l].iter().zip(beta) {
                    acc += *b as f64 * c as f64;
                }
                for (b, &c) in e[i * k..(i + 1) * k].iter().zip(phi) {
                    acc += *b as f64 * c as f64;
                }
                acc as f32
            })
            .collect();
        Tensor::new(self.template.shape().to_vec(), out)
    }

    /// Rest-pose joint positions regressed from `vertices`.
    pub fn regress_joints(&self, vertices: &Tensor) -> Result<Vec<[f64; 3]>> {
        self.check_vertices(vertices)?;
        let j = self.joint_regressor.matmul(&vertices.cast::<f64>())?;
        Ok(j.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn check_vertices(&self, vertices: &Tensor) -> Result<()> {
        if vertices.shape() != [self.n_vertices(), 3] {
            return Err(Error::shape(format!(
                "expected vertices [{}, 3], got {:?}",
                self.n_vertices(),
                vertices.shape()
            )));
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f32]) -> Result<()> {
        if theta.len() != self.pose_dims() {
            return Err(Error::shape(format!("theta needs {} values, got {}", self.pose_dims(), theta.len())));
        }
        Ok(())
    }

    /// Per-joint transforms mapping rest-pose points to posed points, before the
    /// global rotation.
    pub(crate) fn joint_transforms(&self, joints: &[[f64; 3]], theta: &[f32]) -> Vec<Rigid> {
        let mut world: Vec<Rigid> = Vec::with_capacity(joints.len());
        for (j, &jp) in joints.iter().enumerate() {
            let w = [0, 1, 2].map(|c| theta[3 + 3 * j + c] as f64);
            let r = rodrigues(w);
            let rotated = Rigid { r, t: [0.0; 3] }.apply(jp);
            let local = Rigid { r, t: [0, 1, 2].map(|c| jp[c] - rotated[c]) };
            let g = match self.parents[j] {
                p if p < 0 => local,
                p => world[p as usize].then_after(&local),
            };
            world.push(g);
        }
        world
    }

    fn skin(&self, verts: &[[f64; 3]], joints: &[[f64; 3]], theta: &[f32]) -> Vec<[f64; 3]> {
        let transforms = self.joint_transforms(joints, theta);
        let global = rodrigues([0, 1, 2].map(|c| theta[c] as f64));
        let nj = transforms.len();
        let weights = self.skin_weights.data();
        verts
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                // Blend of (transform − identity): equal to the usual convex blend when
                // the weights sum to one, and exactly the identity at zero pose.
                let mut blend = Rigid { r: [[0.0; 3]; 3], t: [0.0; 3] };
                for (t, &w) in transforms.iter().zip(&weights[i * nj..(i + 1) * nj]) {
                    if w == 0.0 {
                        continue;
                    }
                    let w = w as f64;
                    for a in 0..3 {
                        for b in 0..3 {
                            let delta = if a == b { t.r[a][b] - 1.0 } else { t.r[a][b] };
                            blend.r[a][b] += w * delta;
                        }
                        blend.t[a] += w * t.t[a];
                    }
                }
                let d = blend.apply(v);
                let p = [v[0] + d[0], v[1] + d[1], v[2] + d[2]];
                if global == Rigid::IDENTITY.r {
                    p
                } else {
                    Rigid { r: global, t: [0.0; 3] }.apply(p)
                }
            })
            .collect()
    }

    /// Linear blend skinning of `vertices` by `theta`; the global rotation is
    /// applied last, about the origin.
    pub fn apply_lbs(&self, vertices: &Tensor, theta: &[f32]) -> Result<Tensor> {
        self.check_theta(theta)?;
        let joints = self.regress_joints(vertices)?;
        Ok(to_tensor(&self.skin(&rows3(vertices), &joints, theta)))
    }

    pub fn reconstruct(&self, beta: &[f32], phi: &[f32], theta: &[f32]) -> Result<Tensor> {
        let v = self.apply_blendshapes(beta, phi)?;
        self.apply_lbs(&v, theta)
    }

    /// Source shape, driving expression and pose, plus optional offsets.
    ///
    /// Joints are always regressed from the blendshaped mesh without offsets.
    pub fn drive_vertices(
        &self,
        beta_src: &[f32],
        phi_drv: &[f32],
        theta_drv: &[f32],
        offsets: Option<&[[f32; 3]]>,
        space: OffsetSpace,
    ) -> Result<Tensor> {
        self.check_theta(theta_drv)?;
        let Some(off) = offsets else {
            return self.reconstruct(beta_src, phi_drv, theta_drv);
        };
        if off.len() != self.n_vertices() {
            return Err(Error::shape(format!("offsets need {} rows, got {}", self.n_vertices(), off.len())));
        }
        let add = |rows: &mut [[f64; 3]]| {
            for (p, o) in rows.iter_mut().zip(off) {
                for c in 0..3 {
                    if o[c] != 0.0 {
                        p[c] += o[c] as f64;
                    }
                }
            }
        };
        let blended = self.apply_blendshapes(beta_src, phi_drv)?;
        let joints = self.regress_joints(&blended)?;
        let mut verts = rows3(&blended);
        match space {
            OffsetSpace::Canonical => {
                add(&mut verts);
                Ok(to_tensor(&self.skin(&verts, &joints, theta_drv)))
            }
            OffsetSpace::World => {
                // Match `reconstruct` bit for bit before the offsets go in.
                let posed = self.skin(&verts, &joints, theta_drv);
                let mut posed = rows3(&to_tensor(&posed));
                add(&mut posed);
                Ok(to_tensor(&posed))
            }
        }
    }

    /// Driven vertices for a full parameter set.
    pub fn drive(&self, p: &AvatarParams, space: OffsetSpace) -> Result<Tensor> {
        self.drive_vertices(&p.beta, &p.phi, &p.theta, p.offsets.as_deref(), space)
    }

    /// Rows of `vertices` selected by `coarse_index`.
    pub fn coarse_vertices(&self, vertices: &Tensor) -> Result<Tensor> {
        self.check_vertices(vertices)?;
        let data = self.coarse_index.iter().flat_map(|&i| vertices.row(i as usize).to_vec()).collect();
        Tensor::new([self.n_coarse(), 3], data)
    }

    /// Product of the upsample chain as one `N × N'` matrix.
    pub fn composed_upsample(&self) -> Result<SparseMatrix> {
        let mut it = self.upsample_chain.iter();
        let first = it.next().ok_or_else(|| Error::Invariant("empty upsample chain".into()))?;
        it.try_fold((**first).clone(), |acc, m| m.compose(&acc))
    }

    /// Area-weighted unit vertex normals of `vertices`.
    pub fn vertex_normals(&self, vertices: &Tensor) -> Result<Vec<[f64; 3]>> {
        self.check_vertices(vertices)?;
        let p = rows3(vertices);
        let mut n = vec![[0.0f64; 3]; p.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| p[i as usize]);
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            // Cross product length is twice the area, so this weights by area.
            let cr = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
            for &i in f {
                for k in 0..3 {
                    n[i as usize][k] += cr[k];
                }
            }
        }
        for v in &mut n {
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if len > 0.0 {
                *v = v.map(|x| x / len);
            }
        }
        Ok(n)
    }
}
