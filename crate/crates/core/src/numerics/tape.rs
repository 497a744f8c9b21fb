//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the handles of its inputs. `backward` replays the nodes in reverse order,
//! so gradient accumulation order is fixed by recording order.

use std::sync::Arc;

use super::kernels::{self, row_stats, Activation, ConvGeom};
use super::real::{gemm, MatView};
use super::{Real, SparseMatrix, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sentinel in gather indices for "no source row".
pub const NO_SOURCE: u32 = u32::MAX;

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, R),
    AddScalar(Var),
    Abs(Var),
    Ln(Var),
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, means: Vec<R>, rstds: Vec<R> },
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    SparseMatMul { m: Arc<SparseMatrix>, x: Var },
    Gather { x: Var, index: Arc<[u32]> },
    Sum(Var),
    Mean(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Operation record for one forward/backward pass. Single owner; not shared
/// across threads while recording.
pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
    checked: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<R> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<R> {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn add_into<R: Real>(slot: &mut Option<Tensor<R>>, g: Tensor<R>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), checked: false }
    }

    /// In checked mode every op rejects non-finite results.
    pub fn checked() -> Self {
        Tape { nodes: Vec::new(), checked: true }
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register a trainable input.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Register an input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<R>, requires_grad: bool) -> Var {
        self.push_raw(t, Op::Leaf, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    /// Add a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("add_bias on scalar"))?;
        if self.value(bias).len() != d {
            return Err(Error::shape(format!(
                "bias of {:?} does not match last dim {d}",
                self.shape(bias)
            )));
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in v.data_mut().chunks_exact_mut(d) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push("add_bias", v, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: R) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Result<Var> {
        let v = self.value(x).map(|a| a + c);
        self.push("add_scalar", v, Op::AddScalar(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.abs());
        self.push("abs", v, Op::Abs(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.ln());
        self.push("ln", v, Op::Ln(x), &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = kernels::activation(self.value(x), kind);
        self.push("activation", v, Op::Act(x, kind), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).rank().checked_sub(1).ok_or_else(|| Error::shape("softmax of scalar"))?;
        let v = kernels::softmax(self.value(x), axis)?;
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let d = *self.shape(x).last().expect("checked by kernel");
        let (means, rstds) = row_stats(self.value(x).data(), d, eps);
        self.push("layer_norm", v, Op::LayerNorm { x, gain, bias, means, rstds }, &[x, gain, bias])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = kernels::transpose(self.value(x))?;
        self.push("transpose", v, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<R>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat(&vals, axis)?;
        self.push("concat", v, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice(self.value(x), axis, start, len)?;
        self.push("slice", v, Op::Slice { x, axis, start }, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let v = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", v, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let v = kernels::upsample2x(self.value(x))?;
        self.push("upsample2x", v, Op::Upsample2x(x), &[x])
    }

    /// Constant sparse matrix times `x` [cols, C].
    pub fn sparse_matmul(&mut self, m: Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let v = m.matmul(self.value(x))?;
        self.push("sparse_matmul", v, Op::SparseMatMul { m, x }, &[x])
    }

    /// Planar gather: output [C, P] with column `p` = row `index[p]` of `x` [N, C],
    /// or `fill` where `index[p] == NO_SOURCE`.
    pub fn gather_rows_planar(&mut self, x: Var, index: Arc<[u32]>, fill: R) -> Result<Var> {
        let xs = self.value(x);
        if xs.rank() != 2 {
            return Err(Error::shape(format!("gather source must be [N,C], got {:?}", xs.shape())));
        }
        let (n, c) = (xs.dim(0), xs.dim(1));
        let p = index.len();
        if let Some(&bad) = index.iter().find(|&&i| i != NO_SOURCE && i as usize >= n) {
            return Err(Error::shape(format!("gather index {bad} out of range for {n} rows")));
        }
        let mut out = Tensor::full([c, p], fill);
        let src = xs.data();
        let dst = out.data_mut();
        for (pix, &i) in index.iter().enumerate() {
            if i != NO_SOURCE {
                let row = &src[i as usize * c..(i as usize + 1) * c];
                for (ch, &v) in row.iter().enumerate() {
                    dst[ch * p + pix] = v;
                }
            }
        }
        self.push("gather", out, Op::Gather { x, index }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = R::of(self.value(x).len() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push("mean", v, Op::Mean(x), &[x])
    }

    /// `x·w + b` for `x` [T, in], `w` [in, out], `b` [out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage(format!("loss node {} is not on this tape", loss.0)))?;
        if !node.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), R::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.vjp(id, &g, &mut grads);
            // Only leaf gradients are reported; intermediates are dropped as the sweep passes them.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads, shapes })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vjp(&self, id: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.dim(0), av.dim(1), bv.dim(1));
                if self.rg(a) {
                    let mut da = Tensor::zeros([m, k]);
                    gemm(MatView::rm(g.data(), m, n), MatView::rm(bv.data(), k, n).t(), da.data_mut(), k, false);
                    add_into(&mut grads[a.0], da);
                }
                if self.rg(b) {
                    let mut db = Tensor::zeros([k, n]);
                    gemm(MatView::rm(av.data(), m, k).t(), MatView::rm(g.data(), m, n), db.data_mut(), n, false);
                    add_into(&mut grads[b.0], db);
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.rg(b) {
                    add_into(&mut grads[b.0], g.map(|x| -x));
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    add_into(&mut grads[a.0], g.zip_map(self.value(b), |x, y| x * y).expect("shape"));
                }
                if self.rg(b) {
                    add_into(&mut grads[b.0], g.zip_map(self.value(a), |x, y| x * y).expect("shape"));
                }
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                if self.rg(a) {
                    add_into(&mut grads[a.0], g.zip_map(bv, |x, y| x / y).expect("shape"));
                }
                if self.rg(b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = out.zip_map(bv, |o, y| -o / y).expect("shape");
                    add_into(&mut grads[b.0], g.zip_map(&q, |x, y| x * y).expect("shape"));
                }
            }
            &Op::AddBias { x, bias } => {
                if self.rg(x) {
                    add_into(&mut grads[x.0], g.clone());
                }
                if self.rg(bias) {
                    let d = self.value(bias).len();
                    let mut db = vec![R::zero(); d];
                    for row in g.data().chunks_exact(d) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.shape(bias).to_vec();
                    add_into(&mut grads[bias.0], Tensor::new(shape, db).expect("shape"));
                }
            }
            &Op::Scale(x, c) => add_into(&mut grads[x.0], g.map(|v| v * c)),
            &Op::AddScalar(x) => add_into(&mut grads[x.0], g.clone()),
            &Op::Abs(x) => {
                let d = g.zip_map(self.value(x), |gv, xv| if xv > R::zero() {
                    gv
                } else if xv < R::zero() {
                    -gv
                } else {
                    R::zero()
                });
                add_into(&mut grads[x.0], d.expect("shape"));
            }
            &Op::Ln(x) => add_into(&mut grads[x.0], g.zip_map(self.value(x), |gv, xv| gv / xv).expect("shape")),
            &Op::Act(x, kind) => {
                let xv = self.value(x).data();
                let d: Vec<R> = g
                    .data()
                    .iter()
                    .zip(xv.iter().zip(out.data()))
                    .map(|(&gv, (&a, &y))| gv * kind.derivative(a, y))
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(out.shape().to_vec(), d).expect("shape"));
            }
            &Op::Softmax(x) => {
                let n = *out.shape().last().expect("rank >= 1");
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_exact_mut(n).zip(out.data().chunks_exact(n)) {
                    let dot: R = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv = y * (*dv - dot);
                    }
                }
                add_into(&mut grads[x.0], d);
            }
            Op::LayerNorm { x, gain, bias, means, rstds } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.value(x);
                let gv = self.value(gain).data();
                let d = gv.len();
                let inv_d = R::one() / R::of(d as f64);
                let mut dx = vec![R::zero(); xv.len()];
                let mut dgain = vec![R::zero(); d];
                let mut dbias = vec![R::zero(); d];
                let mut xhat = vec![R::zero(); d];
                let mut dxhat = vec![R::zero(); d];
                for (r, (xrow, grow)) in xv.data().chunks_exact(d).zip(g.data().chunks_exact(d)).enumerate() {
                    let (mu, rs) = (means[r], rstds[r]);
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mu) * rs;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let m1: R = dxhat.iter().copied().sum::<R>() * inv_d;
                    let m2: R = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<R>() * inv_d;
                    for j in 0..d {
                        dx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.rg(x) {
                    add_into(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                }
                if self.rg(gain) {
                    add_into(&mut grads[gain.0], Tensor::new(self.shape(gain).to_vec(), dgain).expect("shape"));
                }
                if self.rg(bias) {
                    add_into(&mut grads[bias.0], Tensor::new(self.shape(bias).to_vec(), dbias).expect("shape"));
                }
            }
            &Op::Transpose(x) => add_into(&mut grads[x.0], kernels::transpose(g).expect("rank 2")),
            &Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                add_into(&mut grads[x.0], g.clone().reshape(shape).expect("same size"));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.rg(p) {
                        add_into(&mut grads[p.0], kernels::slice(g, *axis, start, len).expect("in range"));
                    }
                    start += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let xs = self.shape(x);
                let (outer, n, inner) = Tensor::<R>::split_at_axis(xs, axis);
                let len = g.shape()[axis];
                let mut dx = Tensor::zeros(xs.to_vec());
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Conv2d { x, w, b, geom } => self.conv_vjp(*x, *w, *b, geom, g, grads),
            &Op::Upsample2x(x) => {
                let xs = self.shape(x);
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = Tensor::zeros([c, h, w]);
                let w2 = 2 * w;
                for (i, &gv) in g.data().iter().enumerate() {
                    let ch = i / (4 * h * w);
                    let y = i / w2 % (2 * h);
                    let xx = i % w2;
                    dx.data_mut()[ch * h * w + (y / 2) * w + xx / 2] += gv;
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::SparseMatMul { m, x } => {
                let xs = self.shape(*x).to_vec();
                let mut dx = Tensor::zeros(xs.clone());
                m.transpose_matmul_acc(g.data(), xs[1], dx.data_mut());
                add_into(&mut grads[x.0], dx);
            }
            Op::Gather { x, index } => {
                let xs = self.shape(*x).to_vec();
                let c = xs[1];
                let p = index.len();
                let mut dx = Tensor::zeros(xs);
                let d = dx.data_mut();
                for (pix, &i) in index.iter().enumerate() {
                    if i != NO_SOURCE {
                        for ch in 0..c {
                            d[i as usize * c + ch] += g.data()[ch * p + pix];
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            &Op::Sum(x) => {
                let s = g.item();
                add_into(&mut grads[x.0], Tensor::full(self.shape(x).to_vec(), s));
            }
            &Op::Mean(x) => {
                let n = R::of(self.value(x).len() as f64);
                add_into(&mut grads[x.0], Tensor::full(self.shape(x).to_vec(), g.item() / n));
            }
        }
    }

    fn conv_vjp(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor<R>,
        grads: &mut [Option<Tensor<R>>],
    ) {
        let np = geom.out_pixels();
        let k = geom.patch_len();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (need_x, need_w) = (self.rg(x), self.rg(w));
        let mut dw = need_w.then(|| Tensor::zeros(self.shape(w).to_vec()));
        let mut dx = need_x.then(|| Tensor::zeros(self.shape(x).to_vec()));
        let chunk_max = geom.chunks().map(|(_, n)| n).max().unwrap_or(0);
        let mut cols = vec![R::zero(); k * chunk_max];
        for (start, n) in geom.chunks() {
            let gview = MatView { data: &g.data()[start..], rows: geom.cout, cols: n, rs: np, cs: 1 };
            let cols = &mut cols[..k * n];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(xv, start, n, cols);
                gemm(gview, MatView::rm(cols, k, n).t(), dw.data_mut(), k, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(MatView::rm(wv, geom.cout, k).t(), gview, cols, n, false);
                geom.col2im(cols, start, n, dx.data_mut());
            }
        }
        if let Some(dw) = dw {
            add_into(&mut grads[w.0], dw);
        }
        if let Some(dx) = dx {
            add_into(&mut grads[x.0], dx);
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let db: Vec<R> = g.data().chunks_exact(np).map(|plane| plane.iter().copied().sum()).collect();
            add_into(&mut grads[b.0], Tensor::new(self.shape(b).to_vec(), db).expect("shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_gradient_is_other_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::randn([7], 1.0, &mut rng));
        let yv = Tensor::randn([7], 1.0, &mut rng);
        let y = t.constant(yv.clone());
        let p = t.mul(x, y).unwrap();
        let loss = t.sum(p).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x), yv);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::<f64>::randn([1, 5], 1.0, &mut rng);
        let target = 2;
        let onehot = Tensor::from_fn([1, 5], |i| if i == target { 1.0 } else { 0.0 });
        let mut t = Tape::new();
        let x = t.param(logits.clone());
        let p = t.softmax(x).unwrap();
        let lp = t.ln(p).unwrap();
        let oh = t.constant(onehot.clone());
        let picked = t.mul(lp, oh).unwrap();
        let s = t.sum(picked).unwrap();
        let loss = t.scale(s, -1.0).unwrap();
        let g = t.backward(loss).unwrap().wrt(x);
        let probs = t.value(p).clone();
        let expect = probs.zip_map(&onehot, |a, b| a - b).unwrap();
        assert!(g.max_abs_diff(&expect) < 1e-12);

        // Finite differences agree as well.
        let r = crate::numerics::grad_check(
            |t, v| {
                let p = t.softmax(v[0])?;
                let lp = t.ln(p)?;
                let oh = t.constant(onehot.clone());
                let picked = t.mul(lp, oh)?;
                let s = t.sum(picked)?;
                t.scale(s, -1.0)
            },
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::<f32>::new();
        let a = t.param(Tensor::full([3], 2.0));
        let b = t.param(Tensor::full([2, 2], 1.0));
        let loss = t.sum(a).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(b), Tensor::zeros([2, 2]));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::<f32>::new();
        let a = t.param(Tensor::full([3], 2.0));
        assert!(matches!(t.backward(a), Err(Error::Usage(_))));
        assert!(matches!(t.backward(Var(99)), Err(Error::Usage(_))));
    }

    #[test]
    fn checked_mode_rejects_non_finite() {
        let mut t = Tape::<f32>::checked();
        let a = t.param(Tensor::full([2], -1.0));
        assert!(matches!(t.ln(a), Err(Error::NonFinite(_))));
        let mut t = Tape::<f32>::new();
        let a = t.param(Tensor::full([2], -1.0));
        assert!(t.ln(a).is_ok());
    }

    #[test]
    fn shared_input_accumulates_in_tape_order() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::full([2], 3.0));
        let y = t.mul(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let loss = t.sum(z).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[7.0, 7.0]);
    }
}
