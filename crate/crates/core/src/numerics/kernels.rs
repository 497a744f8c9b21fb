//! Forward kernels shared by the eager API and the gradient tape.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::str::FromStr;

use super::real::{gemm, MatView};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Output pixels processed per im2col chunk; bounds scratch memory.
const CONV_CHUNK: usize = 2048;

pub fn matmul<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Result<Tensor<R>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
    }
    let mut out = Tensor::zeros([m, n]);
    gemm(MatView::rm(a.data(), m, k), MatView::rm(b.data(), k, n), out.data_mut(), n, false);
    Ok(out)
}

pub fn transpose<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("transpose needs rank 2, got {:?}", x.shape())));
    }
    let (r, c) = (x.dim(0), x.dim(1));
    let src = x.data();
    Ok(Tensor::from_fn([c, r], |i| src[(i % r) * c + i / r]))
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
pub fn softmax<R: Real>(x: &Tensor<R>, axis: usize) -> Result<Tensor<R>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, n, inner) = Tensor::<R>::split_at_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = R::neg_infinity();
            for j in 0..n {
                max = max.max(d[base + j * inner]);
            }
            let mut total = R::zero();
            for j in 0..n {
                let e = (d[base + j * inner] - max).exp();
                d[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                d[base + j * inner] /= total;
            }
        }
    }
    Ok(out)
}

/// Per-row statistics over the last axis: (mean, reciprocal std).
///
/// Population variance is used; a row whose variance plus `eps` is zero gets a
/// reciprocal std of zero, so constant rows normalise to exactly zero.
pub(crate) fn row_stats<R: Real>(data: &[R], d: usize, eps: f64) -> (Vec<R>, Vec<R>) {
    let rows = data.len() / d;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_d = R::one() / R::of(d as f64);
    for row in data.chunks_exact(d) {
        let mean = row.iter().copied().sum::<R>() * inv_d;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<R>() * inv_d;
        let denom = var + R::of(eps);
        means.push(mean);
        rstds.push(if denom > R::zero() { R::one() / denom.sqrt() } else { R::zero() });
    }
    (means, rstds)
}

pub fn layer_norm<R: Real>(
    x: &Tensor<R>,
    gain: &Tensor<R>,
    bias: &Tensor<R>,
    eps: f64,
) -> Result<Tensor<R>> {
    let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!(
            "layer_norm width {d} but gain {:?} / bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let (means, rstds) = row_stats(x.data(), d, eps);
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_exact_mut(d).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - means[r]) * rstds[r] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(out)
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// Exact form `x·Φ(x)` with the Gaussian CDF.
    Gelu,
    Tanh,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    #[inline]
    pub fn apply<R: Real>(self, x: R) -> R {
        match self {
            Activation::Relu => x.max(R::zero()),
            Activation::Gelu => R::of(0.5) * x * (R::one() + (x * R::of(FRAC_1_SQRT_2)).erf()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    #[inline]
    pub fn derivative<R: Real>(self, x: R, y: R) -> R {
        match self {
            Activation::Relu => {
                if x > R::zero() {
                    R::one()
                } else {
                    R::zero()
                }
            }
            Activation::Gelu => {
                let cdf = R::of(0.5) * (R::one() + (x * R::of(FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * R::of(0.5)).exp() * R::of(1.0 / (2.0 * PI).sqrt());
                cdf + x * pdf
            }
            Activation::Tanh => R::one() - y * y,
            Activation::Sigmoid => y * (R::one() - y),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub fn activation<R: Real>(x: &Tensor<R>, kind: Activation) -> Tensor<R> {
    x.map(|v| kind.apply(v))
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects input [C,H,W] and weight [Co,Ci,kh,kw], got {x:?} and {w:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        let (cin, h, wd) = (x[0], x[1], x[2]);
        let (cout, ci, kh, kw) = (w[0], w[1], w[2], w[3]);
        if ci != cin {
            return Err(Error::shape(format!("conv2d input has {cin} channels, weight expects {ci}")));
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d output size not integral: ({ph}-{kh})/{stride}, ({pw}-{kw})/{stride}"
            )));
        }
        Ok(ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Fill `cols` ([patch_len, n]) with input patches for output pixels `start..start+n`.
    pub(crate) fn im2col<R: Real>(&self, x: &[R], start: usize, n: usize, cols: &mut [R]) {
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for (j, out) in dst.iter_mut().enumerate() {
                        let p = start + j;
                        let iy = (p / self.ow * self.stride + ky) as isize - self.pad as isize;
                        let ix = (p % self.ow * self.stride + kx) as isize - self.pad as isize;
                        *out = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w
                        {
                            plane[iy as usize * self.w + ix as usize]
                        } else {
                            R::zero()
                        };
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-add patch gradients back onto the input gradient.
    pub(crate) fn col2im<R: Real>(&self, cols: &[R], start: usize, n: usize, dx: &mut [R]) {
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * n..(row + 1) * n];
                    for (j, &g) in src.iter().enumerate() {
                        let p = start + j;
                        let iy = (p / self.ow * self.stride + ky) as isize - self.pad as isize;
                        let ix = (p % self.ow * self.stride + kx) as isize - self.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                            plane[iy as usize * self.w + ix as usize] += g;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub(crate) fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let total = self.out_pixels();
        (0..total).step_by(CONV_CHUNK).map(move |s| (s, CONV_CHUNK.min(total - s)))
    }
}

/// 2-D cross-correlation of `x` [Cin,H,W] with `w` [Cout,Cin,kh,kw], zero padding.
pub fn conv2d<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    bias: Option<&Tensor<R>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape(format!("conv2d bias has {} values, need {}", b.len(), g.cout)));
        }
    }
    let np = g.out_pixels();
    let mut out = Tensor::zeros([g.cout, g.oh, g.ow]);
    let k = g.patch_len();
    let mut cols = vec![R::zero(); k * CONV_CHUNK.min(np)];
    for (start, n) in g.chunks() {
        let cols = &mut cols[..k * n];
        g.im2col(x.data(), start, n, cols);
        gemm(
            MatView::rm(w.data(), g.cout, k),
            MatView::rm(cols, k, n),
            &mut out.data_mut()[start..],
            np,
            false,
        );
    }
    if let Some(b) = bias {
        for (plane, &bv) in out.data_mut().chunks_exact_mut(np).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling of [C,H,W].
pub fn upsample2x<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("upsample2x needs [C,H,W], got {:?}", x.shape())));
    }
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let src = x.data();
    let (h2, w2) = (2 * h, 2 * w);
    Ok(Tensor::from_fn([c, h2, w2], |i| {
        let ch = i / (h2 * w2);
        let y = i / w2 % h2;
        let xx = i % w2;
        src[ch * h * w + (y / 2) * w + xx / 2]
    }))
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<R: Real>(parts: &[&Tensor<R>], axis: usize) -> Result<Tensor<R>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::shape(format!("concat axis {axis} out of range for {:?}", first.shape())));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        if p.rank() != first.rank()
            || p.shape().iter().enumerate().any(|(i, &d)| i != axis && d != first.dim(i))
        {
            return Err(Error::shape(format!(
                "concat along {axis}: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            )));
        }
        shape[axis] += p.dim(axis);
    }
    let (outer, _, inner) = Tensor::<R>::split_at_axis(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let span = p.dim(axis) * inner;
            data.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
        }
    }
    Tensor::new(shape, data)
}

/// `len` entries of `axis` starting at `start`.
pub fn slice<R: Real>(x: &Tensor<R>, axis: usize, start: usize, len: usize) -> Result<Tensor<R>> {
    if axis >= x.rank() || len == 0 || start + len > x.dim(axis) {
        return Err(Error::shape(format!(
            "slice [{start}, {}) on axis {axis} out of range for {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, n, inner) = Tensor::<R>::split_at_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        Tensor::from_fn([m, n], |i| {
            let (r, c) = (i / n, i % n);
            (0..k).map(|j| a.at(&[r, j]) * b.at(&[j, c])).sum()
        })
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn([3, 5], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);
        let z = matmul(&Tensor::zeros([4, 3]), &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let y = Tensor::<f64>::randn([5, 7], 1.0, &mut rng);
        let fast = matmul(&x, &y).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&x, &y)) < 1e-12);
        assert!(matches!(matmul(&x, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_associative_on_random_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = Tensor::<f32>::randn([8, 8], 1.0, &mut rng);
            let b = Tensor::<f32>::randn([8, 8], 1.0, &mut rng);
            let c = Tensor::<f32>::randn([8, 8], 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-4);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[3], &[0., 0., 0.]), 0).unwrap();
        for &v in s.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        // Reference values computed with 50-digit arithmetic.
        let s = softmax(&t(&[3], &[1., 2., 3.]), 0).unwrap();
        let expect = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in s.data().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let x = t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.5, -2.0]);
        let shifted = x.map(|v| v + 17.5);
        assert!(softmax(&x, 1).unwrap().max_abs_diff(&softmax(&shifted, 1).unwrap()) < 1e-12);
        // Along a non-final axis.
        let cols = softmax(&x, 0).unwrap();
        assert_abs_diff_eq!(cols.at(&[0, 1]) + cols.at(&[1, 1]), 1.0, epsilon = 1e-12);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn softmax_large_inputs_stay_finite() {
        let s = softmax(&Tensor::<f32>::new([2], vec![1000.0, 999.0]).unwrap(), 0).unwrap();
        assert!(s.is_finite());
        assert!((s.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full([3], 1.0);
        let zeros = Tensor::zeros([3]);
        let c = layer_norm(&t(&[1, 3], &[4., 4., 4.]), &ones, &zeros, 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        let c = layer_norm(&t(&[1, 3], &[4., 4., 4.]), &ones, &zeros, 0.0).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(
            &t(&[1, 2], &[1., 3.]),
            &Tensor::full([2], 1.0),
            &Tensor::zeros([2]),
            0.0,
        )
        .unwrap();
        assert_eq!(y.data(), &[-1., 1.]);

        // Two-pass oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn([4, 16], 2.0, &mut rng);
        let g = Tensor::<f64>::randn([16], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([16], 1.0, &mut rng);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for r in 0..4 {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for j in 0..16 {
                let expect = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
                assert_abs_diff_eq!(y.at(&[r, j]), expect, epsilon = 1e-6);
            }
        }
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        Tensor::from_fn([co, oh, ow], |i| {
            let (o, y, xx) = (i / (oh * ow), i / ow % oh, i % ow);
            let mut acc = b[o];
            for c in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (y * s + ky) as isize - p as isize;
                        let ix = (xx * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(&[o, c, ky, kx]) * x.at(&[c, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv2d_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn([1, 5, 5], 1.0, &mut rng);
        let id = conv2d(&x, &Tensor::full([1, 1, 1, 1], 1.0), None, 1, 0).unwrap();
        assert_eq!(id, x);

        let c = Tensor::<f64>::full([1, 6, 6], 0.7);
        let s = conv2d(&c, &Tensor::full([1, 1, 3, 3], 1.0), None, 1, 1).unwrap();
        for y in 1..5 {
            for xx in 1..5 {
                assert_abs_diff_eq!(s.at(&[0, y, xx]), 9.0 * 0.7, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(s.at(&[0, 0, 0]), 4.0 * 0.7, epsilon = 1e-12);

        let w = Tensor::<f64>::randn([1, 1, 3, 3], 1.0, &mut rng);
        let got = conv2d(&x, &w, None, 1, 0).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &[0.0], 1, 0)) < 1e-5);

        for &(s, p, k) in &[(1, 1, 3), (2, 1, 4), (2, 0, 2)] {
            let x = Tensor::<f64>::randn([3, 8, 8], 1.0, &mut rng);
            let w = Tensor::<f64>::randn([4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn([4], 1.0, &mut rng);
            let got = conv2d(&x, &w, Some(&b), s, p).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &w, b.data(), s, p)) < 1e-10);
        }
    }

    #[test]
    fn conv2d_large_input_spans_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn([2, 50, 60], 1.0, &mut rng);
        let w = Tensor::<f64>::randn([3, 2, 3, 3], 1.0, &mut rng);
        let got = conv2d(&x, &w, None, 1, 1).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &[0.0; 3], 1, 1)) < 1e-10);
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let x = Tensor::<f32>::zeros([1, 8, 8]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, 2, 1), Err(Error::Shape(_))));
        assert!(conv2d(&x, &w, None, 0, 1).is_err());
    }

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        // 1·Φ(1) with Φ(1) = 0.841344746068543.
        assert_abs_diff_eq!(Activation::Gelu.apply(1.0f64), 0.841_344_746_068_543, epsilon = 1e-12);
        assert!(matches!("swish".parse::<Activation>(), Err(Error::Config(_))));
        assert_eq!("gelu".parse::<Activation>().unwrap(), Activation::Gelu);
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f32>::randn([2, 3, 4], 1.0, &mut rng);
        let b = Tensor::<f32>::randn([2, 5, 4], 1.0, &mut rng);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8, 4]);
        assert_eq!(slice(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(slice(&c, 1, 3, 5).unwrap(), b);
        assert!(concat(&[&a, &b], 0).is_err());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let u = upsample2x(&x).unwrap();
        assert_eq!(u.shape(), &[1, 4, 4]);
        assert_eq!(u.data(), &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }
}
