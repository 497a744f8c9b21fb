//! Image quality metrics on `[C, H, W]` images in `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn unit(x: f32) -> f64 {
    (x as f64 + 1.0) * 0.5
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::shape(format!("metric inputs {:?} and {:?} must be equal [C, H, W]", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute error in `[0, 1]` units, over the pixels where `mask` > 0.5 when given.
pub fn l1(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    same_shape(pred, target)?;
    let hw = pred.dim(1) * pred.dim(2);
    if let Some(m) = mask {
        if m.len() != hw {
            return Err(Error::shape(format!("mask has {} values for {hw} pixels", m.len())));
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if mask.is_none_or(|m| m.data()[i % hw] > 0.5) {
            sum += (unit(p) - unit(t)).abs();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// `10·log10(1 / MSE)` in `[0, 1]` units, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let mse = pred.data().iter().zip(target.data()).map(|(&p, &t)| (unit(p) - unit(t)).powi(2)).sum::<f64>()
        / pred.len() as f64;
    Ok(if mse < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|i| g[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM over valid 11×11 Gaussian windows and channels.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let (c, h, w) = (pred.dim(0), pred.dim(1), pred.dim(2));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_window();
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let a: Vec<f64> = pred.data()[ch * hw..(ch + 1) * hw].iter().map(|&x| unit(x)).collect();
        let b: Vec<f64> = target.data()[ch * hw..(ch + 1) * hw].iter().map(|&x| unit(x)).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter(&a, h, w, &g);
        let mu_b = filter(&b, h, w, &g);
        let aa = filter(&prod(&a, &a), h, w, &g);
        let bb = filter(&prod(&b, &b), h, w, &g);
        let ab = filter(&prod(&a, &b), h, w, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn metrics(pred: &Tensor, target: &Tensor, mask: Option<&Tensor>) -> Result<Metrics> {
    Ok(Metrics { l1: l1(pred, target, mask)?, psnr: psnr(pred, target)?, ssim: ssim(pred, target)? })
}

/// Dice overlap of the binarised (> 0.5) masks; 1 when both are empty.
pub fn dice_coefficient(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("masks {:?} and {:?} differ", pred.shape(), target.shape())));
    }
    let (mut inter, mut sp, mut st) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += (p && t) as usize;
        sp += p as usize;
        st += t as usize;
    }
    Ok(if sp + st == 0 { 1.0 } else { 2.0 * inter as f64 / (sp + st) as f64 })
}
