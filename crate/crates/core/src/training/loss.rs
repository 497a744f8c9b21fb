//! Photometric L1 plus soft Dice on the mask.

use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tape, Tensor, Var};
use crate::renderer::FrameResult;
use crate::{Error, Result};

/// Additive smoothing in both numerator and denominator of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, seg: 1.0 }
    }
}

/// Which pixels the photometric term averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum L1Region {
    #[default]
    Full,
    /// Only pixels where the target mask exceeds 0.5.
    Masked,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub dice: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub dice: Var,
}

impl LossVars {
    pub fn values<R: Real>(&self, t: &Tape<R>) -> LossTerms {
        let f = |v: Var| t.value(v).item().to_f64().unwrap_or(f64::NAN);
        LossTerms { total: f(self.total), l1: f(self.l1), dice: f(self.dice) }
    }
}

fn check(rgb: &[usize], mask: &[usize], target: &Tensor, target_mask: &Tensor) -> Result<()> {
    if rgb.len() != 3 || rgb[0] != 3 || target.shape() != rgb {
        return Err(Error::shape(format!("rgb {rgb:?} and target {:?} must both be [3, H, W]", target.shape())));
    }
    if mask != [1, rgb[1], rgb[2]] || target_mask.shape() != mask {
        return Err(Error::shape(format!("mask {mask:?} and target mask {:?} must be [1, H, W]", target_mask.shape())));
    }
    Ok(())
}

/// Loss graph for predicted `rgb` `[3, H, W]` and `mask` `[1, H, W]`.
pub fn loss_on_tape<R: Real>(
    t: &mut Tape<R>,
    rgb: Var,
    mask: Var,
    target: &Tensor,
    target_mask: &Tensor,
    w: LossWeights,
    region: L1Region,
) -> Result<LossVars> {
    check(t.shape(rgb), t.shape(mask), target, target_mask)?;
    let tgt = t.constant(target.cast());
    let diff = t.sub(rgb, tgt)?;
    let abs = t.abs(diff)?;
    let l1 = match region {
        L1Region::Full => t.mean(abs)?,
        L1Region::Masked => {
            let hw = target_mask.len();
            let m = Tensor::<R>::from_fn(target.shape().to_vec(), |i| if target_mask.data()[i % hw] > 0.5 { R::one() } else { R::zero() });
            let count = m.sum().to_f64().unwrap_or(0.0);
            let m = t.constant(m);
            let masked = t.mul(abs, m)?;
            let s = t.sum(masked)?;
            t.scale(s, R::of(if count > 0.0 { 1.0 / count } else { 0.0 }))?
        }
    };
    let tm = t.constant(target_mask.cast());
    let both = t.mul(mask, tm)?;
    let inter = t.sum(both)?;
    let sp = t.sum(mask)?;
    let st: f64 = target_mask.data().iter().map(|&x| x as f64).sum();
    let num = t.scale(inter, R::of(2.0))?;
    let num = t.add_scalar(num, R::of(DICE_SMOOTH))?;
    let den = t.add_scalar(sp, R::of(st + DICE_SMOOTH))?;
    let ratio = t.div(num, den)?;
    let neg = t.scale(ratio, R::of(-1.0))?;
    let dice = t.add_scalar(neg, R::one())?;
    let a = t.scale(l1, R::of(w.l1))?;
    let b = t.scale(dice, R::of(w.seg))?;
    let total = t.add(a, b)?;
    Ok(LossVars { total, l1, dice })
}

/// Loss of a finished frame against its target.
pub fn loss_total(pred: &FrameResult, target: &Tensor, target_mask: &Tensor, w: LossWeights) -> Result<LossTerms> {
    let mut t = Tape::<f64>::new();
    let rgb = t.constant(pred.rgb.cast());
    let mask = t.constant(pred.mask.cast());
    let vars = loss_on_tape(&mut t, rgb, mask, target, target_mask, w, L1Region::Full)?;
    Ok(vars.values(&t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn frame(rgb: Tensor, mask: Tensor) -> FrameResult {
        FrameResult { rgb, mask, timing: BTreeMap::new() }
    }

    fn sample(seed: u64) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::uniform([3, 8, 8], -0.8, 0.8, &mut r);
        let mask = Tensor::from_fn([1, 8, 8], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        (img, mask)
    }

    #[test]
    fn perfect_prediction() {
        let (img, mask) = sample(1);
        let l = loss_total(&frame(img.clone(), mask.clone()), &img, &mask, LossWeights::default()).unwrap();
        assert_eq!(l.l1, 0.0);
        // With smoothing the Dice ratio is exactly one when P = T is binary.
        assert!(l.dice.abs() < 1e-12);
    }

    #[test]
    fn constant_offset() {
        let (img, mask) = sample(2);
        let l = loss_total(&frame(img.map(|x| x + 0.1), mask.clone()), &img, &mask, LossWeights::default()).unwrap();
        assert!((l.l1 - 0.1).abs() < 1e-6);
    }

    #[test]
    fn weighted_sum_and_dice_formula() {
        let (img, mask) = sample(3);
        let pred_mask = Tensor::full([1, 8, 8], 0.25);
        let pred = img.map(|x| x - 0.2);
        let w = LossWeights { l1: 2.0, seg: 0.5 };
        let l = loss_total(&frame(pred, pred_mask.clone()), &img, &mask, w).unwrap();
        let st: f64 = mask.data().iter().map(|&x| x as f64).sum();
        let inter: f64 = mask.data().iter().map(|&x| 0.25 * x as f64).sum();
        let dice = 1.0 - (2.0 * inter + 1.0) / (16.0 + st + 1.0);
        assert!((l.dice - dice).abs() < 1e-9);
        assert!((l.total - (2.0 * l.l1 + 0.5 * l.dice)).abs() < 1e-12);
        let unit = LossTerms { total: 0.2 + 0.1, l1: 0.2, dice: 0.1 };
        assert!((unit.l1 * LossWeights::default().l1 + unit.dice * LossWeights::default().seg - 0.3).abs() < 1e-12);
    }

    #[test]
    fn masked_region_ignores_background() {
        let (img, mask) = sample(4);
        let pred = Tensor::from_fn([3, 8, 8], |i| if mask.data()[i % 64] > 0.5 { img.data()[i] } else { 5.0 });
        let mut t = Tape::<f64>::new();
        let rgb = t.constant(pred.cast());
        let m = t.constant(mask.cast());
        let v = loss_on_tape(&mut t, rgb, m, &img, &mask, LossWeights::default(), L1Region::Masked).unwrap();
        assert_eq!(v.values(&t).l1, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let (img, mask) = sample(5);
        assert!(loss_total(&frame(img.clone(), mask.clone()), &img, &Tensor::zeros([1, 4, 4]), LossWeights::default()).is_err());
    }

    #[test]
    fn l1_is_pixel_permutation_invariant() {
        let (img, mask) = sample(6);
        let pred = sample(7).0;
        let base = loss_total(&frame(pred.clone(), mask.clone()), &img, &mask, LossWeights::default()).unwrap();
        let mut order: Vec<usize> = (0..64).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let perm = |x: &Tensor, c: usize| Tensor::from_fn([c, 8, 8], |i| x.data()[(i / 64) * 64 + order[i % 64]]);
        let l = loss_total(&frame(perm(&pred, 3), perm(&mask, 1)), &perm(&img, 3), &perm(&mask, 1), LossWeights::default())
            .unwrap();
        assert!((l.l1 - base.l1).abs() < 1e-12);
        assert!((l.dice - base.dice).abs() < 1e-12);
    }
}
