//! Finite-difference verification of tape gradients.

use super::{Real, Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// (input index, element index) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub elements_checked: usize,
}

/// Compare tape gradients of the scalar `f(inputs)` against central differences.
///
/// The step is [`Real::FD_STEP`] (1e-3 for `f32`, 1e-5 for `f64`). Each
/// element's error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`
/// with the precision's [`Real::GRAD_FLOOR`].
pub fn grad_check<R, F>(f: F, inputs: &[Tensor<R>], rel_tol: f64) -> Result<GradCheckReport>
where
    R: Real,
    F: Fn(&mut Tape<R>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<R>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<R>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.value(out).item().to_f64().unwrap_or(f64::NAN))
    };

    let h = R::FD_STEP;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, pass: true, worst: None, elements_checked: 0 };
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + R::of(h);
            let up = eval(&work)?;
            work[ti].data_mut()[e] = orig - R::of(h);
            let down = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[e].to_f64().unwrap_or(f64::NAN);
            let denom = a.abs().max(numeric.abs()).max(R::GRAD_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.elements_checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((ti, e));
            }
        }
    }
    report.pass = report.max_rel_err <= rel_tol;
    Ok(report)
}
