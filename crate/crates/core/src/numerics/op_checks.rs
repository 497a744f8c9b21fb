//! Seeded gradient checks for every differentiable tape operation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, Activation, GradCheckReport, SparseMatrix, Tape, Tensor, Var, NO_SOURCE};
use crate::Result;

type Case = fn(u64, f64) -> Result<GradCheckReport>;

/// One named operation check.
#[derive(Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    pub run: Case,
}

/// Outcome of all seeded cases for one operation.
#[derive(Clone, Debug, serde::Serialize)]
pub struct OpSummary {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Contract the output against a fixed random weight so every element matters.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(t.shape(y).to_vec(), 1.0, &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.5..2.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn unary(seed: u64, tol: f64, x: Tensor<f64>, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check(
        |t, v| {
            let y = f(t, v[0])?;
            weighted_sum(t, y, seed)
        },
        &[x],
        tol,
    )
}

fn binary(
    seed: u64,
    tol: f64,
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check(
        |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted_sum(t, y, seed)
        },
        &[a, b],
        tol,
    )
}

fn act(kind: Activation) -> impl Fn(u64, f64) -> Result<GradCheckReport> {
    move |seed, tol| {
        let x = Tensor::randn([3, 4], 1.5, &mut rng(seed));
        grad_check(
            move |t, v| {
                let y = t.activation(v[0], kind)?;
                weighted_sum(t, y, seed)
            },
            &[x],
            tol,
        )
    }
}

pub fn registry() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "matmul",
            run: |s, tol| {
                let mut r = rng(s);
                let a = Tensor::randn([3, 4], 1.0, &mut r);
                let b = Tensor::randn([4, 2], 1.0, &mut r);
                binary(s, tol, a, b, |t, a, b| t.matmul(a, b))
            },
        },
        OpCheck {
            name: "add",
            run: |s, tol| {
                let mut r = rng(s);
                let a = Tensor::randn([2, 3], 1.0, &mut r);
                let b = Tensor::randn([2, 3], 1.0, &mut r);
                binary(s, tol, a, b, |t, a, b| t.add(a, b))
            },
        },
        OpCheck {
            name: "sub",
            run: |s, tol| {
                let mut r = rng(s);
                let a = Tensor::randn([2, 3], 1.0, &mut r);
                let b = Tensor::randn([2, 3], 1.0, &mut r);
                binary(s, tol, a, b, |t, a, b| t.sub(a, b))
            },
        },
        OpCheck {
            name: "mul",
            run: |s, tol| {
                let mut r = rng(s);
                let a = Tensor::randn([2, 3], 1.0, &mut r);
                let b = Tensor::randn([2, 3], 1.0, &mut r);
                binary(s, tol, a, b, |t, a, b| t.mul(a, b))
            },
        },
        OpCheck {
            name: "div",
            run: |s, tol| {
                let mut r = rng(s);
                let a = Tensor::randn([2, 3], 1.0, &mut r);
                let b = away_from_zero(&[2, 3], &mut r);
                binary(s, tol, a, b, |t, a, b| t.div(a, b))
            },
        },
        OpCheck {
            name: "add_bias",
            run: |s, tol| {
                let mut r = rng(s);
                let a = Tensor::randn([3, 4], 1.0, &mut r);
                let b = Tensor::randn([4], 1.0, &mut r);
                binary(s, tol, a, b, |t, a, b| t.add_bias(a, b))
            },
        },
        OpCheck {
            name: "scale",
            run: |s, tol| unary(s, tol, Tensor::randn([5], 1.0, &mut rng(s)), |t, x| t.scale(x, -1.7)),
        },
        OpCheck {
            name: "add_scalar",
            run: |s, tol| unary(s, tol, Tensor::randn([5], 1.0, &mut rng(s)), |t, x| t.add_scalar(x, 0.3)),
        },
        OpCheck { name: "abs", run: |s, tol| unary(s, tol, away_from_zero(&[6], &mut rng(s)), |t, x| t.abs(x)) },
        OpCheck {
            name: "ln",
            run: |s, tol| unary(s, tol, Tensor::uniform([6], 0.3, 3.0, &mut rng(s)), |t, x| t.ln(x)),
        },
        OpCheck { name: "relu", run: |s, tol| act(Activation::Relu)(s, tol) },
        OpCheck { name: "gelu", run: |s, tol| act(Activation::Gelu)(s, tol) },
        OpCheck { name: "tanh", run: |s, tol| act(Activation::Tanh)(s, tol) },
        OpCheck { name: "sigmoid", run: |s, tol| act(Activation::Sigmoid)(s, tol) },
        OpCheck {
            name: "softmax",
            run: |s, tol| unary(s, tol, Tensor::randn([3, 5], 2.0, &mut rng(s)), |t, x| t.softmax(x)),
        },
        OpCheck {
            name: "layer_norm",
            run: |s, tol| {
                let mut r = rng(s);
                let x = Tensor::randn([3, 6], 2.0, &mut r);
                let g = Tensor::randn([6], 1.0, &mut r);
                let b = Tensor::randn([6], 1.0, &mut r);
                grad_check(
                    |t, v| {
                        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                        weighted_sum(t, y, s)
                    },
                    &[x, g, b],
                    tol,
                )
            },
        },
        OpCheck {
            name: "transpose",
            run: |s, tol| unary(s, tol, Tensor::randn([3, 4], 1.0, &mut rng(s)), |t, x| t.transpose(x)),
        },
        OpCheck {
            name: "reshape",
            run: |s, tol| unary(s, tol, Tensor::randn([2, 6], 1.0, &mut rng(s)), |t, x| t.reshape(x, &[3, 4])),
        },
        OpCheck {
            name: "concat",
            run: |s, tol| {
                let mut r = rng(s);
                let a = Tensor::randn([2, 3, 2], 1.0, &mut r);
                let b = Tensor::randn([2, 1, 2], 1.0, &mut r);
                binary(s, tol, a, b, |t, a, b| t.concat(&[a, b, a], 1))
            },
        },
        OpCheck {
            name: "slice",
            run: |s, tol| unary(s, tol, Tensor::randn([3, 5], 1.0, &mut rng(s)), |t, x| t.slice(x, 1, 1, 3)),
        },
        OpCheck {
            name: "conv2d",
            run: |s, tol| {
                let mut r = rng(s);
                let x = Tensor::randn([2, 5, 5], 1.0, &mut r);
                let w = Tensor::randn([3, 2, 3, 3], 0.5, &mut r);
                let b = Tensor::randn([3], 1.0, &mut r);
                grad_check(
                    |t, v| {
                        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                        weighted_sum(t, y, s)
                    },
                    &[x, w, b],
                    tol,
                )
            },
        },
        OpCheck {
            name: "conv2d_stride2",
            run: |s, tol| {
                let mut r = rng(s);
                let x = Tensor::randn([2, 6, 6], 1.0, &mut r);
                let w = Tensor::randn([2, 2, 4, 4], 0.5, &mut r);
                binary(s, tol, x, w, |t, x, w| t.conv2d(x, w, None, 2, 1))
            },
        },
        OpCheck {
            name: "upsample2x",
            run: |s, tol| unary(s, tol, Tensor::randn([2, 2, 3], 1.0, &mut rng(s)), |t, x| t.upsample2x(x)),
        },
        OpCheck {
            name: "sparse_matmul",
            run: |s, tol| {
                let mut r = rng(s);
                let trip: Vec<_> = (0..7).map(|i| (i % 4, r.gen_range(0..3), r.gen_range(0.0..1.0f32))).collect();
                let m = Arc::new(SparseMatrix::from_triplets(4, 3, &trip)?);
                let x = Tensor::<f64>::randn([3, 2], 1.0, &mut r);
                grad_check(
                    |t, v| {
                        let y = t.sparse_matmul(m.clone(), v[0])?;
                        weighted_sum(t, y, s)
                    },
                    &[x],
                    tol,
                )
            },
        },
        OpCheck {
            name: "gather",
            run: |s, tol| {
                let mut r = rng(s);
                let index: Arc<[u32]> =
                    (0..9).map(|_| if r.gen_bool(0.3) { NO_SOURCE } else { r.gen_range(0..4) }).collect();
                let x = Tensor::<f64>::randn([4, 3], 1.0, &mut r);
                grad_check(
                    |t, v| {
                        let y = t.gather_rows_planar(v[0], index.clone(), 0.25)?;
                        weighted_sum(t, y, s)
                    },
                    &[x],
                    tol,
                )
            },
        },
        OpCheck {
            name: "sum",
            run: |s, tol| {
                let x = Tensor::<f64>::randn([2, 3], 1.0, &mut rng(s));
                grad_check(|t, v| t.sum(v[0]), &[x], tol)
            },
        },
        OpCheck {
            name: "mean",
            run: |s, tol| {
                let x = Tensor::<f64>::randn([2, 3], 1.0, &mut rng(s));
                grad_check(
                    |t, v| {
                        let sq = t.mul(v[0], v[0])?;
                        t.mean(sq)
                    },
                    &[x],
                    tol,
                )
            },
        },
    ]
}

/// Run `cases` seeded checks of one operation.
pub fn run_check(check: &OpCheck, cases: u64, rel_tol: f64) -> Result<OpSummary> {
    let mut summary = OpSummary { name: check.name.to_string(), cases: 0, max_rel_err: 0.0, pass: true };
    for seed in 0..cases {
        let r = (check.run)(seed, rel_tol)?;
        summary.cases += 1;
        summary.max_rel_err = summary.max_rel_err.max(r.max_rel_err);
        summary.pass &= r.pass;
    }
    Ok(summary)
}
