use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::head_model::{generate_synthetic_model, SyntheticConfig};
use crate::numerics::grad_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_model() -> &'static HeadModel {
    static M: OnceLock<HeadModel> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = SyntheticConfig { seed: 3, n_vertices: 120, n_coarse: 12, shape_dims: 2, expr_dims: 2, joints: 4 };
        generate_synthetic_model(&cfg).unwrap()
    })
}

fn small_cfg() -> TransformerConfig {
    TransformerConfig { width: 8, layers: 2, heads: 2, descriptor_dim: 4, uv_scale: 64.0, depth_scale: 64.0 }
}

fn const_bind(w: &Weights, t: &mut Tape<f32>) -> Bound {
    w.bind(t, false)
}

#[test]
fn sine_1d_cases() {
    let z = sine_encoding_1d::<f64>(&[0.0], 8).unwrap();
    assert_eq!(z.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let ps = [0.3, -7.25, 41.0, 1234.5];
    let e = sine_encoding_1d::<f64>(&ps, 16).unwrap();
    for (r, &p) in ps.iter().enumerate() {
        for i in 0..8 {
            // 10000^(-2i/d) written as exp(-(2i/d)·ln 10000).
            let w = (-(2.0 * i as f64 / 16.0) * 10000f64.ln()).exp();
            assert!((e.at(&[r, 2 * i]) - (p * w).sin()).abs() < 1e-6);
            assert!((e.at(&[r, 2 * i + 1]) - (p * w).cos()).abs() < 1e-6);
        }
    }
    let a = sine_encoding_1d::<f64>(&[0.7], 4).unwrap();
    let b = sine_encoding_1d::<f64>(&[0.7 + 2.0 * std::f64::consts::PI], 4).unwrap();
    assert!((a.at(&[0, 0]) - b.at(&[0, 0])).abs() < 1e-12);
    assert!(matches!(sine_encoding_1d::<f32>(&[0.0], 7), Err(Error::Config(_))));
}

#[test]
fn sine_2d_cases() {
    let u = [0.5, -3.0, 10.0];
    let v = [2.0, 0.25, -8.0];
    let e = sine_encoding_2d::<f32>(&u, &v, 16).unwrap();
    let eu = sine_encoding_1d::<f32>(&u, 8).unwrap();
    let ev = sine_encoding_1d::<f32>(&v, 8).unwrap();
    for r in 0..3 {
        assert_eq!(&e.row(r)[..8], eu.row(r));
        let mut cat = eu.row(r).to_vec();
        cat.extend_from_slice(ev.row(r));
        assert_eq!(e.row(r), cat.as_slice());
    }
    let z = sine_encoding_2d::<f32>(&[0.0], &[0.0], 8).unwrap();
    assert_eq!(z.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!(matches!(sine_encoding_2d::<f32>(&[0.0], &[0.0], 6), Err(Error::Config(_))));
}

#[test]
fn encoder_paper_shape_zero_and_determinism() {
    let cfg = TransformerConfig::paper();
    let w = init_weights(&cfg, 314, 2, &mut rng(0)).unwrap();
    let img = Tensor::randn([3, 256, 256], 0.5, &mut rng(1));
    let run = |img: &Tensor| {
        let mut t = Tape::new();
        let b = const_bind(&w, &mut t);
        let x = t.constant(img.clone());
        let y = encode_image(&mut t, &b, x).unwrap();
        t.value(y).clone()
    };
    let a = run(&img);
    assert_eq!(a.shape(), [256, 128]);
    assert_eq!(a, run(&img));
    let zero = run(&Tensor::zeros([3, 256, 256]));
    assert!(zero.data().iter().all(|&v| v == 0.0));

    let mut t = Tape::new();
    let b = const_bind(&w, &mut t);
    let x = t.constant(Tensor::zeros([3, 40, 32]));
    assert!(matches!(encode_image(&mut t, &b, x), Err(Error::Shape(_))));
}

#[test]
fn token_layout_and_encodings() {
    let m = small_model();
    let cfg = small_cfg();
    let w = init_weights(&cfg, m.n_coarse(), 2, &mut rng(2)).unwrap();
    let coarse = m.coarse_vertices(&m.template).unwrap();
    let cam = CameraParams::default();
    let mut t = Tape::new();
    let b = const_bind(&w, &mut t);
    let img = t.constant(Tensor::randn([4, 8], 1.0, &mut rng(3)));
    let off = build_tokens(&mut t, &b, &cfg, &coarse, &cam, img, (2, 2), false).unwrap();
    assert_eq!((off.vertex_count, off.image_count), (12, 4));
    let tok = t.value(off.tokens).clone();
    assert_eq!(tok.shape(), [16, 8]);
    assert_eq!(&tok.data()[..12 * 8], w.get("vertex_tokens").unwrap().data());
    assert_eq!(&tok.data()[12 * 8..], t.value(img).data());

    // Two coarse vertices at the same place get the same additive encoding.
    let mut dup = coarse.clone();
    let first = dup.row(0).to_vec();
    dup.data_mut()[3..6].copy_from_slice(&first);
    let e = vertex_encoding::<f32>(&cfg, &dup, &cam).unwrap();
    assert_eq!(e.row(0), e.row(1));
    let on = build_tokens(&mut t, &b, &cfg, &dup, &cam, img, (2, 2), true).unwrap();
    let tok = t.value(on.tokens);
    let xv = w.get("vertex_tokens").unwrap();
    for r in 0..2 {
        for c in 0..8 {
            assert_eq!(tok.at(&[r, c]), xv.at(&[r, c]) + e.at(&[0, c]));
        }
    }
    assert!(build_tokens(&mut t, &b, &cfg, &m.template, &cam, img, (2, 2), true).is_err());
}

#[test]
fn paper_sequence_is_570_by_128() {
    let m = generate_synthetic_model(&SyntheticConfig::with_seed(1)).unwrap();
    let cfg = TransformerConfig::paper();
    let w = init_weights(&cfg, 314, 2, &mut rng(4)).unwrap();
    let mut t = Tape::new();
    let b = const_bind(&w, &mut t);
    let img = t.constant(Tensor::zeros([256, 128]));
    let coarse = m.coarse_vertices(&m.template).unwrap();
    let seq = build_tokens(&mut t, &b, &cfg, &coarse, &CameraParams::default(), img, (16, 16), true).unwrap();
    assert_eq!(t.shape(seq.tokens), [570, 128]);
}

/// Random attention weights and biases for width `d`.
fn attention_weights(d: usize, seed: u64) -> Weights<f64> {
    let mut w = Weights::new();
    let mut r = rng(seed);
    for p in ["q", "k", "v", "o"] {
        w.insert(format!("a.{p}.w"), Tensor::randn([d, d], 0.7, &mut r));
        w.insert(format!("a.{p}.b"), Tensor::randn([d], 0.1, &mut r));
    }
    w
}

fn lin_oracle(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (i, o) = (w.dim(0), w.dim(1));
    (0..o).map(|c| b.data()[c] + (0..i).map(|k| x[k] * w.at(&[k, c])).sum::<f64>()).collect()
}

#[test]
fn singleton_attention_is_output_of_value() {
    let w = attention_weights(6, 5);
    let x = Tensor::<f64>::randn([1, 6], 1.0, &mut rng(6));
    let mut t = Tape::new();
    let b = w.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = attention(&mut t, &b, "a", 3, xv).unwrap();
    let v = lin_oracle(x.data(), w.get("a.v.w").unwrap(), w.get("a.v.b").unwrap());
    let o = lin_oracle(&v, w.get("a.o.w").unwrap(), w.get("a.o.b").unwrap());
    for c in 0..6 {
        assert!((t.value(y).data()[c] - o[c]).abs() < 1e-12);
    }
}

#[test]
fn identical_keys_average_the_values() {
    // Zero key weights make every key equal to the key bias.
    let mut w = attention_weights(4, 7);
    *w.get_mut("a.k.w").unwrap() = Tensor::zeros([4, 4]);
    *w.get_mut("a.o.w").unwrap() = Tensor::eye(4);
    *w.get_mut("a.o.b").unwrap() = Tensor::zeros([4]);
    let x = Tensor::<f64>::randn([5, 4], 1.0, &mut rng(8));
    let mut t = Tape::new();
    let b = w.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = attention(&mut t, &b, "a", 2, xv).unwrap();
    let vals: Vec<Vec<f64>> = (0..5).map(|r| lin_oracle(x.row(r), w.get("a.v.w").unwrap(), w.get("a.v.b").unwrap())).collect();
    for q in 0..5 {
        for c in 0..4 {
            let mean = vals.iter().map(|v| v[c]).sum::<f64>() / 5.0;
            assert!((t.value(y).at(&[q, c]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn two_token_attention_matches_explicit_formula() {
    let (d, heads) = (4, 2);
    let w = attention_weights(d, 9);
    let x = Tensor::<f64>::randn([2, d], 1.0, &mut rng(10));
    let mut t = Tape::new();
    let b = w.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = attention(&mut t, &b, "a", heads, xv).unwrap();
    let proj = |name: &str| -> Vec<Vec<f64>> {
        (0..2).map(|r| lin_oracle(x.row(r), w.get(&format!("a.{name}.w")).unwrap(), w.get(&format!("a.{name}.b")).unwrap())).collect()
    };
    let (q, k, v) = (proj("q"), proj("k"), proj("v"));
    let hd = d / heads;
    for i in 0..2 {
        let mut cat = vec![0.0; d];
        for h in 0..heads {
            let s: Vec<f64> = (0..2)
                .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            for c in 0..hd {
                cat[h * hd + c] = (s[0].exp() * v[0][h * hd + c] + s[1].exp() * v[1][h * hd + c]) / z;
            }
        }
        let o = lin_oracle(&cat, w.get("a.o.w").unwrap(), w.get("a.o.b").unwrap());
        for c in 0..d {
            assert!((t.value(y).at(&[i, c]) - o[c]).abs() < 1e-12);
        }
    }
}

fn run_forward<R: Real>(w: &Weights<R>, cfg: &TransformerConfig, image_tokens: &Tensor<R>, perm: Option<&[usize]>) -> Tensor<R> {
    let m = small_model();
    let coarse = m.coarse_vertices(&m.template).unwrap();
    let mut t = Tape::new();
    let b = w.bind(&mut t, false);
    let toks = match perm {
        Some(p) => {
            let c = image_tokens.dim(1);
            let data = p.iter().flat_map(|&i| image_tokens.row(i).to_vec()).collect();
            Tensor::new([p.len(), c], data).unwrap()
        }
        None => image_tokens.clone(),
    };
    let it = t.constant(toks);
    let seq = build_tokens(&mut t, &b, cfg, &coarse, &CameraParams::default(), it, (2, 3), false).unwrap();
    let y = transformer_forward(&mut t, &b, cfg, &seq).unwrap();
    t.value(y).clone()
}

#[test]
fn zeroing_vertex_tokens_changes_outputs() {
    let cfg = small_cfg();
    let w = init_weights(&cfg, 12, 2, &mut rng(11)).unwrap();
    let img = Tensor::randn([6, 8], 1.0, &mut rng(12));
    let a = run_forward(&w, &cfg, &img, None);
    let mut z = w.clone();
    *z.get_mut("vertex_tokens").unwrap() = Tensor::zeros([12, 8]);
    assert!(a.max_abs_diff(&run_forward(&z, &cfg, &img, None)) > 1e-3);
}

#[test]
fn transformer_gradient_wrt_vertex_tokens() {
    let m = small_model();
    let cfg = TransformerConfig { width: 8, layers: 1, heads: 2, descriptor_dim: 4, uv_scale: 64.0, depth_scale: 64.0 };
    let w = init_weights(&cfg, 4, 0, &mut rng(13)).unwrap().cast::<f64>();
    let coarse = Tensor::new([4, 3], m.template.data()[..12].to_vec()).unwrap();
    for seed in 0..10 {
        let img = Tensor::<f64>::randn([4, 8], 1.0, &mut rng(100 + seed));
        let xv = Tensor::<f64>::randn([4, 8], 1.0, &mut rng(200 + seed));
        let contract = Tensor::<f64>::randn([4, 8], 1.0, &mut rng(300 + seed));
        let report = grad_check(
            |t, v| {
                let mut w = w.clone();
                *w.get_mut("vertex_tokens")? = t.value(v[0]).clone();
                let b = w.bind(t, false);
                // Route the checked leaf itself in place of the bound copy.
                let it = t.constant(img.clone());
                let enc = t.constant(vertex_encoding(&cfg, &coarse, &CameraParams::default())?);
                let vt = t.add(v[0], enc)?;
                let eg = t.constant(grid_encoding(&cfg, 2, 2)?);
                let it = t.add(it, eg)?;
                let tokens = t.concat(&[vt, it], 0)?;
                let seq = TokenSequence { tokens, vertex_count: 4, image_count: 4 };
                let y = transformer_forward(t, &b, &cfg, &seq)?;
                let c = t.constant(contract.clone());
                let p = t.mul(y, c)?;
                t.sum(p)
            },
            &[xv],
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "seed {seed}: {report:?}");
    }
}

#[test]
fn descriptor_head_cases() {
    let mut w = Weights::<f32>::new();
    w.insert("head.w", Tensor::zeros([128, 32]));
    w.insert("head.b", Tensor::zeros([32]));
    let states = Tensor::randn([5, 128], 1.0, &mut rng(14));
    let apply = |w: &Weights| {
        let mut t = Tape::new();
        let b = w.bind(&mut t, false);
        let s = t.constant(states.clone());
        let y = project_descriptors(&mut t, &b, s).unwrap();
        t.value(y).clone()
    };
    assert!(apply(&w).data().iter().all(|&v| v == 0.0));
    let sel = Tensor::from_fn([128, 32], |i| if i / 32 == i % 32 { 1.0 } else { 0.0 });
    *w.get_mut("head.w").unwrap() = sel;
    let y = apply(&w);
    for r in 0..5 {
        assert_eq!(y.row(r), &states.row(r)[..32]);
    }
    let hw = Tensor::randn([128, 32], 0.1, &mut rng(15));
    let hb = Tensor::randn([32], 0.1, &mut rng(16));
    *w.get_mut("head.w").unwrap() = hw.clone();
    *w.get_mut("head.b").unwrap() = hb.clone();
    let y = apply(&w);
    for r in 0..5 {
        let want = lin_oracle(&states.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>(), &hw.cast(), &hb.cast());
        for c in 0..32 {
            assert!((y.at(&[r, c]) as f64 - want[c]).abs() < 1e-5);
        }
    }
}

fn upsample(w: &Weights, m: &HeadModel, coarse: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let b = w.bind(&mut t, false);
    let c = t.constant(coarse.clone());
    let y = upsample_descriptors(&mut t, &b, m, c).unwrap();
    t.value(y).clone()
}

#[test]
fn upsample_cases() {
    let m = generate_synthetic_model(&SyntheticConfig::with_seed(2)).unwrap();
    let cfg = TransformerConfig::paper();
    let w = init_weights(&cfg, 314, m.upsample_chain.len(), &mut rng(17)).unwrap();
    let constant = Tensor::full([314, 32], 0.375);
    let y = upsample(&w, &m, &constant);
    assert_eq!(y.shape(), [5023, 32]);
    assert!(y.data().iter().all(|&v| (v - 0.375).abs() < 1e-6));

    let mut w2 = w.clone();
    let mut r = rng(18);
    for s in 0..m.upsample_chain.len() {
        *w2.get_mut(&format!("mix{s}.w")).unwrap() = Tensor::randn([32, 32], 0.2, &mut r);
        *w2.get_mut(&format!("mix{s}.b")).unwrap() = Tensor::randn([32], 0.2, &mut r);
    }
    let x = Tensor::randn([314, 32], 1.0, &mut r);
    let y = upsample(&w2, &m, &x);
    // Densified chain: alternate dense products and affine mixers in f64.
    let mut cur: Vec<Vec<f64>> = (0..314).map(|i| x.row(i).iter().map(|&v| v as f64).collect()).collect();
    for (s, mat) in m.upsample_chain.iter().enumerate() {
        let dense = mat.to_dense();
        let next: Vec<Vec<f64>> = (0..mat.rows())
            .map(|i| {
                let mut row = vec![0.0; 32];
                for (j, src) in cur.iter().enumerate() {
                    let a = dense.at(&[i, j]) as f64;
                    if a != 0.0 {
                        for c in 0..32 {
                            row[c] += a * src[c];
                        }
                    }
                }
                lin_oracle(&row, &w2.get(&format!("mix{s}.w")).unwrap().cast(), &w2.get(&format!("mix{s}.b")).unwrap().cast())
            })
            .collect();
        cur = next;
    }
    let worst = (0..5023).flat_map(|i| (0..32).map(move |c| (i, c))).map(|(i, c)| (y.at(&[i, c]) as f64 - cur[i][c]).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn pixel_aligned_cases() {
    let cam = CameraParams::default();
    let flat = Tensor::<f32>::full([3, 4, 4], 0.25);
    let verts = Tensor::new([3, 3], vec![0.1, 0.2, 0.3, -0.9, 0.95, -0.5, 3.0, -3.0, 0.0]).unwrap();
    let f = pixel_aligned_features(&flat, &verts, &cam).unwrap();
    assert!(f.data().iter().all(|&v| v == 0.25));

    let map = Tensor::<f32>::randn([2, 4, 4], 1.0, &mut rng(19));
    // Pixel centre (col 1, row 2) of a 4×4 map sits at u = -0.25, v = 0.25.
    let on = Tensor::new([1, 3], vec![-0.25, -0.25, 0.7]).unwrap();
    let f = pixel_aligned_features(&map, &on, &cam).unwrap();
    assert_eq!(f.data(), &[map.at(&[0, 2, 1]), map.at(&[1, 2, 1])]);

    let pair = Tensor::new([2, 3], vec![0.13, -0.41, 0.6, 0.13, -0.41, -0.6]).unwrap();
    let f = pixel_aligned_features(&map, &pair, &cam).unwrap();
    assert_eq!(f.row(0), f.row(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn image_token_order_is_irrelevant_without_encodings(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let cfg = small_cfg();
        let w = init_weights(&cfg, 12, 2, &mut rng(seed)).unwrap();
        let img = Tensor::randn([6, 8], 1.0, &mut rng(seed + 1));
        let a = run_forward(&w, &cfg, &img, None);
        let b = run_forward(&w, &cfg, &img, Some(&perm));
        prop_assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn identity_mixers_keep_coarse_range(seed in 0u64..1000) {
        let m = small_model();
        let w = init_weights(&small_cfg(), 12, m.upsample_chain.len(), &mut rng(seed)).unwrap();
        let x = Tensor::randn([12, 4], 1.0, &mut rng(seed + 7));
        let y = upsample(&w, m, &x);
        for c in 0..4 {
            let col = |t: &Tensor, n: usize| (0..n).map(move |i| t.at(&[i, c])).collect::<Vec<f32>>();
            let (lo, hi) = col(&x, 12).iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            for v in col(&y, m.n_vertices()) {
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }
}
