use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_on_tape, L1Region, LossWeights};
use super::metrics::{dice_coefficient, l1, psnr, ssim};
use super::optim::Adam;
use super::oracle::{oracle_render, synthetic_albedo, DEFAULT_LIGHT};
use crate::camera::CameraParams;
use crate::head_model::{AvatarParams, HeadModel, OffsetSpace};
use crate::numerics::{Tape, Tensor};
use crate::pipeline::{Network, SourceFrame};
use crate::rasterizer::{plan, SplatPlan};
use crate::weights::Weights;
use crate::{Error, Result};

/// Synthetic self-reenactment pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub pairs: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Standard deviation of identity coefficients.
    pub beta_std: f32,
    /// Half-range of expression coefficients.
    pub expr_range: f32,
    /// Half-range, in radians, of global and neck rotations.
    pub pose_range: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { pairs: 8, width: 64, height: 64, seed: 0, beta_std: 1.0, expr_range: 1.0, pose_range: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub source: AvatarParams,
    pub driving: AvatarParams,
    /// Identity colours `[N, 3]`.
    pub albedo: Tensor,
    pub source_image: Tensor,
    pub target_image: Tensor,
    pub target_mask: Tensor,
}

fn random_params(model: &HeadModel, beta: &[f32], cfg: &DatasetConfig, r: &mut ChaCha8Rng) -> AvatarParams {
    let mut p = AvatarParams::zeros(model);
    p.beta = beta.to_vec();
    p.phi.iter_mut().for_each(|x| *x = r.gen_range(-cfg.expr_range..=cfg.expr_range));
    let pr = cfg.pose_range;
    // Global yaw and pitch, neck yaw, jaw opening.
    let mut set = |i: usize, v: f32| {
        if i < p.theta.len() {
            p.theta[i] = v;
        }
    };
    set(0, r.gen_range(-pr..=pr) * 0.5);
    set(1, r.gen_range(-pr..=pr));
    set(4, r.gen_range(-pr..=pr) * 0.5);
    set(6, r.gen_range(0.0..=pr));
    p.camera = CameraParams {
        scale: r.gen_range(0.75..=0.85),
        tx: r.gen_range(-0.05..=0.05),
        ty: r.gen_range(-0.05..=0.05),
    };
    p
}

fn make_sample(model: &HeadModel, cfg: &DatasetConfig, index: usize) -> Result<ToySample> {
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
    let beta: Vec<f32> = (0..model.shape_dims()).map(|_| r.gen_range(-1.0f32..=1.0) * cfg.beta_std).collect();
    let source = random_params(model, &beta, cfg, &mut r);
    let driving = random_params(model, &beta, cfg, &mut r);
    let albedo = synthetic_albedo(model, r.gen());
    let (source_image, _) = oracle_render(model, &source, &albedo, cfg.width, cfg.height, DEFAULT_LIGHT)?;
    let (target_image, target_mask) = oracle_render(model, &driving, &albedo, cfg.width, cfg.height, DEFAULT_LIGHT)?;
    Ok(ToySample { source, driving, albedo, source_image, target_image, target_mask })
}

/// Deterministic per-sample generation; samples are built in parallel.
pub fn generate_dataset(model: &HeadModel, cfg: &DatasetConfig) -> Result<Vec<ToySample>> {
    if cfg.pairs == 0 {
        return Err(Error::Config("dataset needs at least one pair".into()));
    }
    (0..cfg.pairs).into_par_iter().map(|i| make_sample(model, cfg, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Samples per step; 0 means the whole set.
    pub batch_size: usize,
    pub loss: LossWeights,
    pub region: L1Region,
    /// Evaluate every this many steps (0 disables) to allow early stopping.
    pub eval_every: usize,
    /// Stop once mean PSNR and Dice both reach these values.
    pub stop_psnr: Option<f64>,
    pub stop_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-4,
            seed: 0,
            batch_size: 2,
            loss: LossWeights::default(),
            region: L1Region::Full,
            eval_every: 0,
            stop_psnr: None,
            stop_dice: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub dice: f64,
}

/// Mean quality over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Overlap of the binarised predicted mask with the target mask.
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub steps_run: usize,
    /// `(step, evaluation)` for each evaluation made.
    pub evaluations: Vec<(usize, Evaluation)>,
}

struct Prepared<'a> {
    sample: &'a ToySample,
    source: SourceFrame,
    plan: SplatPlan,
}

fn prepare<'a>(model: &HeadModel, sample: &'a ToySample) -> Result<Prepared<'a>> {
    let vertices = model.drive(&sample.source, OffsetSpace::Canonical)?;
    let source = SourceFrame { image: sample.source_image.clone(), vertices, camera: sample.source.camera };
    let driving = model.drive(&sample.driving, OffsetSpace::Canonical)?;
    let (h, w) = (sample.target_image.dim(1), sample.target_image.dim(2));
    let plan = plan(&driving, &sample.driving.camera, w, h)?;
    Ok(Prepared { sample, source, plan })
}

fn predict(net: &Network, model: &HeadModel, p: &Prepared) -> Result<(Tensor, Tensor)> {
    let mut t = Tape::<f32>::new();
    let b = net.weights.bind(&mut t, false);
    let (rgb, mask) = net.forward(&mut t, &b, model, &p.source, &p.plan)?;
    Ok((t.value(rgb).clone(), t.value(mask).clone()))
}

fn evaluate_prepared(net: &Network, model: &HeadModel, data: &[Prepared]) -> Result<Evaluation> {
    let mut acc = Evaluation { l1: 0.0, psnr: 0.0, ssim: 0.0, dice: 0.0 };
    for p in data {
        let (rgb, mask) = predict(net, model, p)?;
        let s = p.sample;
        acc.l1 += l1(&rgb, &s.target_image, None)?;
        acc.psnr += psnr(&rgb, &s.target_image)?;
        acc.ssim += ssim(&rgb, &s.target_image)?;
        acc.dice += dice_coefficient(&mask, &s.target_mask)?;
    }
    let n = data.len() as f64;
    Ok(Evaluation { l1: acc.l1 / n, psnr: acc.psnr / n, ssim: acc.ssim / n, dice: acc.dice / n })
}

/// Mean metrics of `net` over `data`.
pub fn evaluate(net: &Network, model: &HeadModel, data: &[ToySample]) -> Result<Evaluation> {
    let prepared = data.iter().map(|s| prepare(model, s)).collect::<Result<Vec<_>>>()?;
    evaluate_prepared(net, model, &prepared)
}

/// Adam on every transformer and renderer weight; the head model stays fixed.
/// `on_step` sees each record as it is produced.
pub fn train_toy(
    model: &HeadModel,
    net: &mut Network,
    data: &[ToySample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let prepared = data.iter().map(|s| prepare(model, s)).collect::<Result<Vec<_>>>()?;
    let n = prepared.len();
    let batch = if cfg.batch_size == 0 || cfg.batch_size >= n { n } else { cfg.batch_size };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport { records: Vec::new(), steps_run: 0, evaluations: Vec::new() };

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        if batch == n {
            picked.extend(0..n);
        } else {
            while picked.len() < batch {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picked.push(order[cursor]);
                cursor += 1;
            }
        }

        let mut grads: Weights = Weights::new();
        let mut rec = StepRecord { step, total: 0.0, l1: 0.0, dice: 0.0 };
        let inv = 1.0 / batch as f32;
        let mut tape = Tape::<f32>::new();
        for &i in &picked {
            let p = &prepared[i];
            tape.clear();
            let b = net.weights.bind(&mut tape, true);
            let (rgb, mask) = net.forward(&mut tape, &b, model, &p.source, &p.plan)?;
            let loss = loss_on_tape(&mut tape, rgb, mask, &p.sample.target_image, &p.sample.target_mask, cfg.loss, cfg.region)?;
            let terms = loss.values(&tape);
            if !terms.total.is_finite() {
                return Err(Error::Training { step, msg: format!("loss is {}", terms.total) });
            }
            rec.total += terms.total / batch as f64;
            rec.l1 += terms.l1 / batch as f64;
            rec.dice += terms.dice / batch as f64;
            let g = tape.backward(loss.total)?;
            for (name, &var) in b.iter() {
                let gv = g.wrt(var);
                match grads.get_mut(name) {
                    Ok(acc) => acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, &x)| *a += x * inv),
                    Err(_) => grads.insert(name.clone(), gv.map(|x| x * inv)),
                }
            }
        }
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::Training { step, msg: "non-finite gradient".into() });
        }
        opt.update(&mut net.weights, &grads)?;
        on_step(&rec);
        report.records.push(rec);
        report.steps_run = step + 1;

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let ev = evaluate_prepared(net, model, &prepared)?;
            report.evaluations.push((step + 1, ev));
            let psnr_ok = cfg.stop_psnr.is_some_and(|t| ev.psnr >= t);
            let dice_ok = cfg.stop_dice.is_none_or(|t| ev.dice >= t);
            if psnr_ok && dice_ok {
                break;
            }
        }
    }
    Ok(report)
}

/// Loss curve as CSV `step,total,l1,dice`.
pub fn write_loss_csv(records: &[StepRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,total,l1,dice")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.step, r.total, r.l1, r.dice)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head_model::{generate_synthetic_model, SyntheticConfig};
    use crate::renderer::RendererConfig;
    use crate::vertex_transformer::TransformerConfig;

    fn tiny() -> (HeadModel, Network) {
        let m = generate_synthetic_model(&SyntheticConfig { n_vertices: 400, n_coarse: 30, ..Default::default() }).unwrap();
        let t = TransformerConfig { width: 16, layers: 1, heads: 2, descriptor_dim: 4, ..TransformerConfig::toy() };
        let r = RendererConfig { depth_levels: 2, base_channels: 4, in_channels: 5 };
        let net = Network::init(&m, t, r, 3).unwrap();
        (m, net)
    }

    fn data(m: &HeadModel, pairs: usize) -> Vec<ToySample> {
        generate_dataset(m, &DatasetConfig { pairs, width: 32, height: 32, ..Default::default() }).unwrap()
    }

    #[test]
    fn dataset_is_reproducible_and_self_reenacting() {
        let (m, _) = tiny();
        let a = data(&m, 3);
        assert_eq!(a, data(&m, 3));
        for s in &a {
            assert_eq!(s.source.beta, s.driving.beta);
            assert!(s.target_mask.data().iter().any(|&x| x == 1.0));
            assert!(s.source_image.data().iter().all(|&x| (-1.0..=1.0).contains(&x)));
        }
        assert_ne!(a[0].target_image, a[1].target_image);
    }

    #[test]
    fn zero_rate_leaves_weights_untouched() {
        let (m, mut net) = tiny();
        let init = net.weights.clone();
        let cfg = TrainConfig { steps: 3, lr: 0.0, ..Default::default() };
        let rep = train_toy(&m, &mut net, &data(&m, 2), &cfg, |_| {}).unwrap();
        assert_eq!(rep.steps_run, 3);
        assert_eq!(net.weights, init);
    }

    #[test]
    fn one_step_moves_vertex_tokens_and_every_weight() {
        let (m, mut net) = tiny();
        let init = net.weights.clone();
        let cfg = TrainConfig { steps: 1, lr: 1e-4, ..Default::default() };
        train_toy(&m, &mut net, &data(&m, 2), &cfg, |_| {}).unwrap();
        for (name, w) in net.weights.iter() {
            assert!(w.max_abs_diff(init.get(name).unwrap()) > 0.0, "{name} did not change");
        }
    }

    #[test]
    fn loss_decreases_and_csv_is_written() {
        let (m, mut net) = tiny();
        let d = data(&m, 2);
        let cfg = TrainConfig { steps: 40, lr: 3e-3, ..Default::default() };
        let mut seen = 0;
        let rep = train_toy(&m, &mut net, &d, &cfg, |_| seen += 1).unwrap();
        assert_eq!(seen, 40);
        assert!(rep.records.last().unwrap().total < rep.records[0].total);
        let mut out = Vec::new();
        write_loss_csv(&rep.records, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,total,l1,dice\n0,"));
        assert_eq!(text.lines().count(), 41);
    }

    #[test]
    fn divergence_names_the_step() {
        let (m, mut net) = tiny();
        for (_, w) in net.weights.iter_mut() {
            *w = w.map(|_| f32::NAN);
        }
        let err = train_toy(&m, &mut net, &data(&m, 1), &TrainConfig { steps: 2, ..Default::default() }, |_| {});
        assert!(matches!(err, Err(Error::Training { step: 0, .. })));
        assert!(train_toy(&m, &mut net, &[], &TrainConfig::default(), |_| {}).is_err());
    }
}
