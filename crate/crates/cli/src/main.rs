use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use avatar_core::bench::run_bench;
use avatar_core::head_model::{generate_synthetic_model, load_model, save_model, AvatarParams, HeadModel, OffsetSpace, SyntheticConfig};
use avatar_core::numerics::op_checks::{registry, run_check};
use avatar_core::params::{parse_params, parse_params_jsonl};
use avatar_core::pipeline::{pipeline_grad_check, Avatar, FrameRequest, Network, RenderMode};
use avatar_core::training::{evaluate, generate_dataset, train_toy, write_loss_csv, DatasetConfig, TrainConfig};
use avatar_service::ServiceConfig;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "avatar", version, about = "Controllable head avatars from a parametric mesh")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic head model container.
    GenModel {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5023)]
        vertices: usize,
        #[arg(long, default_value_t = 314)]
        coarse: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one frame to PNG.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        /// Parameter JSON file; zero parameters when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Source parameter JSON for descriptor modes.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long, default_value = "depth")]
        mode: RenderMode,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one frame per JSONL line plus a manifest.
    Animate {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "depth")]
        mode: RenderMode,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Train the toy network against the reference shader.
    TrainToy {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Samples per step (0 = all pairs).
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Evaluate every N steps and stop early once the targets are met (0 = never).
        #[arg(long, default_value_t = 0)]
        eval_every: usize,
        #[arg(long, default_value_t = 28.0)]
        target_psnr: f64,
        #[arg(long, default_value_t = 0.95)]
        target_dice: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Operation name, `pipeline`, or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = 10)]
        cases: u64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Per-stage timings as JSON.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Weights; the paper-width network with seeded weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
    /// HTTP and WebSocket render service.
    Serve {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 128)]
        frame_size: usize,
        #[arg(long, default_value_t = 512)]
        max_frame_size: usize,
        #[arg(long, default_value = "depth")]
        mode: RenderMode,
    },
}

#[derive(Args)]
struct SceneArgs {
    /// Model container; the default synthetic model when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Network weights; seeded toy weights when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "canonical")]
    offset_space: OffsetSpace,
}

type CliResult<T = ()> = Result<T, String>;

fn with_path<T>(path: &Path, r: avatar_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn model(path: &Option<PathBuf>) -> CliResult<HeadModel> {
    match path {
        Some(p) => with_path(p, load_model(p)),
        None => generate_synthetic_model(&SyntheticConfig::default()).map_err(|e| e.to_string()),
    }
}

fn network(model: &HeadModel, path: &Option<PathBuf>, fallback: fn(&HeadModel, u64) -> avatar_core::Result<Network>) -> CliResult<Network> {
    let net = match path {
        Some(p) => with_path(p, Network::load(p))?,
        None => fallback(model, 0).map_err(|e| e.to_string())?,
    };
    net.check_model(model).map_err(|e| match path {
        Some(p) => format!("{}: {e}", p.display()),
        None => e.to_string(),
    })?;
    Ok(net)
}

fn avatar(scene: &SceneArgs) -> CliResult<Avatar> {
    let m = model(&scene.model)?;
    let net = network(&m, &scene.weights, Network::toy)?;
    Avatar::new(m, net).map_err(|e| e.to_string())
}

fn load_params(path: &Path, m: &HeadModel) -> CliResult<AvatarParams> {
    with_path(path, parse_params(&read_text(path)?, m))
}

fn run(cli: Cli) -> CliResult {
    match cli.cmd {
        Command::GenModel { seed, vertices, coarse, out } => {
            let cfg = SyntheticConfig { seed, n_vertices: vertices, n_coarse: coarse, ..Default::default() };
            let m = generate_synthetic_model(&cfg).map_err(|e| e.to_string())?;
            with_path(&out, save_model(&m, &out))?;
            log::info!("wrote {} ({} vertices)", out.display(), m.n_vertices());
        }
        Command::Render { scene, params, source, mode, size, out } => {
            let a = avatar(&scene)?;
            let p = match &params {
                Some(path) => load_params(path, &a.model)?,
                None => AvatarParams::zeros(&a.model),
            };
            let source = source.as_deref().map(|s| load_params(s, &a.model)).transpose()?;
            let req = FrameRequest { params: p, source, mode, width: size, height: size, space: scene.offset_space };
            let frame = a.render(&req).map_err(|e| e.to_string())?;
            let png = frame.image.encode_png().map_err(|e| e.to_string())?;
            write_bytes(&out, &png)?;
        }
        Command::Animate { scene, params, out_dir, mode, size } => {
            let a = avatar(&scene)?;
            let seq = with_path(&params, parse_params_jsonl(&read_text(&params)?, &a.model))?;
            let mut frames = Vec::with_capacity(seq.len());
            let mut pngs = Vec::with_capacity(seq.len());
            for (i, p) in seq.into_iter().enumerate() {
                let req = FrameRequest { params: p, source: None, mode, width: size, height: size, space: scene.offset_space };
                let f = a.render(&req).map_err(|e| format!("frame {i}: {e}"))?;
                pngs.push(f.image.encode_png().map_err(|e| e.to_string())?);
                frames.push(json!({ "index": i, "file": format!("frame_{i:06}.png"), "timing_ms": f.timing }));
            }
            fs::create_dir_all(&out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
            for (i, png) in pngs.iter().enumerate() {
                write_bytes(&out_dir.join(format!("frame_{i:06}.png")), png)?;
            }
            let manifest = json!({ "mode": mode.name(), "size": size, "frames": frames });
            write_bytes(&out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
        }
        Command::TrainToy { model: mpath, steps, lr, seed, pairs, size, batch, eval_every, target_psnr, target_dice, out, curve } => {
            let m = model(&mpath)?;
            let data = generate_dataset(&m, &DatasetConfig { pairs, width: size, height: size, seed, ..Default::default() })
                .map_err(|e| e.to_string())?;
            let mut net = Network::toy(&m, seed).map_err(|e| e.to_string())?;
            let stop = (eval_every > 0).then_some(());
            let cfg = TrainConfig {
                steps,
                lr,
                seed,
                batch_size: batch,
                eval_every,
                stop_psnr: stop.map(|_| target_psnr),
                stop_dice: stop.map(|_| target_dice),
                ..Default::default()
            };
            let report = train_toy(&m, &mut net, &data, &cfg, |r| {
                if r.step % 100 == 0 {
                    log::info!("step {} total {:.5} l1 {:.5} dice {:.5}", r.step, r.total, r.l1, r.dice);
                }
            })
            .map_err(|e| e.to_string())?;
            with_path(&out, net.save(&out))?;
            let mut csv = Vec::new();
            write_loss_csv(&report.records, &mut csv).map_err(|e| e.to_string())?;
            write_bytes(&curve, &csv)?;
            let eval = evaluate(&net, &m, &data).map_err(|e| e.to_string())?;
            println!("{}", json!({ "steps_run": report.steps_run, "evaluation": eval }));
        }
        Command::Gradcheck { op, cases, tol } => {
            let mut rows = Vec::new();
            for check in registry().iter().filter(|c| op == "all" || op == c.name) {
                let s = run_check(check, cases, tol).map_err(|e| e.to_string())?;
                rows.push((s.name, s.max_rel_err, s.pass));
            }
            if op == "all" || op == "pipeline" {
                let (mut worst, mut pass) = (0.0f64, true);
                for seed in 0..cases {
                    let r = pipeline_grad_check(seed, tol).map_err(|e| e.to_string())?;
                    worst = worst.max(r.max_rel_err);
                    pass &= r.pass;
                }
                rows.push(("pipeline".into(), worst, pass));
            }
            if rows.is_empty() {
                return Err(format!("unknown op `{op}`"));
            }
            for (name, err, pass) in &rows {
                println!("{name:<16} max_rel_err {err:.3e}  {}", if *pass { "PASS" } else { "FAIL" });
            }
            if rows.iter().any(|r| !r.2) {
                return Err("gradient check failed".into());
            }
        }
        Command::Bench { model: mpath, weights, size, iters } => {
            let m = model(&mpath)?;
            let net = network(&m, &weights, Network::paper)?;
            let a = Avatar::new(m, net).map_err(|e| e.to_string())?;
            let p = AvatarParams::zeros(&a.model);
            let report = run_bench(&a, &p, size, iters).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
        }
        Command::Serve { scene, port, frame_size, max_frame_size, mode } => {
            let a = Arc::new(avatar(&scene)?);
            let cfg = ServiceConfig { port, frame_size, max_frame_size, default_mode: mode };
            let rt = runtime()?;
            rt.block_on(avatar_service::run(a, cfg)).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn threads() -> Option<usize> {
    std::env::var("CVTHEAD_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0)
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    let mut b = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads() {
        b.worker_threads(n);
    }
    b.enable_all().build().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::new().parse_filters(&std::env::var("CVTHEAD_LOG").unwrap_or_else(|_| "warn".into())).init();
    if let Some(n) = threads() {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
