//! End-to-end frame rendering: parameters to PNG-ready images.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{project_all, CameraParams};
use crate::head_model::{generate_synthetic_model, AvatarParams, HeadModel, OffsetSpace, SyntheticConfig};
use crate::imaging::Image8;
use crate::numerics::{grad_check, load_container, save_container, GradCheckReport, Real, Tape, Tensor, TensorMap, Var};
use crate::rasterizer::{self, plan_depth_view, splat_view, SplatPlan};
use crate::renderer::{self, RendererConfig};
use crate::training::oracle::{oracle_render, synthetic_albedo, DEFAULT_LIGHT};
use crate::vertex_transformer::{self, DescriptorInputs, TransformerConfig};
use crate::weights::{Bound, Weights};
use crate::{Error, Result};

const TRANSFORMER_KEY: &str = "config.transformer";
const RENDERER_KEY: &str = "config.renderer";

/// Transformer and renderer weights with their configurations.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub transformer: TransformerConfig,
    pub renderer: RendererConfig,
    pub weights: Weights,
}

impl Network {
    pub fn init(model: &HeadModel, transformer: TransformerConfig, renderer: RendererConfig, seed: u64) -> Result<Self> {
        if renderer.in_channels != transformer.descriptor_dim + 1 {
            return Err(Error::Config(format!(
                "renderer takes {} channels but descriptors have {} (+1 depth)",
                renderer.in_channels, transformer.descriptor_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vertex_transformer::init_weights(&transformer, model.n_coarse(), model.upsample_chain.len(), &mut rng)?;
        weights.merge(renderer::init_weights(&renderer, &mut rng)?)?;
        Ok(Network { transformer, renderer, weights })
    }

    pub fn toy(model: &HeadModel, seed: u64) -> Result<Self> {
        let t = TransformerConfig::toy();
        Self::init(model, t, RendererConfig::toy(t.descriptor_dim), seed)
    }

    pub fn paper(model: &HeadModel, seed: u64) -> Result<Self> {
        let t = TransformerConfig::paper();
        Self::init(model, t, RendererConfig { depth_levels: 4, base_channels: 16, in_channels: t.descriptor_dim + 1 }, seed)
    }

    /// Smallest side multiple accepted by both the image encoder and the renderer.
    pub fn frame_multiple(&self) -> usize {
        self.renderer.divisor().max(vertex_transformer::ENCODER_STRIDE)
    }

    pub fn check_frame(&self, w: usize, h: usize) -> Result<()> {
        let m = self.frame_multiple();
        if w == 0 || h == 0 || w % m != 0 || h % m != 0 {
            return Err(Error::shape(format!("frame {w}x{h} must be a positive multiple of {m}")));
        }
        Ok(())
    }

    /// Check weight shapes against `model`.
    pub fn check_model(&self, model: &HeadModel) -> Result<()> {
        let tokens = self.weights.get("vertex_tokens")?;
        if tokens.shape() != [model.n_coarse(), self.transformer.width] {
            return Err(Error::Config(format!(
                "vertex_tokens {:?} do not fit a model with {} coarse vertices",
                tokens.shape(),
                model.n_coarse()
            )));
        }
        for s in 0..model.upsample_chain.len() {
            self.weights.get(&format!("mix{s}.w"))?;
        }
        Ok(())
    }

    pub fn to_container(&self) -> TensorMap {
        let mut map = self.weights.to_container();
        let t = &self.transformer;
        let tv = vec![t.width as f32, t.layers as f32, t.heads as f32, t.descriptor_dim as f32, t.uv_scale as f32, t.depth_scale as f32];
        map.insert(TRANSFORMER_KEY.into(), Tensor::new([6], tv).expect("six values"));
        let r = &self.renderer;
        map.insert(RENDERER_KEY.into(), Tensor::new([2], vec![r.depth_levels as f32, r.base_channels as f32]).expect("two values"));
        map
    }

    pub fn from_container(mut map: TensorMap) -> Result<Self> {
        let mut take = |key: &str, n: usize| -> Result<Vec<f32>> {
            let t = map.remove(key).ok_or_else(|| Error::format(key, "missing"))?;
            if t.shape() != [n] {
                return Err(Error::format(key, format!("expected {n} values, got shape {:?}", t.shape())));
            }
            Ok(t.into_data())
        };
        let tv = take(TRANSFORMER_KEY, 6)?;
        let rv = take(RENDERER_KEY, 2)?;
        let int = |key: &str, x: f32| -> Result<usize> {
            if x < 0.0 || x.fract() != 0.0 {
                return Err(Error::format(key, format!("{x} is not a count")));
            }
            Ok(x as usize)
        };
        let transformer = TransformerConfig {
            width: int(TRANSFORMER_KEY, tv[0])?,
            layers: int(TRANSFORMER_KEY, tv[1])?,
            heads: int(TRANSFORMER_KEY, tv[2])?,
            descriptor_dim: int(TRANSFORMER_KEY, tv[3])?,
            uv_scale: tv[4] as f64,
            depth_scale: tv[5] as f64,
        };
        transformer.validate()?;
        let renderer = RendererConfig {
            depth_levels: int(RENDERER_KEY, rv[0])?,
            base_channels: int(RENDERER_KEY, rv[1])?,
            in_channels: transformer.descriptor_dim + 1,
        };
        renderer.validate()?;
        Ok(Network { transformer, renderer, weights: Weights::from_container(map) })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_container(path, &self.to_container())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(load_container(path)?)
    }

    /// Descriptors `[N, C]` on the tape.
    pub fn descriptors_on<R: Real>(&self, t: &mut Tape<R>, b: &Bound, model: &HeadModel, src: &SourceFrame) -> Result<Var> {
        let inputs = DescriptorInputs { image: &src.image, vertices: &src.vertices, camera: &src.camera };
        vertex_transformer::descriptors(t, b, &self.transformer, model, &inputs)
    }

    /// Predicted `(rgb, mask)` for a driving splat plan.
    pub fn forward<R: Real>(
        &self,
        t: &mut Tape<R>,
        b: &Bound,
        model: &HeadModel,
        src: &SourceFrame,
        plan: &SplatPlan,
    ) -> Result<(Var, Var)> {
        let desc = self.descriptors_on(t, b, model, src)?;
        let input = renderer::splat_input(t, plan, desc, R::zero())?;
        renderer::forward(t, b, &self.renderer, input)
    }

    /// Inference-only descriptors.
    pub fn descriptors(&self, model: &HeadModel, src: &SourceFrame) -> Result<Tensor> {
        let mut t = Tape::<f32>::new();
        let b = self.weights.bind(&mut t, false);
        let d = self.descriptors_on(&mut t, &b, model, src)?;
        Ok(t.value(d).clone())
    }
}

/// The source view the transformer reads: image plus the posed mesh behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceFrame {
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Tensor,
    /// `[N, 3]`.
    pub vertices: Tensor,
    pub camera: CameraParams,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    #[default]
    Depth,
    Splat,
    Neural,
    Oracle,
}

impl RenderMode {
    pub const ALL: [RenderMode; 4] = [RenderMode::Depth, RenderMode::Splat, RenderMode::Neural, RenderMode::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Depth => "depth",
            RenderMode::Splat => "splat",
            RenderMode::Neural => "neural",
            RenderMode::Oracle => "oracle",
        }
    }
}

impl FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RenderMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown render mode `{s}` (depth|splat|neural|oracle)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRequest {
    pub params: AvatarParams,
    /// Source parameters for descriptor modes; defaults to the driving identity
    /// with neutral expression and pose under the default camera.
    pub source: Option<AvatarParams>,
    pub mode: RenderMode,
    pub width: usize,
    pub height: usize,
    pub space: OffsetSpace,
}

impl FrameRequest {
    pub fn new(params: AvatarParams, mode: RenderMode, size: usize) -> Self {
        FrameRequest { params, source: None, mode, width: size, height: size, space: OffsetSpace::Canonical }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image8,
    /// Milliseconds per stage.
    pub timing: BTreeMap<String, f64>,
}

/// Everything needed to render: model, network and the identity's colours.
#[derive(Clone, Debug)]
pub struct Avatar {
    pub model: HeadModel,
    pub network: Network,
    /// `[N, 3]` in `[0, 1]`, used by the reference shader and default source frames.
    pub albedo: Tensor,
    pub light: [f64; 3],
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

impl Avatar {
    pub fn new(model: HeadModel, network: Network) -> Result<Self> {
        network.check_model(&model)?;
        let albedo = synthetic_albedo(&model, 0);
        Ok(Avatar { model, network, albedo, light: DEFAULT_LIGHT })
    }

    pub fn default_source(&self, driving: &AvatarParams) -> AvatarParams {
        let mut s = AvatarParams::zeros(&self.model);
        s.beta = driving.beta.clone();
        s.offsets = driving.offsets.clone();
        s
    }

    /// Reference-shaded source frame for `source`.
    pub fn source_frame(&self, source: &AvatarParams, width: usize, height: usize, space: OffsetSpace) -> Result<SourceFrame> {
        let (image, _) = oracle_render(&self.model, source, &self.albedo, width, height, self.light)?;
        let vertices = self.model.drive(source, space)?;
        Ok(SourceFrame { image, vertices, camera: source.camera })
    }

    /// Render one frame. Invalid parameters surface as [`Error::Param`]; later
    /// failures are tagged with their stage.
    pub fn render(&self, req: &FrameRequest) -> Result<Frame> {
        req.params.validate(&self.model)?;
        if let Some(s) = &req.source {
            s.validate(&self.model)?;
        }
        let (w, h) = (req.width, req.height);
        if w == 0 || h == 0 {
            return Err(Error::param("size", "frame dimensions must be positive"));
        }
        if matches!(req.mode, RenderMode::Splat | RenderMode::Neural) {
            self.network.check_frame(w, h).map_err(|e| Error::param("size", e))?;
        }
        let total = Instant::now();
        let mut timing = BTreeMap::new();
        let image = match req.mode {
            RenderMode::Oracle => {
                let start = Instant::now();
                let (rgb, _) = oracle_render(&self.model, &req.params, &self.albedo, w, h, self.light)
                    .map_err(Error::at_stage("oracle"))?;
                timing.insert("oracle_ms".into(), ms(start));
                Image8::from_planar(&rgb, None).map_err(Error::at_stage("encode"))?
            }
            mode => {
                let start = Instant::now();
                let verts = self.model.drive(&req.params, req.space).map_err(Error::at_stage("reconstruct"))?;
                timing.insert("reconstruct_ms".into(), ms(start));
                let start = Instant::now();
                let plan = rasterizer::plan(&verts, &req.params.camera, w, h).map_err(Error::at_stage("project"))?;
                timing.insert("project_ms".into(), ms(start));
                if mode == RenderMode::Depth {
                    plan_depth_view(&plan)
                } else {
                    let start = Instant::now();
                    let source = req.source.clone().unwrap_or_else(|| self.default_source(&req.params));
                    let src = self.source_frame(&source, w, h, req.space).map_err(Error::at_stage("source"))?;
                    let desc = self.network.descriptors(&self.model, &src).map_err(Error::at_stage("transformer"))?;
                    timing.insert("transformer_ms".into(), ms(start));
                    let start = Instant::now();
                    let splat = rasterizer::splat_with_plan(&plan, &desc, 0.0);
                    timing.insert("splat_ms".into(), ms(start));
                    if mode == RenderMode::Splat {
                        splat_view(&splat)
                    } else {
                        let start = Instant::now();
                        let f = renderer::render(&splat, &self.network.weights, &self.network.renderer)
                            .map_err(Error::at_stage("render"))?;
                        timing.insert("render_ms".into(), ms(start));
                        Image8::from_planar(&f.rgb, None).map_err(Error::at_stage("encode"))?
                    }
                }
            }
        };
        timing.insert("total_ms".into(), ms(total));
        Ok(Frame { image, timing })
    }
}

/// Finite-difference check of the whole differentiable path (vertex tokens,
/// transformer, upsampling, splat gather, renderer, L1) on a tiny seeded setup,
/// with respect to every network weight.
pub fn pipeline_grad_check(seed: u64, rel_tol: f64) -> Result<GradCheckReport> {
    let model = generate_synthetic_model(&SyntheticConfig {
        seed,
        n_vertices: 80,
        n_coarse: 12,
        shape_dims: 3,
        expr_dims: 2,
        joints: 4,
    })?;
    let tcfg = TransformerConfig { width: 8, layers: 1, heads: 2, descriptor_dim: 2, uv_scale: 64.0, depth_scale: 64.0 };
    let rcfg = RendererConfig { depth_levels: 1, base_channels: 2, in_channels: 3 };
    let net = Network::init(&model, tcfg, rcfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let mut random_params = || {
        let mut p = AvatarParams::zeros(&model);
        p.beta.iter_mut().chain(p.phi.iter_mut()).for_each(|x| *x = rng.gen_range(-1.0..1.0));
        p.theta.iter_mut().for_each(|x| *x = rng.gen_range(-0.2..0.2));
        p.camera.scale = 0.8;
        p
    };
    let (src_p, drv_p) = (random_params(), random_params());
    let size = 16;
    let albedo = synthetic_albedo(&model, seed);
    let (image, _) = oracle_render(&model, &src_p, &albedo, size, size, DEFAULT_LIGHT)?;
    let src = SourceFrame { image, vertices: model.drive(&src_p, OffsetSpace::Canonical)?, camera: src_p.camera };
    let plan = rasterizer::plan(&model.drive(&drv_p, OffsetSpace::Canonical)?, &drv_p.camera, size, size)?;
    let target = Tensor::<f64>::uniform([3, size, size], -1.0, 1.0, &mut rng);

    let w64 = net.weights.cast::<f64>();
    let names: Vec<String> = w64.iter().map(|(k, _)| k.clone()).collect();
    let inputs: Vec<Tensor<f64>> = w64.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |t, vars| {
            let b = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let (rgb, _) = net.forward(t, &b, &model, &src, &plan)?;
            let tgt = t.constant(target.clone());
            let d = t.sub(rgb, tgt)?;
            let a = t.abs(d)?;
            t.mean(a)
        },
        &inputs,
        rel_tol,
    )
}

/// Projected `(u, v, d)` of every vertex; exposed for audits of the camera model.
pub fn projected(model: &HeadModel, p: &AvatarParams, space: OffsetSpace) -> Result<Vec<crate::camera::Projected>> {
    let v = model.drive(p, space)?;
    let rows: Vec<[f32; 3]> = v.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(project_all(&rows, &p.camera))
}
