//! Optimization: original-trajectory training, lateral expansion schedule,
//! EIG-guided fusion rounds and minimal density control.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! cloud.fsplat   cloud, tracks and sky (binary)
//! ledger.fledg   Fisher ledger
//! cameras.txt    training cameras (offset 0) and novel cameras used so far
//! state.txt      round, offset and iteration counters
//! config.txt     the config that produced the checkpoint
//! metrics.csv    metrics history
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{self, bad_value, parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::fisher::{accumulate_views, check_tau, eig_map, FisherLedger, DEFAULT_TAU};
use crate::formats::{self, csv_float, csv_opt, CameraEntry};
use crate::gradients::backward;
use crate::image::RgbImage;
use crate::losses::{loss_novel, loss_original, DepthSample, LossWeights, SparseDepth};
use crate::metrics::psnr;
use crate::persist::{self, CloudFormat};
use crate::rasterizer::{render, NEAR_PLANE};
use crate::restorer::{manifest, RestoreInput, RestoredView, Restorer, Stage};
use crate::scene::{logit, sigmoid, Camera, GaussianCloud, Scene, SkyModel, LOG_SCALE, MEAN, OPACITY, ROTATION, SH};
use crate::synth::{init_from_lidar, Dataset};

/// Training, schedule and fusion settings. Every field has a config key of
/// the same name.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub sh_degree: u8,
    /// Original-trajectory iterations (one view per iteration).
    pub iterations: usize,
    pub lr_mean: f64,
    /// Position learning rate reached at the end of original training.
    pub lr_mean_final: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh0: f64,
    pub lr_shn: f64,
    pub lr_sky: f64,
    pub lambda_r: f64,
    pub lambda_d: f64,
    pub max_scale: f64,
    pub densify_from: usize,
    pub densify_until: usize,
    /// 0 disables density control.
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub max_gaussians: usize,
    pub log_interval: usize,
    pub expansion_start: usize,
    pub expansion_stride: usize,
    pub lateral_step: f64,
    pub max_offset: f64,
    pub rounds: usize,
    /// Round from which the restorer runs in frame stage. `None` switches at
    /// the first round whose offset reaches `max_offset`.
    pub stage_switch_round: Option<usize>,
    pub finetune_iterations: usize,
    pub novel_batches: usize,
    pub original_batches: usize,
    /// Use every n-th training frame as a novel-view source.
    pub novel_frame_stride: usize,
    /// Frames on each side whose sparse depth is projected into a novel view.
    pub novel_depth_neighbors: usize,
    pub restorer_tau: f64,
    pub restorer_noise: f64,
    pub refresh_ledger: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sh_degree: 0,
            iterations: 3000,
            lr_mean: 1e-3,
            lr_mean_final: 1e-4,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_sh0: 1e-2,
            lr_shn: 5e-4,
            lr_sky: 1e-2,
            lambda_r: 0.8,
            lambda_d: 0.05,
            max_scale: 3.0,
            densify_from: 500,
            densify_until: 2000,
            densify_interval: 500,
            densify_grad_threshold: 2e-5,
            prune_opacity: 0.005,
            max_gaussians: 20000,
            log_interval: 500,
            expansion_start: 3000,
            expansion_stride: 1000,
            lateral_step: 1.0,
            max_offset: 3.0,
            rounds: 3,
            stage_switch_round: None,
            finetune_iterations: 1000,
            novel_batches: 1,
            original_batches: 1,
            novel_frame_stride: 2,
            novel_depth_neighbors: 1,
            restorer_tau: DEFAULT_TAU,
            restorer_noise: 0.3,
            refresh_ledger: true,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "seed",
    "sh_degree",
    "iterations",
    "lr_mean",
    "lr_mean_final",
    "lr_rotation",
    "lr_scale",
    "lr_opacity",
    "lr_sh0",
    "lr_shn",
    "lr_sky",
    "lambda_r",
    "lambda_d",
    "max_scale",
    "densify_from",
    "densify_until",
    "densify_interval",
    "densify_grad_threshold",
    "prune_opacity",
    "max_gaussians",
    "log_interval",
    "expansion_start",
    "expansion_stride",
    "lateral_step",
    "max_offset",
    "rounds",
    "stage_switch_round",
    "finetune_iterations",
    "novel_batches",
    "original_batches",
    "novel_frame_stride",
    "novel_depth_neighbors",
    "restorer_tau",
    "restorer_noise",
    "refresh_ledger",
];

impl TrainConfig {
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(CONFIG_KEYS)?;
        let mut c = Self::default();
        for (k, v) in kv.iter() {
            match k {
                "seed" => c.seed = parse_value(k, v)?,
                "sh_degree" => c.sh_degree = parse_value(k, v)?,
                "iterations" => c.iterations = parse_value(k, v)?,
                "lr_mean" => c.lr_mean = parse_value(k, v)?,
                "lr_mean_final" => c.lr_mean_final = parse_value(k, v)?,
                "lr_rotation" => c.lr_rotation = parse_value(k, v)?,
                "lr_scale" => c.lr_scale = parse_value(k, v)?,
                "lr_opacity" => c.lr_opacity = parse_value(k, v)?,
                "lr_sh0" => c.lr_sh0 = parse_value(k, v)?,
                "lr_shn" => c.lr_shn = parse_value(k, v)?,
                "lr_sky" => c.lr_sky = parse_value(k, v)?,
                "lambda_r" => c.lambda_r = parse_value(k, v)?,
                "lambda_d" => c.lambda_d = parse_value(k, v)?,
                "max_scale" => c.max_scale = parse_value(k, v)?,
                "densify_from" => c.densify_from = parse_value(k, v)?,
                "densify_until" => c.densify_until = parse_value(k, v)?,
                "densify_interval" => c.densify_interval = parse_value(k, v)?,
                "densify_grad_threshold" => c.densify_grad_threshold = parse_value(k, v)?,
                "prune_opacity" => c.prune_opacity = parse_value(k, v)?,
                "max_gaussians" => c.max_gaussians = parse_value(k, v)?,
                "log_interval" => c.log_interval = parse_value(k, v)?,
                "expansion_start" => c.expansion_start = parse_value(k, v)?,
                "expansion_stride" => c.expansion_stride = parse_value(k, v)?,
                "lateral_step" => c.lateral_step = parse_value(k, v)?,
                "max_offset" => c.max_offset = parse_value(k, v)?,
                "rounds" => c.rounds = parse_value(k, v)?,
                "stage_switch_round" => {
                    c.stage_switch_round = if v == "auto" { None } else { Some(parse_value(k, v)?) }
                }
                "finetune_iterations" => c.finetune_iterations = parse_value(k, v)?,
                "novel_batches" => c.novel_batches = parse_value(k, v)?,
                "original_batches" => c.original_batches = parse_value(k, v)?,
                "novel_frame_stride" => c.novel_frame_stride = parse_value(k, v)?,
                "novel_depth_neighbors" => c.novel_depth_neighbors = parse_value(k, v)?,
                "restorer_tau" => c.restorer_tau = parse_value(k, v)?,
                "restorer_noise" => c.restorer_noise = parse_value(k, v)?,
                "refresh_ledger" => c.refresh_ledger = parse_value(k, v)?,
                _ => unreachable!("checked above"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn to_text(&self) -> String {
        let f = |v: f64| format!("{v:?}");
        let mut m: BTreeMap<&str, String> = BTreeMap::new();
        m.insert("seed", self.seed.to_string());
        m.insert("sh_degree", self.sh_degree.to_string());
        m.insert("iterations", self.iterations.to_string());
        m.insert("lr_mean", f(self.lr_mean));
        m.insert("lr_mean_final", f(self.lr_mean_final));
        m.insert("lr_rotation", f(self.lr_rotation));
        m.insert("lr_scale", f(self.lr_scale));
        m.insert("lr_opacity", f(self.lr_opacity));
        m.insert("lr_sh0", f(self.lr_sh0));
        m.insert("lr_shn", f(self.lr_shn));
        m.insert("lr_sky", f(self.lr_sky));
        m.insert("lambda_r", f(self.lambda_r));
        m.insert("lambda_d", f(self.lambda_d));
        m.insert("max_scale", f(self.max_scale));
        m.insert("densify_from", self.densify_from.to_string());
        m.insert("densify_until", self.densify_until.to_string());
        m.insert("densify_interval", self.densify_interval.to_string());
        m.insert("densify_grad_threshold", f(self.densify_grad_threshold));
        m.insert("prune_opacity", f(self.prune_opacity));
        m.insert("max_gaussians", self.max_gaussians.to_string());
        m.insert("log_interval", self.log_interval.to_string());
        m.insert("expansion_start", self.expansion_start.to_string());
        m.insert("expansion_stride", self.expansion_stride.to_string());
        m.insert("lateral_step", f(self.lateral_step));
        m.insert("max_offset", f(self.max_offset));
        m.insert("rounds", self.rounds.to_string());
        m.insert(
            "stage_switch_round",
            self.stage_switch_round.map_or_else(|| "auto".to_string(), |r| r.to_string()),
        );
        m.insert("finetune_iterations", self.finetune_iterations.to_string());
        m.insert("novel_batches", self.novel_batches.to_string());
        m.insert("original_batches", self.original_batches.to_string());
        m.insert("novel_frame_stride", self.novel_frame_stride.to_string());
        m.insert("novel_depth_neighbors", self.novel_depth_neighbors.to_string());
        m.insert("restorer_tau", f(self.restorer_tau));
        m.insert("restorer_noise", f(self.restorer_noise));
        m.insert("refresh_ledger", self.refresh_ledger.to_string());
        config::render(&m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 2 {
            return Err(bad_value("sh_degree", "must be 0, 1 or 2"));
        }
        let rates = [
            ("lr_mean", self.lr_mean),
            ("lr_mean_final", self.lr_mean_final),
            ("lr_rotation", self.lr_rotation),
            ("lr_scale", self.lr_scale),
            ("lr_opacity", self.lr_opacity),
            ("lr_sh0", self.lr_sh0),
            ("lr_shn", self.lr_shn),
            ("lr_sky", self.lr_sky),
            ("densify_grad_threshold", self.densify_grad_threshold),
            ("prune_opacity", self.prune_opacity),
            ("restorer_noise", self.restorer_noise),
        ];
        for (k, v) in rates {
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad_value(k, format!("must be non-negative, got {v}")));
            }
        }
        LossWeights::new(self.lambda_r, self.lambda_d).map_err(|e| bad_value("lambda_r", e.to_string()))?;
        if !(self.max_scale.is_finite() && self.max_scale > 0.0) {
            return Err(bad_value("max_scale", "must be positive"));
        }
        if self.expansion_stride == 0 {
            return Err(bad_value("expansion_stride", "must be positive"));
        }
        if !(self.lateral_step.is_finite() && self.lateral_step > 0.0) {
            return Err(bad_value("lateral_step", "must be positive"));
        }
        if !(self.max_offset.is_finite() && self.max_offset >= 0.0) {
            return Err(bad_value("max_offset", "must be non-negative"));
        }
        if self.novel_batches + self.original_batches == 0 {
            return Err(bad_value("novel_batches", "novel_batches + original_batches must be positive"));
        }
        if self.novel_frame_stride == 0 {
            return Err(bad_value("novel_frame_stride", "must be positive"));
        }
        check_tau(self.restorer_tau).map_err(|e| bad_value("restorer_tau", e.to_string()))?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_r: self.lambda_r,
            lambda_d: self.lambda_d,
        }
    }

    /// Stage of the restorer in fusion round `round` (0-based).
    pub fn stage_for_round(&self, round: usize) -> Stage {
        let switch = self.stage_switch_round.unwrap_or_else(|| {
            (0..)
                .take(self.rounds.max(1) + 1)
                .find(|r| round_offset(self, *r) >= self.max_offset)
                .unwrap_or(usize::MAX)
        });
        if round >= switch {
            Stage::Frame
        } else {
            Stage::Video
        }
    }
}

/// Lateral offset at a global iteration: 0 before `expansion_start`, then
/// `floor((iter − start) / stride + 1) · step`, capped at `max_offset`.
pub fn expansion_offsets(cfg: &TrainConfig, iteration: usize) -> f64 {
    if iteration < cfg.expansion_start {
        return 0.0;
    }
    let k = (iteration - cfg.expansion_start) / cfg.expansion_stride + 1;
    (k as f64 * cfg.lateral_step).min(cfg.max_offset)
}

/// Offset of fusion round `round`: the schedule evaluated at the round's
/// first iteration.
pub fn round_offset(cfg: &TrainConfig, round: usize) -> f64 {
    expansion_offsets(cfg, cfg.expansion_start + round * cfg.expansion_stride)
}

/// Adam with a per-parameter learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` against `grad`; `lr(i)` is the rate of
    /// parameter `i`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr(i) * mh / (vh.sqrt() + ADAM_EPS);
        }
    }

    /// Keep moments of retained blocks of width `dim`, then append copies of
    /// the blocks listed in `cloned`.
    fn remap(&mut self, dim: usize, keep: &[bool], cloned: &[usize]) {
        let remap = |x: &Vec<f64>| {
            let mut out: Vec<f64> = Vec::with_capacity(x.len());
            for (i, k) in keep.iter().enumerate() {
                if *k {
                    out.extend_from_slice(&x[i * dim..(i + 1) * dim]);
                }
            }
            for &i in cloned {
                out.extend_from_slice(&x[i * dim..(i + 1) * dim]);
            }
            out
        };
        self.m = remap(&self.m);
        self.v = remap(&self.v);
    }
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// `train` or `fuse`.
    pub phase: &'static str,
    pub round: usize,
    pub iteration: usize,
    pub offset: f64,
    pub stage: Option<Stage>,
    pub gaussians: usize,
    /// Mean loss since the previous row.
    pub loss: f64,
    /// Mean PSNR over training views.
    pub train_psnr: f64,
    /// Mean PSNR of novel views at `offset` against ground truth.
    pub novel_psnr: Option<f64>,
    /// Mean fraction of pixels in the restorer's edit mask.
    pub ucr_fraction: Option<f64>,
}

pub const METRICS_HEADER: &str = "phase,round,iteration,offset,stage,gaussians,loss,train_psnr,novel_psnr,ucr_fraction";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.phase,
            r.round,
            r.iteration,
            csv_float(r.offset),
            r.stage.map(|s| s.to_string()).unwrap_or_default(),
            r.gaussians,
            csv_float(r.loss),
            csv_float(r.train_psnr),
            csv_opt(r.novel_psnr),
            csv_opt(r.ucr_fraction),
        );
    }
    s
}

/// Everything carried across training and fusion rounds.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub scene: Scene,
    pub ledger: FisherLedger,
    /// Offset of the last completed fusion round.
    pub offset: f64,
    /// Completed fusion rounds.
    pub round: usize,
    /// Optimizer steps taken so far.
    pub iteration: usize,
    /// Novel cameras whose views have been distilled into the cloud.
    pub novel_cameras: Vec<CameraEntry>,
    pub history: Vec<MetricsRow>,
    adam: Adam,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
}

impl FusionState {
    pub fn new(scene: Scene) -> Self {
        let n = scene.cloud.len();
        let adam = Adam::new(scene.cloud.params().len() + 3);
        Self {
            ledger: FisherLedger::new(n),
            scene,
            offset: 0.0,
            round: 0,
            iteration: 0,
            novel_cameras: Vec::new(),
            history: Vec::new(),
            adam,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    /// Initial state from a dataset's LiDAR points and tracks, with a gray
    /// sky.
    pub fn from_dataset(data: &Dataset, cfg: &TrainConfig) -> Self {
        let cloud = init_from_lidar(&data.lidar, cfg.sh_degree);
        Self::new(Scene::new(cloud, data.tracks.clone(), SkyModel::new([0.5; 3])))
    }

    /// Fail unless ledger, optimizer and statistics match the cloud.
    pub fn check_sizes(&self) -> Result<()> {
        let n = self.scene.cloud.len();
        if self.ledger.len() != n {
            return Err(Error::shape(format!("ledger of {n}"), self.ledger.len()));
        }
        if self.adam.len() != self.scene.cloud.params().len() + 3 || self.grad_accum.len() != n {
            return Err(Error::shape(format!("optimizer state for {n}"), self.grad_accum.len()));
        }
        Ok(())
    }
}

/// Per-parameter learning rate inside one block.
fn block_rates(cfg: &TrainConfig, dim: usize, lr_mean: f64) -> Vec<f64> {
    (0..dim)
        .map(|k| match k {
            k if k < ROTATION => lr_mean,
            k if k < LOG_SCALE => cfg.lr_rotation,
            k if k < OPACITY => cfg.lr_scale,
            OPACITY => cfg.lr_opacity,
            k if k < SH + 3 => cfg.lr_sh0,
            _ => cfg.lr_shn,
        })
        .collect()
}

fn mean_lr(cfg: &TrainConfig, iteration: usize) -> f64 {
    if cfg.iterations == 0 || iteration >= cfg.iterations || cfg.lr_mean == 0.0 {
        return cfg.lr_mean_final;
    }
    let s = iteration as f64 / cfg.iterations as f64;
    cfg.lr_mean * (cfg.lr_mean_final / cfg.lr_mean).powf(s)
}

/// Apply one gradient step. Returns `false` without touching the state when
/// the gradient is not finite.
fn apply_step(state: &mut FusionState, cfg: &TrainConfig, grad_params: &[f64], grad_sky: [f64; 3]) -> bool {
    if grad_params.iter().chain(grad_sky.iter()).any(|g| !g.is_finite()) {
        return false;
    }
    let dim = state.scene.cloud.param_dim();
    let rates = block_rates(cfg, dim, mean_lr(cfg, state.iteration));
    let np = grad_params.len();
    let mut params: Vec<f64> = state.scene.cloud.params().to_vec();
    params.extend_from_slice(&state.scene.sky.color);
    let mut grad = grad_params.to_vec();
    grad.extend_from_slice(&grad_sky);
    state
        .adam
        .update(&mut params, &grad, |i| if i < np { rates[i % dim] } else { cfg.lr_sky });
    let max_log = cfg.max_scale.ln();
    for (i, g) in grad_params.chunks_exact(dim).enumerate() {
        let gm = (g[MEAN] * g[MEAN] + g[MEAN + 1] * g[MEAN + 1] + g[MEAN + 2] * g[MEAN + 2]).sqrt();
        if gm > 0.0 {
            state.grad_accum[i] += gm;
            state.grad_count[i] += 1;
        }
        let b = &mut params[i * dim..(i + 1) * dim];
        for s in &mut b[LOG_SCALE..LOG_SCALE + 3] {
            *s = s.min(max_log);
        }
    }
    state.scene.cloud.params_mut().copy_from_slice(&params[..np]);
    state.scene.sky = SkyModel::new([params[np], params[np + 1], params[np + 2]]);
    state.iteration += 1;
    true
}

/// One original-trajectory step on `view`. Returns the loss.
fn original_step(
    state: &mut FusionState,
    cfg: &TrainConfig,
    cam: &Camera,
    target: &RgbImage,
    sparse: &SparseDepth,
) -> Result<f64> {
    let out = render(&state.scene, cam, cam.timestamp)?;
    let loss = loss_original(&out, target, sparse, cfg.loss_weights())?;
    step_on_loss(state, cfg, cam, loss.value, &loss.d_color, &loss.d_depth)
}

fn step_on_loss(
    state: &mut FusionState,
    cfg: &TrainConfig,
    cam: &Camera,
    value: f64,
    d_color: &RgbImage,
    d_depth: &crate::image::ScalarImage,
) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Diverged {
            iteration: state.iteration,
            loss: value,
        });
    }
    let g = backward(&state.scene, cam, cam.timestamp, d_color, Some(d_depth))?;
    if !apply_step(state, cfg, &g.params, g.sky) {
        return Err(Error::Diverged {
            iteration: state.iteration,
            loss: f64::NAN,
        });
    }
    Ok(value)
}

/// Mean PSNR of the current scene over the training views.
pub fn train_psnr(scene: &Scene, data: &Dataset) -> Result<f64> {
    let v: Vec<f64> = data
        .train
        .par_iter()
        .map(|view| psnr(&render(scene, &view.camera, view.camera.timestamp)?.color, &view.image))
        .collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Mean PSNR of novel views at `offset` against the ground-truth scene, over
/// the frames used for fusion.
pub fn novel_psnr(scene: &Scene, data: &Dataset, cfg: &TrainConfig, offset: f64) -> Result<f64> {
    let frames = novel_frames(data, cfg);
    let v: Vec<f64> = frames
        .par_iter()
        .map(|&t| {
            let cam = data.train[t].camera.shifted_laterally(offset);
            let gt = render(&data.ground_truth, &cam, cam.timestamp)?.color;
            psnr(&render(scene, &cam, cam.timestamp)?.color, &gt)
        })
        .collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

fn novel_frames(data: &Dataset, cfg: &TrainConfig) -> Vec<usize> {
    (0..data.train.len()).step_by(cfg.novel_frame_stride).collect()
}

/// Train on the original trajectory, then accumulate the Fisher ledger over
/// the training views and freeze its regularizer.
///
/// On divergence the error is returned and `state` holds the last finite
/// parameters.
pub fn train_original(state: &mut FusionState, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::invalid("data", "no training views"));
    }
    state.check_sizes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut window = (0.0, 0usize);
    for it in 0..cfg.iterations {
        let view = &data.train[rng.random_range(0..data.train.len())];
        let loss = original_step(state, cfg, &view.camera, &view.image, &view.sparse)?;
        window.0 += loss;
        window.1 += 1;
        let done = it + 1;
        if cfg.densify_interval > 0
            && done >= cfg.densify_from
            && done <= cfg.densify_until
            && done % cfg.densify_interval == 0
        {
            densify_prune(state, cfg, &mut rng)?;
        }
        if cfg.log_interval > 0 && (done % cfg.log_interval == 0 || done == cfg.iterations) {
            state.history.push(MetricsRow {
                phase: "train",
                round: 0,
                iteration: state.iteration,
                offset: 0.0,
                stage: None,
                gaussians: state.scene.cloud.len(),
                loss: window.0 / window.1.max(1) as f64,
                train_psnr: train_psnr(&state.scene, data)?,
                novel_psnr: None,
                ucr_fraction: None,
            });
            window = (0.0, 0);
        }
    }
    let mut ledger = FisherLedger::new(state.scene.cloud.len());
    accumulate_views(&mut ledger, &state.scene, &data.train_cameras())?;
    ledger.finalize();
    state.ledger = ledger;
    state.check_sizes()
}

/// Prune Gaussians with opacity below `prune_opacity`; clone those whose
/// mean positional gradient exceeds `densify_grad_threshold`. A clone and
/// its source share the original opacity (`1 − √(1 − α)` each) and the clone
/// is offset by a jitter proportional to its scale. Ledger rows and
/// optimizer moments follow their Gaussians.
pub fn densify_prune(state: &mut FusionState, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<()> {
    state.check_sizes()?;
    let cloud = &state.scene.cloud;
    let n = cloud.len();
    let dim = cloud.param_dim();
    let keep: Vec<bool> = (0..n).map(|i| cloud.opacity(i) >= cfg.prune_opacity).collect();
    let budget = cfg.max_gaussians.saturating_sub(keep.iter().filter(|k| **k).count());
    let mut cloned: Vec<usize> = (0..n)
        .filter(|&i| {
            keep[i]
                && state.grad_count[i] > 0
                && state.grad_accum[i] / state.grad_count[i] as f64 > cfg.densify_grad_threshold
        })
        .collect();
    cloned.truncate(budget);

    let mut out = GaussianCloud::new(cloud.sh_degree());
    let mut new_blocks = Vec::with_capacity(cloned.len());
    let mut sources = vec![false; n];
    for &i in &cloned {
        sources[i] = true;
        let mut b = cloud.block(i).to_vec();
        let shared = logit(1.0 - (1.0 - sigmoid(b[OPACITY])).sqrt());
        b[OPACITY] = shared;
        for k in 0..3 {
            b[MEAN + k] += 0.5 * b[LOG_SCALE + k].exp() * rng.random_range(-1.0..1.0);
        }
        new_blocks.push((b, cloud.groups()[i]));
    }
    for i in (0..n).filter(|&i| keep[i]) {
        let mut b = cloud.block(i).to_vec();
        if sources[i] {
            b[OPACITY] = logit(1.0 - (1.0 - sigmoid(b[OPACITY])).sqrt());
        }
        out.push_block(&b, cloud.groups()[i]);
    }
    for (b, g) in &new_blocks {
        out.push_block(b, *g);
    }

    let extra: Vec<f64> = cloned.iter().map(|&i| state.ledger.entries()[i]).collect();
    state.ledger.remap(&keep, &extra)?;
    // moments: cloud blocks, then the three sky entries at the end
    let sky_m = [state.adam.m.len() - 3, state.adam.m.len() - 2, state.adam.m.len() - 1];
    let (sm, sv) = (sky_m.map(|i| state.adam.m[i]), sky_m.map(|i| state.adam.v[i]));
    state.adam.m.truncate(n * dim);
    state.adam.v.truncate(n * dim);
    state.adam.remap(dim, &keep, &cloned);
    state.adam.m.extend_from_slice(&sm);
    state.adam.v.extend_from_slice(&sv);
    state.scene.cloud = out;
    let m = state.scene.cloud.len();
    state.grad_accum = vec![0.0; m];
    state.grad_count = vec![0; m];
    state.check_sizes()
}

/// Project sparse depth samples seen from `from` into `to`, keeping the
/// nearest sample per pixel.
pub fn project_sparse(samples: &[(Camera, &SparseDepth)], to: &Camera) -> SparseDepth {
    let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (from, sparse) in samples {
        let rot_inv = from.rotation.transpose();
        for s in sparse.samples.iter().filter(|s| s.valid) {
            let pc = Vector3::new(
                (s.x as f64 + 0.5 - from.cx) / from.fx * s.depth,
                (s.y as f64 + 0.5 - from.cy) / from.fy * s.depth,
                s.depth,
            );
            let pw = rot_inv * (pc - from.translation);
            let q = to.world_to_camera(&pw);
            if q.z <= NEAR_PLANE {
                continue;
            }
            let (u, v) = (to.fx * q.x / q.z + to.cx, to.fy * q.y / q.z + to.cy);
            if u < 0.0 || v < 0.0 || u >= to.width as f64 || v >= to.height as f64 {
                continue;
            }
            let key = (v as usize, u as usize);
            let e = best.entry(key).or_insert(f64::INFINITY);
            if q.z < *e {
                *e = q.z;
            }
        }
    }
    SparseDepth::new(
        best.into_iter()
            .map(|((y, x), depth)| DepthSample {
                x,
                y,
                depth,
                valid: true,
            })
            .collect(),
    )
}

fn restorer_seed(cfg: &TrainConfig, round: usize, frame: usize) -> u64 {
    cfg.seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((round as u64) << 32)
        .wrapping_add(frame as u64)
}

/// A restored novel view ready for distillation.
#[derive(Clone, Debug)]
pub struct NovelView {
    pub frame: usize,
    pub camera: Camera,
    pub restored: RestoredView,
    pub sparse: SparseDepth,
}

/// Steps 1 and 2 of a round: render novel views at `offset`, compute their
/// EIG maps against the frozen ledger and restore them as one temporally
/// ordered window.
pub fn restore_novel_views(
    state: &FusionState,
    data: &Dataset,
    cfg: &TrainConfig,
    restorer: &dyn Restorer,
    offset: f64,
    stage: Stage,
) -> Result<Vec<NovelView>> {
    let frames = novel_frames(data, cfg);
    let prepared: Vec<_> = frames
        .par_iter()
        .map(|&t| {
            let cam = data.train[t].camera.shifted_laterally(offset);
            let image = render(&state.scene, &cam, cam.timestamp)?.color;
            let eig = eig_map(&state.scene, &state.ledger, &cam)?;
            let gt = render(&data.ground_truth, &cam, cam.timestamp)?.color;
            Ok((t, cam, image, eig, gt))
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<RestoreInput<'_>> = prepared
        .iter()
        .map(|(t, _, image, eig, gt)| RestoreInput {
            image,
            eig,
            ground_truth: Some(gt),
            seed: restorer_seed(cfg, state.round, *t),
        })
        .collect();
    let restored = restorer.restore_window(&inputs, stage)?;
    if restored.len() != prepared.len() {
        return Err(Error::Restorer {
            restorer: restorer.name().to_string(),
            message: format!("returned {} views for {} inputs", restored.len(), prepared.len()),
        });
    }
    let k = cfg.novel_depth_neighbors;
    Ok(prepared
        .iter()
        .zip(restored)
        .map(|((t, cam, ..), r)| {
            let lo = t.saturating_sub(k);
            let hi = (t + k).min(data.train.len() - 1);
            let sources: Vec<(Camera, &SparseDepth)> =
                (lo..=hi).map(|j| (data.train[j].camera, &data.train[j].sparse)).collect();
            NovelView {
                frame: *t,
                camera: *cam,
                restored: r,
                sparse: project_sparse(&sources, cam),
            }
        })
        .collect())
}

/// One fusion round: restore novel views at the round's offset, fine-tune on
/// EIG-weighted novel losses interleaved with original-trajectory batches,
/// then refresh the ledger over training and all novel cameras so far
/// (keeping `λ_reg`). A restorer failure rolls the state back.
pub fn fusion_round(
    state: &mut FusionState,
    data: &Dataset,
    restorer: &dyn Restorer,
    cfg: &TrainConfig,
) -> Result<Vec<NovelView>> {
    cfg.validate()?;
    state.check_sizes()?;
    if state.ledger.lambda_reg().is_none() {
        return Err(Error::invalid("state", "ledger is not finalized; run original training first"));
    }
    let snapshot = state.clone();
    let result = run_round(state, data, restorer, cfg);
    if result.is_err() {
        *state = snapshot;
    }
    result
}

fn run_round(
    state: &mut FusionState,
    data: &Dataset,
    restorer: &dyn Restorer,
    cfg: &TrainConfig,
) -> Result<Vec<NovelView>> {
    let round = state.round;
    let offset = round_offset(cfg, round);
    let stage = cfg.stage_for_round(round);
    let views = restore_novel_views(state, data, cfg, restorer, offset, stage)?;
    let ucr_fraction = views
        .iter()
        .map(|v| v.restored.mask.count() as f64 / v.restored.mask.data.len().max(1) as f64)
        .sum::<f64>()
        / views.len().max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((round as u64 + 1) << 40));
    let period = cfg.original_batches + cfg.novel_batches;
    let w = cfg.loss_weights();
    let mut total = 0.0;
    for it in 0..cfg.finetune_iterations {
        let loss = if it % period < cfg.original_batches || views.is_empty() {
            let v = &data.train[rng.random_range(0..data.train.len())];
            original_step(state, cfg, &v.camera, &v.image, &v.sparse)?
        } else {
            let v = &views[rng.random_range(0..views.len())];
            let out = render(&state.scene, &v.camera, v.camera.timestamp)?;
            let l = loss_novel(&out, &v.restored.image, &v.restored.weight, &v.sparse, w)?;
            step_on_loss(state, cfg, &v.camera, l.value, &l.d_color, &l.d_depth)?
        };
        total += loss;
    }

    state.novel_cameras.extend(views.iter().map(|v| CameraEntry {
        frame: v.frame,
        offset,
        camera: v.camera,
    }));
    if cfg.refresh_ledger {
        let lambda = state.ledger.finalize();
        let mut cams = data.train_cameras();
        cams.extend(state.novel_cameras.iter().map(|e| e.camera));
        let mut ledger = FisherLedger::new(state.scene.cloud.len());
        ledger.set_lambda_reg(lambda)?;
        accumulate_views(&mut ledger, &state.scene, &cams)?;
        state.ledger = ledger;
    }
    state.offset = offset;
    state.round += 1;
    state.history.push(MetricsRow {
        phase: "fuse",
        round: state.round,
        iteration: state.iteration,
        offset,
        stage: Some(stage),
        gaussians: state.scene.cloud.len(),
        loss: total / cfg.finetune_iterations.max(1) as f64,
        train_psnr: train_psnr(&state.scene, data)?,
        novel_psnr: Some(novel_psnr(&state.scene, data, cfg, offset)?),
        ucr_fraction: Some(ucr_fraction),
    });
    state.check_sizes()?;
    Ok(views)
}

/// Run the configured number of fusion rounds from the state's current
/// round, calling `on_round` after each.
pub fn fuse(
    state: &mut FusionState,
    data: &Dataset,
    restorer: &dyn Restorer,
    cfg: &TrainConfig,
    mut on_round: impl FnMut(&FusionState, &[NovelView]) -> Result<()>,
) -> Result<()> {
    while state.round < cfg.rounds {
        let views = fusion_round(state, data, restorer, cfg)?;
        on_round(state, &views)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write restored views of a round as PPM plus a manifest each.
pub fn save_restored(dir: &Path, round: usize, views: &[NovelView]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in views {
        let stem = format!("r{round}_{:03}", v.frame);
        formats::save_ppm(&v.restored.image, &dir.join(format!("{stem}.ppm")))?;
        write_text(&dir.join(format!("{stem}.txt")), &manifest(&v.restored))?;
    }
    Ok(())
}

/// Write a checkpoint directory; the parent must exist.
pub fn save_checkpoint(state: &FusionState, train_cameras: &[Camera], cfg: &TrainConfig, dir: &Path) -> Result<()> {
    match std::fs::create_dir(dir) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && dir.is_dir() => {}
        Err(e) => return Err(Error::io(dir, e)),
    }
    let s = &state.scene;
    persist::save_cloud(&s.cloud, &s.tracks, &s.sky, &dir.join("cloud.fsplat"), CloudFormat::Binary)?;
    formats::save_ledger(&state.ledger, &dir.join("ledger.fledg"))?;
    let mut cams: Vec<CameraEntry> = train_cameras
        .iter()
        .enumerate()
        .map(|(frame, c)| CameraEntry {
            frame,
            offset: 0.0,
            camera: *c,
        })
        .collect();
    cams.extend(state.novel_cameras.iter().copied());
    formats::save_cameras(&cams, &dir.join("cameras.txt"))?;
    write_text(
        &dir.join("state.txt"),
        &format!("round = {}\noffset = {:?}\niteration = {}\n", state.round, state.offset, state.iteration),
    )?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&state.history))
}

/// A loaded checkpoint. The metrics history is not parsed back; callers
/// append to `metrics.csv` text instead.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: FusionState,
    pub train_cameras: Vec<Camera>,
    pub config: TrainConfig,
    pub metrics: String,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found"),
        ));
    }
    let scene = persist::load_cloud(&dir.join("cloud.fsplat"))?;
    let ledger = formats::load_ledger(&dir.join("ledger.fledg"))?;
    let cams = formats::load_cameras(&dir.join("cameras.txt"))?;
    let kv = KeyValues::load(&dir.join("state.txt"))?;
    kv.check_keys(&["round", "offset", "iteration"])?;
    let get = |k: &str| kv.get(k).ok_or_else(|| bad_value(k, "missing"));
    let config = TrainConfig::load(&dir.join("config.txt"))?;
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).map_err(|e| Error::io(dir.join("metrics.csv"), e))?;
    let mut state = FusionState::new(scene);
    if ledger.len() != state.scene.cloud.len() {
        return Err(Error::shape(format!("ledger of {}", state.scene.cloud.len()), ledger.len()));
    }
    state.ledger = ledger;
    state.round = parse_value("round", get("round")?)?;
    state.offset = parse_value("offset", get("offset")?)?;
    state.iteration = parse_value("iteration", get("iteration")?)?;
    let (train, novel): (Vec<CameraEntry>, Vec<CameraEntry>) = cams.into_iter().partition(|e| e.offset == 0.0);
    state.novel_cameras = novel;
    Ok(Checkpoint {
        state,
        train_cameras: train.into_iter().map(|e| e.camera).collect(),
        config,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::random_scene;
    use crate::restorer::{IdentityRestorer, OracleRestorer};
    use crate::scene::Gaussian;
    use crate::synth::{generate_dataset, SceneSpec};

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            frames: 4,
            width: 32,
            height: 24,
            focal: 20.0,
            ground_ahead: 8.0,
            ground_spacing: 0.8,
            facade_spacing: 0.9,
            buildings_per_side: 2,
            movers: 1,
            parked: 0,
            car_spacing: 0.6,
            sparse_rate: 0.05,
            eval_offsets: vec![1.0],
            ..SceneSpec::default()
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 40,
            densify_interval: 0,
            log_interval: 20,
            finetune_iterations: 6,
            rounds: 2,
            novel_frame_stride: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_matches_its_definition() {
        let cfg = TrainConfig {
            expansion_start: 3000,
            expansion_stride: 2000,
            lateral_step: 1.0,
            max_offset: 3.0,
            ..TrainConfig::default()
        };
        assert_eq!(expansion_offsets(&cfg, 2999), 0.0);
        assert_eq!(expansion_offsets(&cfg, 3000), 1.0);
        assert_eq!(expansion_offsets(&cfg, 4999), 1.0);
        assert_eq!(expansion_offsets(&cfg, 5000), 2.0);
        assert_eq!(expansion_offsets(&cfg, 7001), 3.0);
        assert_eq!(expansion_offsets(&cfg, 100_000), 3.0);
        let mut prev = 0.0;
        for it in 0..12_000 {
            let o = expansion_offsets(&cfg, it);
            assert!(o >= prev && o <= cfg.max_offset);
            prev = o;
        }
    }

    #[test]
    fn stage_switches_when_offset_reaches_max() {
        let cfg = TrainConfig::default();
        assert_eq!((0..3).map(|r| round_offset(&cfg, r)).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        assert_eq!(cfg.stage_for_round(0), Stage::Video);
        assert_eq!(cfg.stage_for_round(1), Stage::Video);
        assert_eq!(cfg.stage_for_round(2), Stage::Frame);
        let fixed = TrainConfig {
            stage_switch_round: Some(1),
            ..cfg
        };
        assert_eq!(fixed.stage_for_round(1), Stage::Frame);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert!(matches!(TrainConfig::parse("lr = 1\n"), Err(Error::UnknownKey(k)) if k == "lr"));
        assert!(matches!(
            TrainConfig::parse("expansion_stride = 0\n"),
            Err(Error::BadValue { key, .. }) if key == "expansion_stride"
        ));
        assert!(matches!(TrainConfig::parse("restorer_tau = 2\n"), Err(Error::BadValue { .. })));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(2);
        let mut x = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 8.0 * x[1]];
            adam.update(&mut x, &g, |_| 0.01);
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2, "{x:?}");
    }

    #[test]
    fn single_gaussian_fits_a_constant_image() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(Gaussian::isotropic([0.0, 0.0, 4.0], 1.5, 0.5, [0.3, 0.3, 0.3], 0));
        let cam = Camera::looking_forward(16, 16, 16.0);
        let target = RgbImage::filled(16, 16, [0.8, 0.2, 0.6]);
        let mut state = FusionState::new(Scene::new(cloud, vec![], SkyModel::new([0.5; 3])));
        let cfg = TrainConfig {
            lr_mean: 0.0,
            lr_mean_final: 0.0,
            lr_opacity: 0.05,
            lr_sh0: 0.05,
            lr_sky: 0.05,
            lambda_r: 1.0,
            lambda_d: 0.0,
            ..tiny_config()
        };
        let sparse = SparseDepth::default();
        let mut windows = Vec::new();
        let mut acc = 0.0;
        for it in 0..400 {
            acc += original_step(&mut state, &cfg, &cam, &target, &sparse).unwrap();
            if (it + 1) % 100 == 0 {
                windows.push(acc / 100.0);
                acc = 0.0;
            }
        }
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
        let out = render(&state.scene, &cam, 0).unwrap();
        assert!(psnr(&out.color, &target).unwrap() >= 30.0);
    }

    #[test]
    fn zero_iterations_only_build_the_ledger() {
        let (data, _) = generate_dataset(&tiny_spec()).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_config()
        };
        let mut state = FusionState::from_dataset(&data, &cfg);
        let before = state.scene.clone();
        train_original(&mut state, &data, &cfg).unwrap();
        assert_eq!(state.scene, before);
        assert_eq!(state.ledger.views(), data.train.len() as u64);
        assert!(state.ledger.lambda_reg().is_some());
    }

    #[test]
    fn training_improves_and_fusion_runs() {
        let (data, _) = generate_dataset(&tiny_spec()).unwrap();
        let cfg = tiny_config();
        let mut state = FusionState::from_dataset(&data, &cfg);
        let start = train_psnr(&state.scene, &data).unwrap();
        train_original(&mut state, &data, &cfg).unwrap();
        let end = train_psnr(&state.scene, &data).unwrap();
        assert!(end > start, "{start} -> {end}");
        assert_eq!(state.history.len(), 2);

        let oracle = OracleRestorer::new(0.4).unwrap();
        fuse(&mut state, &data, &oracle, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(state.round, 2);
        assert_eq!(state.offset, 2.0);
        assert_eq!(state.novel_cameras.len(), 4);
        let fuse_rows: Vec<_> = state.history.iter().filter(|r| r.phase == "fuse").collect();
        assert_eq!(fuse_rows.len(), 2);
        assert!(fuse_rows.iter().all(|r| r.novel_psnr.is_some()));
        state.check_sizes().unwrap();
    }

    #[test]
    fn identity_round_without_steps_keeps_cloud() {
        let (data, _) = generate_dataset(&tiny_spec()).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            finetune_iterations: 0,
            ..tiny_config()
        };
        let mut state = FusionState::from_dataset(&data, &cfg);
        train_original(&mut state, &data, &cfg).unwrap();
        let before = state.scene.clone();
        fusion_round(&mut state, &data, &IdentityRestorer::default(), &cfg).unwrap();
        assert_eq!(state.scene, before);
        assert_eq!(state.round, 1);
    }

    struct Failing;

    impl Restorer for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn tau(&self) -> f64 {
            0.4
        }
        fn restore_window(&self, _: &[RestoreInput<'_>], _: Stage) -> Result<Vec<RestoredView>> {
            Err(Error::Restorer {
                restorer: "failing".into(),
                message: "boom".into(),
            })
        }
    }

    #[test]
    fn restorer_failure_rolls_back() {
        let (data, _) = generate_dataset(&tiny_spec()).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_config()
        };
        let mut state = FusionState::from_dataset(&data, &cfg);
        train_original(&mut state, &data, &cfg).unwrap();
        let before = (state.scene.clone(), state.ledger.clone(), state.round);
        assert!(matches!(fusion_round(&mut state, &data, &Failing, &cfg), Err(Error::Restorer { .. })));
        assert_eq!((state.scene.clone(), state.ledger.clone(), state.round), before);
    }

    #[test]
    fn nan_loss_reports_divergence() {
        let (scene, cam) = random_scene(2, 4, 16, 16, 0);
        let mut state = FusionState::new(scene);
        let before = state.scene.clone();
        let target = RgbImage::filled(16, 16, [f64::NAN; 3]);
        let err = original_step(&mut state, &tiny_config(), &cam, &target, &SparseDepth::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
        assert_eq!(state.scene, before);
    }

    #[test]
    fn prune_removes_transparent_gaussians_only() {
        let (scene, cam) = random_scene(5, 6, 24, 24, 0);
        let mut scene = scene;
        let before = render(&scene, &cam, 0).unwrap();
        let mut faint = Gaussian::isotropic([0.0, 0.0, 3.0], 0.2, 1e-4, [0.9, 0.1, 0.1], 0);
        faint.group = crate::scene::Group::Background;
        scene.cloud.push(faint);
        let mut state = FusionState::new(scene);
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        densify_prune(&mut state, &cfg, &mut rng).unwrap();
        assert_eq!(state.scene.cloud.len(), 6);
        let after = render(&state.scene, &cam, 0).unwrap();
        for (a, b) in before.color.data.iter().zip(&after.color.data) {
            assert!((a - b).abs() < 1e-6);
        }
        // nothing to prune the second time
        let snapshot = state.scene.clone();
        densify_prune(&mut state, &cfg, &mut rng).unwrap();
        assert_eq!(state.scene, snapshot);
    }

    #[test]
    fn clone_keeps_render_close_and_ledger_sized() {
        let mut cloud = GaussianCloud::new(0);
        cloud.push(Gaussian::isotropic([0.0, 0.0, 4.0], 0.3, 0.6, [0.9, 0.4, 0.2], 0));
        let cam = Camera::looking_forward(24, 24, 24.0);
        let mut state = FusionState::new(Scene::new(cloud, vec![], SkyModel::black()));
        state.ledger = FisherLedger::from_parts(vec![2.5], Some(0.1), 1).unwrap();
        let before = render(&state.scene, &cam, 0).unwrap();
        state.grad_accum[0] = 1.0;
        state.grad_count[0] = 1;
        let cfg = TrainConfig {
            densify_grad_threshold: 0.5,
            ..tiny_config()
        };
        densify_prune(&mut state, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(state.scene.cloud.len(), 2);
        assert_eq!(state.ledger.entries(), &[2.5, 2.5]);
        let after = render(&state.scene, &cam, 0).unwrap();
        let max_diff = before
            .color
            .data
            .iter()
            .zip(&after.color.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // the clone moves by at most half a standard deviation
        assert!(max_diff < 0.15, "{max_diff}");
    }

    #[test]
    fn sparse_projection_to_same_camera_is_identity() {
        let cam = Camera::looking_forward(8, 6, 8.0).with_center(Vector3::new(1.0, 0.0, 2.0));
        let sparse = SparseDepth::new(vec![
            DepthSample {
                x: 1,
                y: 2,
                depth: 3.0,
                valid: true,
            },
            DepthSample {
                x: 7,
                y: 5,
                depth: 5.0,
                valid: true,
            },
        ]);
        let out = project_sparse(&[(cam, &sparse)], &cam);
        assert_eq!(out.samples.len(), 2);
        for (a, b) in out.samples.iter().zip(&sparse.samples) {
            assert_eq!((a.x, a.y), (b.x, b.y));
            assert!((a.depth - b.depth).abs() < 1e-12);
        }
        // one unit to the right: the far sample moves 8/5 px left, the near
        // one leaves the image
        let moved = project_sparse(&[(cam, &sparse)], &cam.shifted_laterally(1.0));
        assert_eq!(moved.samples.len(), 1);
        assert_eq!((moved.samples[0].x, moved.samples[0].y), (5, 5));
        assert!((moved.samples[0].depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (data, _) = generate_dataset(&tiny_spec()).unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny_config()
        };
        let mut state = FusionState::from_dataset(&data, &cfg);
        train_original(&mut state, &data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ck");
        save_checkpoint(&state, &data.train_cameras(), &cfg, &ck).unwrap();
        let back = load_checkpoint(&ck).unwrap();
        assert_eq!(back.state.scene, state.scene);
        assert_eq!(back.state.ledger, state.ledger);
        assert_eq!(back.train_cameras, data.train_cameras());
        assert_eq!(back.config, cfg);
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn schedule_is_monotone_and_capped(
            start in 0usize..5000,
            stride in 1usize..3000,
            step in 0.1f64..2.0,
            cap in 0.0f64..8.0,
            it in 0usize..20_000,
            gap in 0usize..5000,
        ) {
            let cfg = TrainConfig {
                expansion_start: start,
                expansion_stride: stride,
                lateral_step: step,
                max_offset: cap,
                ..TrainConfig::default()
            };
            let (a, b) = (expansion_offsets(&cfg, it), expansion_offsets(&cfg, it + gap));
            proptest::prop_assert!(a <= b);
            proptest::prop_assert!(b <= cap);
            proptest::prop_assert!(a >= 0.0);
        }
    }
}
