//! Synthetic blob scenes, an Adam trainer, and the desk-scale ablation harness.
//!
//! A toy scene is a Gaussian blob moving along a smooth path in the world
//! `z = 0` plane, rendered under per-frame cameras at per-frame world times.
//! A training pair holds a source video (uniform time, one camera) and a
//! target video of the same scene under a time warp and possibly another
//! camera. The model regresses target tokens from source tokens plus the
//! target's control signals.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, Tape};
use crate::camera::{look_at_pose, world_up, CameraPose, CameraTrajectory, Intrinsics, Vec3, WaypointSpec};
use crate::ditblock::{concat_source_target, patchify, target_grid, unpatchify, DitModel, ModelConfig, PreparedInput, Variant};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::seeds;
use crate::tensor::{ParamSet, Tensor};
use crate::timewarp::{generate_warp, WarpKind, WarpSpec, WorldTimeSequence};

/// Camera distance from the scene origin in toy scenes.
pub const TOY_RADIUS: f64 = 5.0;
/// Toy cameras use a longer lens than the dataset default so the blob
/// covers a useful part of a small frame.
pub const TOY_FOCAL_MM: f64 = 50.0;
pub const TOY_ELEVATION_DEG: f64 = 10.0;

/// Smooth blob path `p(τ) = (a_x sin(2π f_x τ + φ_x), a_y sin(2π f_y τ + φ_y), 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobPath {
    pub amplitude: [f64; 2],
    pub frequency: [f64; 2],
    pub phase: [f64; 2],
}

impl BlobPath {
    pub fn sample(seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "blob_path");
        let mut draw = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        Self {
            amplitude: [draw(0.8, 1.6), draw(0.8, 1.6)],
            frequency: [draw(0.3, 0.7), draw(0.3, 0.7)],
            phase: [draw(-PI, PI), draw(-PI, PI)],
        }
    }

    pub fn position(&self, tau: f64) -> Vec3 {
        let c = |k: usize| self.amplitude[k] * (2.0 * PI * self.frequency[k] * tau + self.phase[k]).sin();
        Vec3::new(c(0), c(1), 0.0)
    }
}

/// A rendered toy video with its control annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub seed: u64,
    pub path: BlobPath,
    pub taus: WorldTimeSequence,
    pub traj: CameraTrajectory,
    /// `[F, H, W, 1]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub blob_sigma_px: f64,
}

/// Renders the blob at `path(τ_i)` seen from pose `i` for every frame.
pub fn render_toy_scene(seed: u64, taus: &WorldTimeSequence, traj: &CameraTrajectory, h: usize, w: usize) -> Result<ToyScene> {
    render_with_sigma(seed, taus, traj, h, w, 1.0)
}

pub fn render_with_sigma(seed: u64, taus: &WorldTimeSequence, traj: &CameraTrajectory, h: usize, w: usize, sigma: f64) -> Result<ToyScene> {
    if h < 8 || w < 8 {
        return Err(Error::Domain(format!("toy frames must be at least 8x8, got {h}x{w}")));
    }
    if taus.len() != traj.len() {
        return Err(Error::Mismatch(format!("{} timestamps for {} poses", taus.len(), traj.len())));
    }
    let path = BlobPath::sample(seed);
    let intr = Intrinsics { width_px: w as u32, height_px: h as u32, ..traj.intrinsics };
    let f = taus.len();
    let mut data = vec![0.0; f * h * w];
    for (i, (&tau, pose)) in taus.tau.iter().zip(&traj.poses).enumerate() {
        let Some((bx, by)) = pose.project(&intr, &path.position(tau)) else { continue };
        let frame = &mut data[i * h * w..(i + 1) * h * w];
        for v in 0..h {
            for u in 0..w {
                let dx = u as f64 + 0.5 - bx;
                let dy = v as f64 + 0.5 - by;
                frame[v * w + u] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Ok(ToyScene {
        seed,
        path,
        taus: taus.clone(),
        traj: traj.clone(),
        frames: Tensor::new(vec![f, h, w, 1], data)?,
        blob_sigma_px: sigma,
    })
}

/// Intensity-weighted centroid of one frame, in continuous pixel coordinates.
pub fn blob_centroid(scene: &ToyScene, frame: usize) -> Option<(f64, f64)> {
    let [_, h, w, _] = scene.frames.shape() else { return None };
    let (h, w) = (*h, *w);
    let px = &scene.frames.data()[frame * h * w..(frame + 1) * h * w];
    let (mut s, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for v in 0..h {
        for u in 0..w {
            let p = px[v * w + u];
            s += p;
            sx += p * (u as f64 + 0.5);
            sy += p * (v as f64 + 0.5);
        }
    }
    (s > 0.0).then(|| (sx / s, sy / s))
}

/// How source and target cameras relate in a toy task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraSetup {
    /// One fixed camera shared by source and target.
    Shared,
    /// Fixed source camera; the target orbits from a different azimuth.
    Novel,
}

/// Target time patterns of the toy task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyWarp {
    Linear,
    SlowMotion,
    Pausing,
    Spline,
    RandomSpeed,
    Reversal,
    Frozen,
}

impl ToyWarp {
    pub const TRAIN: [ToyWarp; 3] = [ToyWarp::Linear, ToyWarp::SlowMotion, ToyWarp::Pausing];
    pub const HELD_OUT: [ToyWarp; 3] = [ToyWarp::Spline, ToyWarp::RandomSpeed, ToyWarp::Reversal];

    pub fn name(self) -> &'static str {
        match self {
            ToyWarp::Linear => "linear",
            ToyWarp::SlowMotion => "slow_motion",
            ToyWarp::Pausing => "pausing",
            ToyWarp::Spline => "spline",
            ToyWarp::RandomSpeed => "random_speed",
            ToyWarp::Reversal => "reversal",
            ToyWarp::Frozen => "frozen",
        }
    }

    /// Target world times over the source span `[0, (F−1)/fps]`.
    pub fn realize(self, seed: u64, frames: usize, fps: f64) -> Result<WorldTimeSequence> {
        let duration = (frames - 1) as f64 / fps;
        let mut rng = seeds::rng(seed, "toy_warp");
        let spec = |kind| WarpSpec::new(kind, seeds::derive(seed, "toy_warp_spec"));
        match self {
            ToyWarp::Linear => generate_warp(&spec(WarpKind::Linear), frames, duration, fps),
            ToyWarp::SlowMotion => {
                let factor = rng.gen_range(0.3..0.7);
                let t = generate_warp(&spec(WarpKind::SlowMotion).with_param("factor", factor), frames, duration, fps)?;
                let room = duration - t.tau[frames - 1];
                t.shifted(rng.gen_range(0.0..=room))
            }
            ToyWarp::Pausing => generate_warp(&spec(WarpKind::Pausing), frames, duration, fps),
            ToyWarp::Spline => generate_warp(&spec(WarpKind::Spline), frames, duration, fps),
            ToyWarp::RandomSpeed => generate_warp(&spec(WarpKind::RandomSpeed), frames, duration, fps),
            ToyWarp::Reversal => Ok(WorldTimeSequence::uniform(frames, fps)?.reversed()),
            ToyWarp::Frozen => WorldTimeSequence::new(vec![rng.gen_range(0.0..=duration); frames], fps),
        }
    }
}

/// Shape of the toy task and of the model trained on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub r_t: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub split: [usize; 4],
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub embed: usize,
    pub blob_sigma_px: f64,
    pub camera: CameraSetup,
    pub train_pairs: usize,
    pub eval_pairs: usize,
}

impl ToyConfig {
    pub fn desk(camera: CameraSetup) -> Self {
        Self {
            frames: 8,
            height: 8,
            width: 8,
            fps: 8.0,
            r_t: 2,
            patch: 4,
            dim: 32,
            heads: 2,
            split: [4, 4, 4, 4],
            blocks: 2,
            ffn_hidden: 64,
            embed: 32,
            blob_sigma_px: 1.0,
            camera,
            train_pairs: 256,
            eval_pairs: 48,
        }
    }

    pub fn model(&self, variant: Variant, denoise: bool) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: 1,
            r_t: self.r_t,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            split: self.split,
            blocks: self.blocks,
            ffn_hidden: self.ffn_hidden,
            embed: self.embed,
            adaln_hidden: self.embed,
            denoise,
            variant,
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { focal_mm: TOY_FOCAL_MM, sensor_width_mm: 50.0, width_px: self.width as u32, height_px: self.height as u32 }
    }

    fn camera_at(&self, azimuth_deg: f64) -> Result<CameraPose> {
        let spec = WaypointSpec { lookat_center: [0.0; 3], radius: TOY_RADIUS, azimuth_deg, elevation_deg: TOY_ELEVATION_DEG };
        look_at_pose(&spec, &world_up())
    }

    /// Source and target trajectories for one pair.
    pub fn cameras(&self, seed: u64) -> Result<(CameraTrajectory, CameraTrajectory)> {
        let mut rng = seeds::rng(seed, "toy_camera");
        let base = rng.gen_range(-15.0..15.0);
        let src = CameraTrajectory::constant(self.camera_at(base)?, self.frames, self.intrinsics(), self.fps)?;
        let tgt = match self.camera {
            CameraSetup::Shared => src.clone(),
            CameraSetup::Novel => {
                let a0 = base + rng.gen_range(-40.0..40.0);
                let a1 = a0 + rng.gen_range(-20.0..20.0);
                let poses = (0..self.frames)
                    .map(|i| self.camera_at(a0 + (a1 - a0) * i as f64 / (self.frames - 1).max(1) as f64))
                    .collect::<Result<_>>()?;
                CameraTrajectory::new(poses, self.intrinsics(), self.fps)?
            }
        };
        Ok((src, tgt))
    }
}

/// Source and target renders of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPair {
    pub warp: ToyWarp,
    pub source: ToyScene,
    pub target: ToyScene,
}

impl ToyPair {
    pub fn generate(cfg: &ToyConfig, seed: u64, warp: ToyWarp) -> Result<Self> {
        let (src_cam, tgt_cam) = cfg.cameras(seed)?;
        let src_t = WorldTimeSequence::uniform(cfg.frames, cfg.fps)?;
        let tgt_t = warp.realize(seed, cfg.frames, cfg.fps)?;
        Ok(Self {
            warp,
            source: render_with_sigma(seed, &src_t, &src_cam, cfg.height, cfg.width, cfg.blob_sigma_px)?,
            target: render_with_sigma(seed, &tgt_t, &tgt_cam, cfg.height, cfg.width, cfg.blob_sigma_px)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub pairs: Vec<ToyPair>,
}

impl ToyDataset {
    /// `n` pairs cycling through `warps`, scene seeds derived from `(seed, label, index)`.
    pub fn generate(cfg: &ToyConfig, seed: u64, label: &str, n: usize, warps: &[ToyWarp]) -> Result<Self> {
        if warps.is_empty() {
            return Err(Error::Domain("toy dataset needs at least one warp".into()));
        }
        let pairs = (0..n)
            .map(|i| ToyPair::generate(cfg, seeds::derive_indexed(seed, label, i as u64), warps[i % warps.len()]))
            .collect::<Result<_>>()?;
        Ok(Self { config: cfg.clone(), pairs })
    }

    pub fn train_split(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        Self::generate(cfg, seed, "train", cfg.train_pairs, &ToyWarp::TRAIN)
    }

    pub fn held_out_split(cfg: &ToyConfig, seed: u64) -> Result<Self> {
        Self::generate(cfg, seed, "held_out", cfg.eval_pairs, &ToyWarp::HELD_OUT)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// A pair turned into model inputs for one model.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub input: PreparedInput,
    /// True target tokens `[N_target, patch_dim]`.
    pub target: Tensor,
}

pub fn prepare_pair(model: &DitModel, pair: &ToyPair) -> Result<PreparedPair> {
    let c = &model.config;
    let src = patchify(&pair.source.frames, &pair.source.taus, &pair.source.traj, c.r_t, c.patch)?;
    let tgt = patchify(&pair.target.frames, &pair.target.taus, &pair.target.traj, c.r_t, c.patch)?;
    let blank = target_grid(c, &pair.target.taus, &pair.target.traj)?;
    let grid = concat_source_target(&src, &blank)?;
    Ok(PreparedPair { input: model.prepare(&grid, 0.0)?, target: tgt.tokens })
}

// ---- optimization -----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub iterations: usize,
    pub batch: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Train as an ε-predictor at this single noise level instead of regressing targets.
    #[serde(default)]
    pub noise_level: Option<f64>,
}

impl TrainConfig {
    pub fn desk(variant: Variant, seed: u64) -> Self {
        Self { lr: 1e-3, clip: 1.0, iterations: 2000, batch: 8, seed, variant, noise_level: None }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros: ParamSet = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Training(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(name).expect("moment for every parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment for every parameter").data_mut();
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    /// Mean batch loss at every step.
    pub curve: Vec<f64>,
    /// Largest post-clip gradient norm seen.
    pub max_clipped_norm: f64,
}

fn noisy_input(inp: &PreparedInput, clean: &Tensor, sigma: f64, eps: &Tensor) -> Result<PreparedInput> {
    let mut patches = inp.patches.clone();
    let w = patches.cols();
    let a = (1.0 - sigma * sigma).max(0.0).sqrt();
    for (k, &row) in inp.target_rows.iter().enumerate() {
        let dst = &mut patches.data_mut()[row * w..(row + 1) * w];
        for j in 0..w {
            dst[j] = a * clean.row(k)[j] + sigma * eps.row(k)[j];
        }
    }
    Ok(PreparedInput { patches, noise_level: sigma, ..inp.clone() })
}

fn gaussian_like(rng: &mut impl Rng, t: &Tensor) -> Tensor {
    let data = (0..t.numel()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape of an existing tensor")
}

/// Optimizes the model on prepared pairs. `init` overrides the seeded
/// initialization.
pub fn train_prepared(model: &DitModel, config: &TrainConfig, data: &[PreparedPair], init: Option<ParamSet>) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if config.batch == 0 || !(config.lr > 0.0) || !(config.clip > 0.0) {
        return Err(Error::Domain("batch, lr and clip must be positive".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => model.init(seeds::derive(config.seed, "init"))?,
    };
    let mut adam = Adam::new(config.lr, &params);
    let mut rng = seeds::rng(config.seed, "batches");
    let mut noise_rng = seeds::rng(config.seed, "noise");
    let mut curve = Vec::with_capacity(config.iterations);
    let mut max_clipped: f64 = 0.0;
    for step in 0..config.iterations {
        let idx: Vec<usize> = (0..config.batch).map(|_| rng.gen_range(0..data.len())).collect();
        let noised: Vec<(PreparedInput, Tensor)> = match config.noise_level {
            Some(sigma) => idx
                .iter()
                .map(|&i| {
                    let eps = gaussian_like(&mut noise_rng, &data[i].target);
                    Ok((noisy_input(&data[i].input, &data[i].target, sigma, &eps)?, eps))
                })
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let (loss, mut grads) = crate::autodiff::grad(
            |tape: &mut Tape, vars: &ParamVars| -> Result<_> {
                let mut total = None;
                for (b, &i) in idx.iter().enumerate() {
                    let (inp, tgt) = match config.noise_level {
                        Some(_) => (&noised[b].0, &noised[b].1),
                        None => (&data[i].input, &data[i].target),
                    };
                    let l = model.loss(tape, vars, inp, tgt)?;
                    total = Some(match total {
                        None => l,
                        Some(t) => tape.add(t, l)?,
                    });
                }
                Ok(tape.scale(total.expect("nonempty batch"), 1.0 / idx.len() as f64))
            },
            &params,
        )?;
        let norm = clip_global_norm(&mut grads, config.clip);
        if !loss.is_finite() || !norm.is_finite() {
            let last = curve.iter().rev().find(|l: &&f64| l.is_finite()).copied();
            return Err(Error::Training(format!(
                "{} diverged at step {step}: loss {loss}, gradient norm {norm}, last finite loss {last:?}",
                config.variant
            )));
        }
        max_clipped = max_clipped.max(grads.global_norm());
        adam.step(&mut params, &grads)?;
        curve.push(loss);
        if step % 200 == 0 {
            log::debug!("{} seed {} step {step}: loss {loss:.6}", config.variant, config.seed);
        }
    }
    Ok(TrainOutcome { params, curve, max_clipped_norm: max_clipped })
}

/// Trains a fresh model of `config.variant` on a toy dataset.
pub fn train(toy: &ToyConfig, config: &TrainConfig, data: &ToyDataset) -> Result<(DitModel, TrainOutcome)> {
    let model = DitModel::new(toy.model(config.variant, config.noise_level.is_some()))?;
    let prepared = data.pairs.iter().map(|p| prepare_pair(&model, p)).collect::<Result<Vec<_>>>()?;
    let out = train_prepared(&model, config, &prepared, None)?;
    Ok((model, out))
}

// ---- evaluation -------------------------------------------------------------

/// Reconstruction quality of one pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairEval {
    pub warp: String,
    pub loss: f64,
    pub psnr: f64,
    /// Squared error per target frame.
    pub per_frame: Vec<f64>,
}

/// Predicted target frames `[F, H, W, 1]`, clamped to `[0, 1]`.
pub fn predict_frames(model: &DitModel, params: &ParamSet, pp: &PreparedPair) -> Result<Tensor> {
    tokens_to_frames(model, &model.predict(params, &pp.input)?)
}

fn tokens_to_frames(model: &DitModel, tokens: &Tensor) -> Result<Tensor> {
    let c = &model.config;
    let frames = unpatchify(tokens, c.frames, c.height, c.width, c.channels, c.r_t, c.patch)?;
    Ok(frames.map(|x| x.clamp(0.0, 1.0)))
}

/// One-step clean estimate `x̂₀ = (x_t − σ ε̂)/√(1−σ²)` of an ε-predicting
/// model from a target noised with a seeded draw.
pub fn denoised_frames(model: &DitModel, params: &ParamSet, pp: &PreparedPair, sigma: f64, seed: u64) -> Result<Tensor> {
    let eps = gaussian_like(&mut seeds::rng(seed, "eval_noise"), &pp.target);
    let inp = noisy_input(&pp.input, &pp.target, sigma, &eps)?;
    let eps_hat = model.predict(params, &inp)?;
    let a = (1.0 - sigma * sigma).max(1e-12).sqrt();
    let xt: Vec<f64> = inp.target_rows.iter().flat_map(|&r| inp.patches.row(r).to_vec()).collect();
    let x0: Vec<f64> = xt.iter().zip(eps_hat.data()).map(|(x, e)| (x - sigma * e) / a).collect();
    tokens_to_frames(model, &Tensor::new(pp.target.shape().to_vec(), x0)?)
}

pub fn evaluate_pair(model: &DitModel, params: &ParamSet, pair: &ToyPair, pp: &PreparedPair) -> Result<PairEval> {
    let c = &model.config;
    let pred_tokens = model.predict(params, &pp.input)?;
    let loss = pred_tokens.zip_map(&pp.target, |a, b| (a - b) * (a - b))?.sum() / pp.target.numel() as f64;
    let frames = tokens_to_frames(model, &pred_tokens)?;
    let truth = &pair.target.frames;
    let per = c.height * c.width * c.channels;
    let per_frame = (0..c.frames)
        .map(|f| {
            let a = &frames.data()[f * per..(f + 1) * per];
            let b = &truth.data()[f * per..(f + 1) * per];
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / per as f64
        })
        .collect();
    // frames stacked vertically: PSNR over the whole clip
    let stack = [c.frames * c.height, c.width, c.channels];
    let psnr = psnr(&frames.reshape(&stack)?, &truth.reshape(&stack)?, 1.0)?;
    Ok(PairEval { warp: pair.warp.name().to_string(), loss, psnr, per_frame })
}

/// Mean held-out loss and PSNR over a dataset.
pub fn evaluate(model: &DitModel, params: &ParamSet, data: &ToyDataset) -> Result<(f64, f64, Vec<PairEval>)> {
    let evals = data
        .pairs
        .iter()
        .map(|p| evaluate_pair(model, params, p, &prepare_pair(model, p)?))
        .collect::<Result<Vec<_>>>()?;
    let n = evals.len().max(1) as f64;
    Ok((evals.iter().map(|e| e.loss).sum::<f64>() / n, evals.iter().map(|e| e.psnr).sum::<f64>() / n, evals))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub held_out_loss: f64,
    pub psnr: f64,
    pub final_train_loss: f64,
    #[serde(skip)]
    pub curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_loss: f64,
    pub sd_loss: f64,
    pub mean_psnr: f64,
    pub sd_psnr: f64,
    /// 1 = lowest mean held-out loss.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairwiseOrder {
    pub better: String,
    pub worse: String,
    /// `mean + sd` of the better variant lies below `mean − sd` of the worse one.
    pub separated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub toy: ToyConfig,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
    pub pairwise: Vec<PairwiseOrder>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

impl AblationReport {
    pub fn from_rows(toy: ToyConfig, rows: Vec<AblationRow>) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in &rows {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        let mut summary: Vec<VariantSummary> = names
            .iter()
            .map(|n| {
                let loss: Vec<f64> = rows.iter().filter(|r| &r.variant == n).map(|r| r.held_out_loss).collect();
                let ps: Vec<f64> = rows.iter().filter(|r| &r.variant == n).map(|r| r.psnr).collect();
                let (mean_loss, sd_loss) = mean_sd(&loss);
                let (mean_psnr, sd_psnr) = mean_sd(&ps);
                VariantSummary { variant: n.clone(), runs: loss.len(), mean_loss, sd_loss, mean_psnr, sd_psnr, rank: 0 }
            })
            .collect();
        let mut order: Vec<usize> = (0..summary.len()).collect();
        order.sort_by(|&a, &b| summary[a].mean_loss.total_cmp(&summary[b].mean_loss));
        // equal means share a rank
        let mut rank = 0;
        for (pos, &i) in order.iter().enumerate() {
            if pos == 0 || summary[i].mean_loss != summary[order[pos - 1]].mean_loss {
                rank = pos + 1;
            }
            summary[i].rank = rank;
        }
        let mut pairwise = Vec::new();
        for (ai, &a) in order.iter().enumerate() {
            for &b in &order[ai + 1..] {
                let (x, y) = (&summary[a], &summary[b]);
                pairwise.push(PairwiseOrder {
                    better: x.variant.clone(),
                    worse: y.variant.clone(),
                    separated: x.mean_loss + x.sd_loss < y.mean_loss - y.sd_loss,
                });
            }
        }
        Self { toy, rows, summary, pairwise }
    }

    pub fn summary_of(&self, variant: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    /// `variant,seed,held_out_loss,psnr` rows under the given header comment lines.
    pub fn to_csv(&self, header: &[String]) -> String {
        let mut s = String::new();
        for h in header {
            let _ = writeln!(s, "# {h}");
        }
        s.push_str("variant,seed,held_out_loss,psnr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.9e},{:.6}", r.variant, r.seed, r.held_out_loss, r.psnr);
        }
        s
    }
}

/// Trains each config on the dataset of its seed and scores it on the
/// matching held-out split. Datasets depend only on the seed, so every
/// variant sees identical data.
pub fn run_ablation(toy: &ToyConfig, configs: &[TrainConfig]) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(configs.len());
    let mut cache: Vec<(u64, ToyDataset, ToyDataset)> = Vec::new();
    for cfg in configs {
        if !cache.iter().any(|c| c.0 == cfg.seed) {
            let data_seed = seeds::derive(cfg.seed, "toy_data");
            cache.push((cfg.seed, ToyDataset::train_split(toy, data_seed)?, ToyDataset::held_out_split(toy, data_seed)?));
        }
        let (_, train_set, eval_set) = cache.iter().find(|c| c.0 == cfg.seed).expect("cached above");
        let start = std::time::Instant::now();
        let (model, out) = train(toy, cfg, train_set)?;
        let (held_out_loss, psnr, _) = evaluate(&model, &out.params, eval_set)?;
        let tail = &out.curve[out.curve.len().saturating_sub(50)..];
        log::info!(
            "{} seed {}: held-out loss {held_out_loss:.6}, psnr {psnr:.3} dB ({:.1} s)",
            cfg.variant,
            cfg.seed,
            start.elapsed().as_secs_f64()
        );
        rows.push(AblationRow {
            variant: cfg.variant.name(),
            seed: cfg.seed,
            held_out_loss,
            psnr,
            final_train_loss: if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 },
            curve: out.curve,
        });
    }
    Ok(AblationReport::from_rows(toy.clone(), rows))
}

/// Per-warp reconstruction errors of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WarpReport {
    pub warp: String,
    pub mean_loss: f64,
    pub mean_psnr: f64,
    /// Mean squared pixel error per target frame, averaged over scenes.
    pub per_frame: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneralizationReport {
    pub variant: String,
    pub warps: Vec<WarpReport>,
}

impl GeneralizationReport {
    pub fn mean_loss(&self) -> f64 {
        self.warps.iter().map(|w| w.mean_loss).sum::<f64>() / self.warps.len().max(1) as f64
    }

    /// Whether this (continuous-time) report beats `index` on average.
    pub fn beats(&self, index: &GeneralizationReport) -> bool {
        self.mean_loss() < index.mean_loss()
    }
}

/// Scores a trained model on `scenes` fresh scenes per warp.
pub fn eval_time_generalization(
    toy: &ToyConfig,
    model: &DitModel,
    params: &ParamSet,
    warps: &[ToyWarp],
    scenes: usize,
    seed: u64,
) -> Result<GeneralizationReport> {
    let mut out = Vec::with_capacity(warps.len());
    for &w in warps {
        let data = ToyDataset::generate(toy, seeds::derive(seed, w.name()), "generalization", scenes, &[w])?;
        let (mean_loss, mean_psnr, evals) = evaluate(model, params, &data)?;
        let mut per_frame = vec![0.0; toy.frames];
        for e in &evals {
            for (a, b) in per_frame.iter_mut().zip(&e.per_frame) {
                *a += b / evals.len() as f64;
            }
        }
        out.push(WarpReport { warp: w.name().to_string(), mean_loss, mean_psnr, per_frame });
    }
    Ok(GeneralizationReport { variant: model.config.variant.name(), warps: out })
}

/// `step,loss` lines.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:.9e}");
    }
    s
}
