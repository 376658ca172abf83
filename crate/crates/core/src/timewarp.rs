//! World-time sequences and the remapping functions that generate them.
//!
//! A [`WorldTimeSequence`] assigns a continuous timestamp (seconds) to each
//! output frame. Generators in this module produce the linear timeline and
//! its remapped variants: slow motion, pausing, random local speed changes
//! and a monotone-spline warp. Every generated sequence starts at 0, never
//! decreases and never passes the source duration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower bound on the per-step playback speed (world seconds per video second).
pub const DEFAULT_MIN_SPEED: f64 = 0.25;
/// Default upper bound on the per-step playback speed.
pub const DEFAULT_MAX_SPEED: f64 = 4.0;

const BOUND_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldTimeSequence {
    pub tau: Vec<f64>,
    pub fps: f64,
}

impl WorldTimeSequence {
    pub fn new(tau: Vec<f64>, fps: f64) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::Domain("world-time sequence needs at least one frame".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Domain(format!("fps must be positive, got {fps}")));
        }
        if let Some(bad) = tau.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::Domain(format!("timestamps must be finite and non-negative, got {bad}")));
        }
        Ok(Self { tau, fps })
    }

    /// The uniform timeline `τ_i = i / fps`.
    pub fn uniform(frames: usize, fps: f64) -> Result<Self> {
        Self::new((0..frames).map(|i| i as f64 / fps).collect(), fps)
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    /// Per-step playback speeds `(τ_{i+1} − τ_i) · fps`.
    pub fn speeds(&self) -> Vec<f64> {
        self.tau.windows(2).map(|w| (w[1] - w[0]) * self.fps).collect()
    }

    /// The same timestamps played backwards. Generators never emit this;
    /// it exists for callers that want an explicit reversal control.
    pub fn reversed(&self) -> Self {
        let mut tau = self.tau.clone();
        tau.reverse();
        Self { tau, fps: self.fps }
    }

    /// Adds a constant offset to every timestamp.
    pub fn shifted(&self, offset: f64) -> Result<Self> {
        Self::new(self.tau.iter().map(|t| t + offset).collect(), self.fps)
    }

    /// Timestamps rounded to nanoseconds, the precision used in files.
    pub fn rounded_seconds(&self) -> Vec<f64> {
        self.tau.iter().map(|&t| round_seconds(t)).collect()
    }
}

/// Rounds a timestamp to 9 decimal places.
pub fn round_seconds(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    Linear,
    SlowMotion,
    Pausing,
    RandomSpeed,
    Spline,
}

impl WarpKind {
    pub const ALL: [WarpKind; 5] =
        [WarpKind::Linear, WarpKind::SlowMotion, WarpKind::Pausing, WarpKind::RandomSpeed, WarpKind::Spline];

    pub fn name(self) -> &'static str {
        match self {
            WarpKind::Linear => "linear",
            WarpKind::SlowMotion => "slow_motion",
            WarpKind::Pausing => "pausing",
            WarpKind::RandomSpeed => "random_speed",
            WarpKind::Spline => "spline",
        }
    }

    /// Kinds whose per-step speed must stay within the declared slope bounds.
    pub fn is_slope_bounded(self) -> bool {
        matches!(self, WarpKind::RandomSpeed | WarpKind::Spline)
    }
}

impl fmt::Display for WarpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WarpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WarpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown warp kind {s:?}")))
    }
}

/// A remapping recipe: kind, kind-specific parameters and a seed.
///
/// Recognized parameters (all optional):
/// - `linear`: `speed` (default 1)
/// - `slow_motion`: `factor` (default 0.5)
/// - `pausing`: `pause_from`, `pause_to` (frame indices, held pose inclusive)
/// - `random_speed`: `s_min`, `s_max`, `segments` (default 4)
/// - `spline`: `s_min`, `s_max`, `control_points` (4–8, sampled when absent)
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub kind: WarpKind,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

impl WarpSpec {
    pub fn new(kind: WarpKind, seed: u64) -> Self {
        Self { kind, params: BTreeMap::new(), seed }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    /// Declared `(s_min, s_max)` slope bounds.
    pub fn slope_bounds(&self) -> (f64, f64) {
        (self.param("s_min", DEFAULT_MIN_SPEED), self.param("s_max", DEFAULT_MAX_SPEED))
    }

    pub fn validate(&self, frames: usize, duration: f64) -> Result<()> {
        let (lo, hi) = self.slope_bounds();
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Domain(format!("slope bounds must satisfy 0 ≤ s_min ≤ s_max, got [{lo}, {hi}]")));
        }
        if self.kind == WarpKind::Pausing {
            if let (Some(&a), Some(&b)) = (self.params.get("pause_from"), self.params.get("pause_to")) {
                if !(a >= 0.0 && a < b && b <= (frames - 1) as f64) {
                    return Err(Error::Domain(format!("pause interval [{a}, {b}] outside 0..{}", frames - 1)));
                }
            }
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::Domain(format!("duration must be positive, got {duration}")));
        }
        Ok(())
    }
}

/// Generates the world-time sequence described by `spec`.
pub fn generate_warp(spec: &WarpSpec, frames: usize, duration: f64, fps: f64) -> Result<WorldTimeSequence> {
    if frames < 2 {
        return Err(Error::Domain(format!("warps need at least 2 frames, got {frames}")));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Domain(format!("fps must be positive, got {fps}")));
    }
    spec.validate(frames, duration)?;
    let steps = frames - 1;
    let (s_min, s_max) = spec.slope_bounds();
    // one ulp of slack so specs sitting exactly on the boundary are accepted
    if spec.kind.is_slope_bounded() && s_min * steps as f64 / fps > duration * (1.0 + 1e-12) {
        return Err(Error::Infeasible(format!(
            "minimum speed {s_min} over {steps} steps at {fps} fps needs {} s, duration is {duration} s",
            s_min * steps as f64 / fps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let increments: Vec<f64> = match spec.kind {
        WarpKind::Linear => vec![spec.param("speed", 1.0) / fps; steps],
        WarpKind::SlowMotion => vec![spec.param("factor", 0.5) / fps; steps],
        WarpKind::Pausing => {
            let (from, to) = match (spec.params.get("pause_from"), spec.params.get("pause_to")) {
                (Some(&a), Some(&b)) => (a as usize, b as usize),
                _ => {
                    let max_len = (steps / 3).max(1);
                    let len = rng.gen_range(1..=max_len);
                    let from = rng.gen_range(0..=steps - len);
                    (from, from + len)
                }
            };
            (0..steps).map(|i| if i >= from && i < to { 0.0 } else { 1.0 / fps }).collect()
        }
        WarpKind::RandomSpeed => {
            let segments = (spec.param("segments", 4.0) as usize).clamp(1, steps);
            let speeds: Vec<f64> = (0..segments).map(|_| sample_speed(&mut rng, s_min, s_max)).collect();
            let per_step: Vec<f64> = (0..steps).map(|i| speeds[i * segments / steps]).collect();
            fit_span(&per_step, s_min, s_max, duration * fps).into_iter().map(|s| s / fps).collect()
        }
        WarpKind::Spline => {
            let n_ctrl = match spec.params.get("control_points") {
                Some(&c) => (c as usize).clamp(2, frames),
                None => rng.gen_range(4..=8usize).min(frames),
            };
            let per_step = spline_speeds(&mut rng, n_ctrl, steps, s_min, s_max);
            fit_span(&per_step, s_min, s_max, duration * fps).into_iter().map(|s| s / fps).collect()
        }
    };

    let mut tau = Vec::with_capacity(frames);
    let mut t = 0.0;
    tau.push(t);
    for inc in increments {
        t = (t + inc).min(duration);
        tau.push(t);
    }
    WorldTimeSequence::new(tau, fps)
}

fn sample_speed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Adjusts per-step speeds so they sum to `target` (clamped to what the
/// bounds allow) while staying inside `[lo, hi]`.
///
/// Shrinking rescales the excess above `lo`; growing rescales the headroom
/// below `hi`. Both maps keep every speed inside the bounds.
fn fit_span(speeds: &[f64], lo: f64, hi: f64, target: f64) -> Vec<f64> {
    let n = speeds.len() as f64;
    let target = target.clamp(lo * n, hi * n);
    let total: f64 = speeds.iter().sum();
    if (total - target).abs() <= f64::EPSILON * target.abs() {
        return speeds.to_vec();
    }
    if total > target {
        let excess = total - lo * n;
        let c = if excess > 0.0 { (target - lo * n) / excess } else { 0.0 };
        speeds.iter().map(|&s| (lo + (s - lo) * c).clamp(lo, hi)).collect()
    } else {
        let headroom = hi * n - total;
        let c = if headroom > 0.0 { (hi * n - target) / headroom } else { 0.0 };
        speeds.iter().map(|&s| (hi - (hi - s) * c).clamp(lo, hi)).collect()
    }
}

/// Per-step speeds of a monotone cubic through randomly sampled control
/// points, with each step's speed clipped to `[lo, hi]`.
fn spline_speeds(rng: &mut ChaCha8Rng, n_ctrl: usize, steps: usize, lo: f64, hi: f64) -> Vec<f64> {
    // Knots evenly spaced over the frame-index axis; knot values integrate
    // sampled per-interval speeds, so the control polygon is monotone.
    let xs: Vec<f64> = (0..n_ctrl).map(|k| k as f64 * steps as f64 / (n_ctrl - 1) as f64).collect();
    let mut ys = vec![0.0; n_ctrl];
    for k in 1..n_ctrl {
        ys[k] = ys[k - 1] + sample_speed(rng, lo, hi) * (xs[k] - xs[k - 1]);
    }
    let spline = MonotoneCubic::new(xs, ys);
    let values: Vec<f64> = (0..=steps).map(|i| spline.eval(i as f64)).collect();
    values.windows(2).map(|w| (w[1] - w[0]).clamp(lo, hi)).collect()
}

/// Piecewise-cubic Hermite interpolant with Fritsch–Carlson slopes; it is
/// monotone whenever the data are.
#[derive(Clone, Debug)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    /// `xs` must be strictly increasing and of the same length (≥ 2) as `ys`.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert!(xs.len() == ys.len() && xs.len() >= 2, "need ≥ 2 matching knots");
        let n = xs.len();
        let secants: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])).collect();
        let mut slopes = vec![0.0; n];
        slopes[0] = secants[0];
        slopes[n - 1] = secants[n - 2];
        for k in 1..n - 1 {
            let (a, b) = (secants[k - 1], secants[k]);
            slopes[k] = if a * b <= 0.0 {
                0.0
            } else {
                let (h0, h1) = (xs[k] - xs[k - 1], xs[k + 1] - xs[k]);
                let (w1, w2) = (2.0 * h1 + h0, h1 + 2.0 * h0);
                (w1 + w2) / (w1 / a + w2 / b)
            };
        }
        // Clamp endpoint slopes so no interval overshoots (α, β ≤ 3).
        for k in 0..n - 1 {
            let s = secants[k];
            if s == 0.0 {
                slopes[k] = 0.0;
                slopes[k + 1] = 0.0;
                continue;
            }
            let (a, b) = (slopes[k] / s, slopes[k + 1] / s);
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                slopes[k] = t * a * s;
                slopes[k + 1] = t * b * s;
            }
        }
        Self { xs, ys, slopes }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let k = self.xs.partition_point(|&v| v <= x) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[k] + h10 * h * self.slopes[k] + h01 * self.ys[k + 1] + h11 * h * self.slopes[k + 1]
    }
}

/// The easing curve `3t² − 2t³` on `[0, 1]`.
pub fn eval_smoothstep(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("smoothstep argument {t} outside [0, 1]")));
    }
    Ok(t * t * (3.0 - 2.0 * t))
}

/// True iff the sequence never decreases.
pub fn validate_monotone(tau: &WorldTimeSequence) -> bool {
    tau.tau.windows(2).all(|w| w[1] >= w[0])
}

/// Checks the per-step speed bounds with a 1e-9 slack.
pub fn within_slope_bounds(tau: &WorldTimeSequence, lo: f64, hi: f64) -> bool {
    tau.speeds().iter().all(|&s| s >= lo - BOUND_SLACK && s <= hi + BOUND_SLACK)
}

/// Averages consecutive groups of `factor` timestamps. A trailing partial
/// group averages whatever frames remain.
pub fn pool_to_latent(tau: &WorldTimeSequence, factor: usize) -> Result<WorldTimeSequence> {
    if factor == 0 {
        return Err(Error::Domain("pooling factor must be positive".into()));
    }
    let pooled = tau.tau.chunks(factor).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    WorldTimeSequence::new(pooled, tau.fps)
}
