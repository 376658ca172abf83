//! Desk-scale 4D-controllable transformer: patchify, self-attention with
//! 4D rotary encodings, conditioning hooks, and source/target token
//! concatenation for video-to-video generation.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BlockLinearMaps, ParamVars, Tape, Var};
use crate::camera::{pluecker_map, CameraPose, CameraTrajectory};
use crate::conditioning::{init_weight, modulate, AdaLNHead, CameraEncoder, ChannelAdd, CrossAttention, TimeEncoder};
use crate::error::{Error, NumericError, Result};
use crate::rope4d::{translation_scale, RotaryMaps, RotaryPlan, RotaryPositions, TokenCoords};
use crate::seeds;
use crate::tensor::{ParamSet, Tensor, LAYER_NORM_EPS};
use crate::timewarp::{pool_to_latent, WorldTimeSequence};

/// How world time reaches the feature stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeConditioning {
    None,
    AdaLN,
    CrossAttention,
    ChannelAdd,
}

/// Conditioning configuration of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    /// Continuous-time rotary on the time slice (otherwise latent frame indices).
    pub time_rope: bool,
    /// Relative-pose transform on the camera slice.
    pub camera_rope: bool,
    pub time_cond: TimeConditioning,
    pub camera_adaln: bool,
}

impl Variant {
    /// World-time conditioning comparison, fixed cameras.
    pub const TIME_VARIANTS: [&'static str; 7] =
        ["rope+xattn", "rope+chadd", "rope+adaln", "trope", "trope+xattn", "trope+chadd", "trope+adaln"];

    /// Component ablation of joint camera and time conditioning.
    pub const COMPONENT_VARIANTS: [&'static str; 3] = ["full", "no_adaln", "no_4d_rope"];

    pub fn unconditioned(time_rope: bool) -> Self {
        Self { time_rope, camera_rope: false, time_cond: TimeConditioning::None, camera_adaln: false }
    }

    /// Same attention encoding with every learnable conditioning pathway removed.
    pub fn stripped(self) -> Self {
        Self { time_cond: TimeConditioning::None, camera_adaln: false, ..self }
    }

    pub fn name(&self) -> String {
        let c = |t: TimeConditioning| match t {
            TimeConditioning::None => "",
            TimeConditioning::AdaLN => "adaln",
            TimeConditioning::CrossAttention => "xattn",
            TimeConditioning::ChannelAdd => "chadd",
        };
        match (self.time_rope, self.camera_rope, self.time_cond, self.camera_adaln) {
            (true, true, TimeConditioning::AdaLN, true) => "full".into(),
            (true, true, TimeConditioning::None, false) => "no_adaln".into(),
            (false, false, TimeConditioning::AdaLN, true) => "no_4d_rope".into(),
            (tr, false, t, false) => {
                let base = if tr { "trope" } else { "rope" };
                match t {
                    TimeConditioning::None => base.into(),
                    t => format!("{base}+{}", c(t)),
                }
            }
            (tr, cr, t, ca) => format!(
                "custom(time_rope={tr},camera_rope={cr},time={},camera_adaln={ca})",
                if c(t).is_empty() { "none" } else { c(t) }
            ),
        }
    }

    pub fn uses_time_embedding(&self) -> bool {
        self.time_cond != TimeConditioning::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = |time_rope, time_cond| Variant { time_rope, camera_rope: false, time_cond, camera_adaln: false };
        Ok(match s {
            "rope" => v(false, TimeConditioning::None),
            "rope+xattn" => v(false, TimeConditioning::CrossAttention),
            "rope+chadd" => v(false, TimeConditioning::ChannelAdd),
            "rope+adaln" => v(false, TimeConditioning::AdaLN),
            "trope" => v(true, TimeConditioning::None),
            "trope+xattn" => v(true, TimeConditioning::CrossAttention),
            "trope+chadd" => v(true, TimeConditioning::ChannelAdd),
            "trope+adaln" => v(true, TimeConditioning::AdaLN),
            "full" => Variant { time_rope: true, camera_rope: true, time_cond: TimeConditioning::AdaLN, camera_adaln: true },
            "no_adaln" => Variant { time_rope: true, camera_rope: true, time_cond: TimeConditioning::None, camera_adaln: false },
            "no_4d_rope" => Variant { time_rope: false, camera_rope: false, time_cond: TimeConditioning::AdaLN, camera_adaln: true },
            other => return Err(Error::Domain(format!("unknown variant {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub r_t: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    /// Channel split of one head: time, height, width, camera.
    pub split: [usize; 4],
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub embed: usize,
    pub adaln_hidden: usize,
    /// Adds a learned noise-level embedding to target tokens.
    pub denoise: bool,
    pub variant: Variant,
}

impl ModelConfig {
    /// Width 64, 2 heads of 32 channels split 8/8/8/8, 2 blocks,
    /// r_t = 2, p = 2, 8 frames at 16×16.
    pub fn desk(variant: Variant) -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            channels: 1,
            r_t: 2,
            patch: 2,
            dim: 64,
            heads: 2,
            split: [8, 8, 8, 8],
            blocks: 2,
            ffn_hidden: 128,
            embed: 64,
            adaln_hidden: 64,
            denoise: false,
            variant,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn latent_frames(&self) -> usize {
        self.frames.div_ceil(self.r_t.max(1))
    }

    pub fn patch_dim(&self) -> usize {
        self.r_t * self.patch * self.patch * self.channels
    }

    pub fn tokens_per_video(&self) -> usize {
        self.latent_frames() * (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    pub fn plan(&self) -> Result<RotaryPlan> {
        let [t, h, w, c] = self.split;
        RotaryPlan::new(self.head_dim(), t, h, w, c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Domain(format!("width {} is not divisible into {} heads", self.dim, self.heads)));
        }
        if self.r_t == 0 || self.patch == 0 || self.frames == 0 || self.channels == 0 {
            return Err(Error::Domain("frames, channels, r_t and patch must be positive".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(NumericError::Dimension(format!(
                "{}x{} frames are not divisible by patch {}",
                self.height, self.width, self.patch
            ))
            .into());
        }
        self.plan()?;
        Ok(())
    }
}

// ---- patchify ---------------------------------------------------------------

/// Frames of one video in the token grid, with its control signals.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub taus: WorldTimeSequence,
    pub traj: CameraTrajectory,
    pub latent_frames: usize,
    pub r_t: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub is_source: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub coords: Vec<TokenCoords>,
    /// Latent frame of each token, counted across all segments.
    pub frame: Vec<usize>,
    pub segment: Vec<usize>,
    pub source_flag: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn total_latent_frames(&self) -> usize {
        self.segments.iter().map(|s| s.latent_frames).sum()
    }

    /// Indices of target (non-source) tokens.
    pub fn target_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.source_flag[i]).collect()
    }

    /// Same grid with replaced token features.
    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != self.len() {
            return Err(NumericError::Dimension(format!("{:?} tokens for a grid of {}", tokens.shape(), self.len())).into());
        }
        Ok(Self { tokens, ..self.clone() })
    }

    /// Applies a token permutation to features and coordinates together.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(NumericError::Dimension("permutation length".into()).into());
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| self.tokens.row(i).to_vec()).collect();
        Ok(Self {
            tokens: Tensor::from_rows(&rows),
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            frame: perm.iter().map(|&i| self.frame[i]).collect(),
            segment: perm.iter().map(|&i| self.segment[i]).collect(),
            source_flag: perm.iter().map(|&i| self.source_flag[i]).collect(),
            segments: self.segments.clone(),
        })
    }
}

fn video_dims(video: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match video.shape() {
        [f, h, w, c] => Ok((*f, *h, *w, *c)),
        s => Err(NumericError::Dimension(format!("video must be [F, H, W, C], got {s:?}")).into()),
    }
}

/// Splits a `[F, H, W, C]` video into `r_t × p × p` patches ordered by
/// latent frame, then row, then column. Patch features are laid out
/// `(dt, dy, dx, c)`. A trailing partial window repeats the last frame.
pub fn patchify(video: &Tensor, taus: &WorldTimeSequence, traj: &CameraTrajectory, r_t: usize, p: usize) -> Result<TokenGrid> {
    let (f, h, w, c) = video_dims(video)?;
    if r_t == 0 || p == 0 || h % p != 0 || w % p != 0 {
        return Err(NumericError::Dimension(format!("{h}x{w} frames are not divisible by patch {p} (r_t = {r_t})")).into());
    }
    if taus.len() != f || traj.len() != f {
        return Err(Error::Mismatch(format!("{f} frames with {} timestamps and {} poses", taus.len(), traj.len())));
    }
    let t_lat = f.div_ceil(r_t);
    let (gh, gw) = (h / p, w / p);
    let pooled = pool_to_latent(taus, r_t)?;
    let pd = r_t * p * p * c;
    let data = video.data();
    let mut tokens = Vec::with_capacity(t_lat * gh * gw * pd);
    let mut coords = Vec::with_capacity(t_lat * gh * gw);
    for t in 0..t_lat {
        for gy in 0..gh {
            for gx in 0..gw {
                for dt in 0..r_t {
                    let fi = (t * r_t + dt).min(f - 1);
                    for dy in 0..p {
                        let row = ((fi * h) + gy * p + dy) * w + gx * p;
                        tokens.extend_from_slice(&data[row * c..(row + p) * c]);
                    }
                }
                coords.push(TokenCoords { tau: pooled.tau[t], h: gy, w: gx, pose_index: t * r_t });
            }
        }
    }
    let n = coords.len();
    Ok(TokenGrid {
        tokens: Tensor::new(vec![n, pd], tokens)?,
        frame: (0..n).map(|i| i / (gh * gw)).collect(),
        segment: vec![0; n],
        source_flag: vec![true; n],
        coords,
        segments: vec![Segment {
            taus: taus.clone(),
            traj: traj.clone(),
            latent_frames: t_lat,
            r_t,
            grid_h: gh,
            grid_w: gw,
            is_source: true,
        }],
    })
}

/// Inverse of [`patchify`] for a single-segment grid of `frames` frames.
pub fn unpatchify(tokens: &Tensor, frames: usize, h: usize, w: usize, c: usize, r_t: usize, p: usize) -> Result<Tensor> {
    let (gh, gw) = (h / p, w / p);
    let t_lat = frames.div_ceil(r_t);
    let pd = r_t * p * p * c;
    if tokens.shape() != [t_lat * gh * gw, pd] {
        return Err(NumericError::Dimension(format!("{:?} tokens cannot form a {frames}x{h}x{w}x{c} video", tokens.shape())).into());
    }
    let mut out = vec![0.0; frames * h * w * c];
    for t in 0..t_lat {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = tokens.row((t * gh + gy) * gw + gx);
                for dt in 0..r_t {
                    let fi = t * r_t + dt;
                    if fi >= frames {
                        continue;
                    }
                    for dy in 0..p {
                        let row = ((fi * h) + gy * p + dy) * w + gx * p;
                        let src = &tok[(dt * p + dy) * p * c..][..p * c];
                        out[row * c..(row + p) * c].copy_from_slice(src);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![frames, h, w, c], out)?)
}

/// A target grid: zero features over the control signals `taus`/`traj`.
pub fn target_grid(cfg: &ModelConfig, taus: &WorldTimeSequence, traj: &CameraTrajectory) -> Result<TokenGrid> {
    let blank = Tensor::zeros(&[cfg.frames, cfg.height, cfg.width, cfg.channels]);
    let mut g = patchify(&blank, taus, traj, cfg.r_t, cfg.patch)?;
    g.source_flag.iter_mut().for_each(|f| *f = false);
    g.segments[0].is_source = false;
    Ok(g)
}

/// Concatenates grids along the frame axis; attention later spans both.
pub fn concat_source_target(source: &TokenGrid, target: &TokenGrid) -> Result<TokenGrid> {
    if target.is_empty() {
        return Ok(source.clone());
    }
    if source.is_empty() {
        return Ok(target.clone());
    }
    if source.width() != target.width() {
        return Err(NumericError::Dimension(format!("token widths {} and {} differ", source.width(), target.width())).into());
    }
    let mut data = source.tokens.data().to_vec();
    data.extend_from_slice(target.tokens.data());
    let frame_off = source.total_latent_frames();
    let seg_off = source.segments.len();
    let mut segments = source.segments.clone();
    segments.extend(target.segments.iter().cloned());
    Ok(TokenGrid {
        tokens: Tensor::new(vec![source.len() + target.len(), source.width()], data)?,
        coords: source.coords.iter().chain(&target.coords).copied().collect(),
        frame: source.frame.iter().copied().chain(target.frame.iter().map(|f| f + frame_off)).collect(),
        segment: source.segment.iter().copied().chain(target.segment.iter().map(|s| s + seg_off)).collect(),
        source_flag: source.source_flag.iter().chain(&target.source_flag).copied().collect(),
        segments,
    })
}

// ---- model ------------------------------------------------------------------

/// Descriptor of one transformer block; tensors live in a [`ParamSet`]
/// under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub plan: RotaryPlan,
    pub variant: Variant,
    pub time_encoder: TimeEncoder,
    pub time_adaln: AdaLNHead,
    pub camera_encoder: CameraEncoder,
    pub camera_adaln: AdaLNHead,
    pub xattn: CrossAttention,
    pub chadd: ChannelAdd,
}

/// One block together with its parameter values.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub block: Block,
    pub params: ParamSet,
}

impl Block {
    pub fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let sub = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            prefix: prefix.to_string(),
            dim: cfg.dim,
            heads: cfg.heads,
            ffn_hidden: cfg.ffn_hidden,
            plan: cfg.plan()?,
            variant: cfg.variant,
            time_encoder: TimeEncoder::new(sub("time_enc"), cfg.r_t, cfg.embed),
            time_adaln: AdaLNHead::new(sub("time_adaln"), cfg.embed, cfg.adaln_hidden, 2 * cfg.dim),
            camera_encoder: CameraEncoder::new(sub("cam_enc"), cfg.patch, cfg.embed),
            camera_adaln: AdaLNHead::new(sub("cam_adaln"), cfg.embed, cfg.adaln_hidden, 2 * cfg.dim),
            xattn: CrossAttention::new(sub("xattn"), cfg.dim, cfg.embed),
            chadd: ChannelAdd::new(sub("chadd"), cfg.embed, cfg.dim),
        })
    }

    fn p(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// Registers this block's tensors. Each tensor group draws from its own
    /// named random stream, so shared tensors are identical across variants.
    pub fn init(&self, params: &mut ParamSet, seed: u64) -> Result<()> {
        let d = self.dim;
        let mut rng = seeds::rng(seed, &self.p("attn"));
        for w in ["wq", "wk", "wv", "wo"] {
            params.insert(self.p(&format!("attn.{w}")), init_weight(&mut rng, &[d, d], d))?;
            params.insert(self.p(&format!("attn.b{}", &w[1..])), Tensor::zeros(&[d]))?;
        }
        let mut rng = seeds::rng(seed, &self.p("ffn"));
        params.insert(self.p("ffn.w1"), init_weight(&mut rng, &[d, self.ffn_hidden], d))?;
        params.insert(self.p("ffn.b1"), Tensor::zeros(&[self.ffn_hidden]))?;
        params.insert(self.p("ffn.w2"), init_weight(&mut rng, &[self.ffn_hidden, d], self.ffn_hidden))?;
        params.insert(self.p("ffn.b2"), Tensor::zeros(&[d]))?;
        let v = self.variant;
        if v.uses_time_embedding() {
            self.time_encoder.init(params, &mut seeds::rng(seed, &self.time_encoder.prefix))?;
        }
        match v.time_cond {
            TimeConditioning::AdaLN => self.time_adaln.init(params, &mut seeds::rng(seed, &self.time_adaln.prefix))?,
            TimeConditioning::CrossAttention => self.xattn.init(params, &mut seeds::rng(seed, &self.xattn.prefix))?,
            TimeConditioning::ChannelAdd => self.chadd.init(params)?,
            TimeConditioning::None => {}
        }
        if v.camera_adaln {
            self.camera_encoder.init(params, &mut seeds::rng(seed, &self.camera_encoder.prefix))?;
            self.camera_adaln.init(params, &mut seeds::rng(seed, &self.camera_adaln.prefix))?;
        }
        Ok(())
    }

    /// Records one block on the tape. Attention probabilities of every head
    /// are pushed to `trace` when given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        inp: &PreparedInput,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let g = |name: &str| vars.get(&self.p(name));
        let d = self.dim;
        let time_emb = if self.variant.uses_time_embedding() {
            let parts = inp
                .time_inputs
                .iter()
                .map(|t| {
                    let c = tape.constant(t.clone());
                    self.time_encoder.forward_prepared(tape, vars, c)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? })
        } else {
            None
        };
        // (γ, β) of width 2d: the first half modulates the attention input,
        // the second half the feed-forward input.
        let mut mods: Vec<(Var, Var, &Rc<Vec<usize>>)> = Vec::new();
        if let (TimeConditioning::AdaLN, Some(e)) = (self.variant.time_cond, time_emb) {
            let (gm, bt) = self.time_adaln.forward(tape, vars, e)?;
            mods.push((gm, bt, &inp.frame_group));
        }
        if self.variant.camera_adaln {
            let parts = inp
                .camera_inputs
                .iter()
                .map(|m| {
                    let c = tape.constant(m.clone());
                    self.camera_encoder.forward(tape, vars, c)
                })
                .collect::<Result<Vec<_>>>()?;
            let feats = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
            let (gm, bt) = self.camera_adaln.forward(tape, vars, feats)?;
            mods.push((gm, bt, &inp.camera_group));
        }
        let apply_mods = |tape: &mut Tape, mut u: Var, half: usize| -> Result<Var> {
            for &(gm, bt, group) in &mods {
                let gh = tape.slice_cols(gm, half * d, d)?;
                let bh = tape.slice_cols(bt, half * d, d)?;
                u = modulate(tape, u, gh, bh, group)?;
            }
            Ok(u)
        };

        let mut x = x;
        if let (TimeConditioning::ChannelAdd, Some(e)) = (self.variant.time_cond, time_emb) {
            x = self.chadd.forward(tape, vars, x, e, &inp.frame_group)?;
        }
        let h = tape.layer_norm(x, LAYER_NORM_EPS)?;
        let h = apply_mods(tape, h, 0)?;
        let q = tape.linear(h, g("attn.wq")?, g("attn.bq")?)?;
        let k = tape.linear(h, g("attn.wk")?, g("attn.bk")?)?;
        let v = tape.linear(h, g("attn.wv")?, g("attn.bv")?)?;
        let q = tape.block_linear(q, inp.rope_q.clone())?;
        let k = tape.block_linear(k, inp.rope_k.clone())?;
        let hd = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, 1.0 / (hd as f64).sqrt());
            let att = tape.softmax_rows(logits)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(att);
            }
            outs.push(tape.matmul(att, vh)?);
        }
        let a = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = tape.linear(a, g("attn.wo")?, g("attn.bo")?)?;
        let mut x1 = tape.add(x, o)?;
        if let (TimeConditioning::CrossAttention, Some(e)) = (self.variant.time_cond, time_emb) {
            x1 = self.xattn.forward(tape, vars, x1, e)?;
        }
        let u = tape.layer_norm(x1, LAYER_NORM_EPS)?;
        let u = apply_mods(tape, u, 1)?;
        let f = tape.linear(u, g("ffn.w1")?, g("ffn.b1")?)?;
        let f = tape.silu(f);
        let f = tape.linear(f, g("ffn.w2")?, g("ffn.b2")?)?;
        Ok(tape.add(x1, f)?)
    }
}

/// Everything a forward pass needs besides parameters, derived once per grid.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub patches: Tensor,
    pub type_index: Rc<Vec<usize>>,
    pub rope_q: Rc<BlockLinearMaps>,
    pub rope_k: Rc<BlockLinearMaps>,
    pub frame_group: Rc<Vec<usize>>,
    /// Encoder inputs per segment, `[F_padded, 1]`.
    pub time_inputs: Vec<Tensor>,
    /// Plücker maps per latent frame across segments, `[H, W, 6]`.
    pub camera_inputs: Vec<Tensor>,
    pub camera_group: Rc<Vec<usize>>,
    pub target_rows: Rc<Vec<usize>>,
    pub noise_level: f64,
}

/// Builds the rotary maps for a grid under a variant.
pub fn rotary_maps(grid: &TokenGrid, plan: &RotaryPlan, heads: usize, variant: Variant) -> Result<RotaryMaps> {
    let n = grid.len();
    let mut time = Vec::with_capacity(n);
    for (c, &s) in grid.coords.iter().zip(&grid.segment) {
        let seg = &grid.segments[s];
        if variant.time_rope {
            time.push(c.tau * seg.taus.fps / seg.r_t as f64);
        } else {
            time.push((c.pose_index / seg.r_t) as f64);
        }
    }
    let height: Vec<f64> = grid.coords.iter().map(|c| c.h as f64).collect();
    let width: Vec<f64> = grid.coords.iter().map(|c| c.w as f64).collect();
    let poses: Vec<CameraPose>;
    let scale;
    let pose_arg = if variant.camera_rope {
        poses = grid
            .coords
            .iter()
            .zip(&grid.segment)
            .map(|(c, &s)| {
                grid.segments[s].traj.poses.get(c.pose_index).copied().ok_or_else(|| {
                    Error::from(NumericError::Dimension(format!("pose index {} outside its trajectory", c.pose_index)))
                })
            })
            .collect::<Result<_>>()?;
        let all: Vec<CameraPose> = grid.segments.iter().flat_map(|s| s.traj.poses.iter().copied()).collect();
        scale = translation_scale(&all);
        Some((poses.as_slice(), scale))
    } else {
        None
    };
    let pos = RotaryPositions { time: Some(&time), height: Some(&height), width: Some(&width), poses: pose_arg };
    RotaryMaps::build(plan, n, heads, &pos)
}

#[derive(Clone, Debug)]
pub struct DitModel {
    pub config: ModelConfig,
    pub blocks: Vec<Block>,
}

impl DitModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.blocks).map(|i| Block::new(&format!("block{i}"), &config)).collect::<Result<_>>()?;
        Ok(Self { config, blocks })
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let c = &self.config;
        let mut params = ParamSet::new();
        let pd = c.patch_dim();
        let mut rng = seeds::rng(seed, "embed");
        params.insert("embed.w", init_weight(&mut rng, &[pd, c.dim], pd))?;
        params.insert("embed.b", Tensor::zeros(&[c.dim]))?;
        params.insert("embed.type", init_weight(&mut rng, &[2, c.dim], 1))?;
        let mut rng = seeds::rng(seed, "head");
        params.insert("head.w", init_weight(&mut rng, &[c.dim, pd], c.dim))?;
        params.insert("head.b", Tensor::zeros(&[pd]))?;
        if c.denoise {
            params.insert("embed.noise", init_weight(&mut seeds::rng(seed, "noise"), &[1, c.dim], 1))?;
        }
        for b in &self.blocks {
            b.init(&mut params, seed)?;
        }
        Ok(params)
    }

    pub fn prepare(&self, grid: &TokenGrid, noise_level: f64) -> Result<PreparedInput> {
        let c = &self.config;
        if grid.width() != c.patch_dim() {
            return Err(NumericError::Dimension(format!("grid width {} but patch dim {}", grid.width(), c.patch_dim())).into());
        }
        let maps = rotary_maps(grid, &self.blocks[0].plan, c.heads, c.variant)?;
        let time_inputs = if c.variant.uses_time_embedding() {
            grid.segments.iter().map(|s| self.blocks[0].time_encoder.prepare_input(&s.taus)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut camera_inputs = Vec::new();
        let mut camera_group = Vec::new();
        if c.variant.camera_adaln {
            let mut frame_base = Vec::with_capacity(grid.segments.len());
            let mut rows = 0;
            for s in &grid.segments {
                frame_base.push(rows);
                for t in 0..s.latent_frames {
                    let pose = s.traj.poses[(t * c.r_t).min(s.traj.len() - 1)];
                    let intr = crate::camera::Intrinsics { width_px: c.width as u32, height_px: c.height as u32, ..s.traj.intrinsics };
                    camera_inputs.push(self.blocks[0].camera_encoder.input(&pluecker_map(&pose, &intr))?);
                }
                rows += s.latent_frames * s.grid_h * s.grid_w;
            }
            for (i, co) in grid.coords.iter().enumerate() {
                let s = &grid.segments[grid.segment[i]];
                let local_frame = co.pose_index / c.r_t;
                camera_group.push(frame_base[grid.segment[i]] + (local_frame * s.grid_h + co.h) * s.grid_w + co.w);
            }
        }
        Ok(PreparedInput {
            patches: grid.tokens.clone(),
            type_index: Rc::new(grid.source_flag.iter().map(|&s| if s { 0 } else { 1 }).collect()),
            rope_q: Rc::new(maps.q),
            rope_k: Rc::new(maps.k),
            frame_group: Rc::new(grid.frame.clone()),
            time_inputs,
            camera_inputs,
            camera_group: Rc::new(camera_group),
            target_rows: Rc::new(grid.target_indices()),
            noise_level,
        })
    }

    /// Token predictions `[N, patch_dim]` for every token.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, inp: &PreparedInput, mut trace: Option<&mut Vec<Var>>) -> Result<Var> {
        let x = tape.constant(inp.patches.clone());
        let x = tape.linear(x, vars.get("embed.w")?, vars.get("embed.b")?)?;
        let ty = tape.gather_rows(vars.get("embed.type")?, inp.type_index.clone())?;
        let mut x = tape.add(x, ty)?;
        if self.config.denoise {
            let n = tape.value(x).rows();
            let levels: Vec<f64> = inp.type_index.iter().map(|&t| if t == 1 { inp.noise_level } else { 0.0 }).collect();
            let lv = tape.constant(Tensor::new(vec![n, 1], levels)?);
            let e = tape.matmul(lv, vars.get("embed.noise")?)?;
            x = tape.add(x, e)?;
        }
        for b in &self.blocks {
            x = b.forward(tape, vars, x, inp, trace.as_deref_mut())?;
        }
        let x = tape.layer_norm(x, LAYER_NORM_EPS)?;
        Ok(tape.linear(x, vars.get("head.w")?, vars.get("head.b")?)?)
    }

    /// Mean squared error between predicted and true target tokens.
    pub fn loss(&self, tape: &mut Tape, vars: &ParamVars, inp: &PreparedInput, target: &Tensor) -> Result<Var> {
        let out = self.forward(tape, vars, inp, None)?;
        let pred = tape.gather_rows(out, inp.target_rows.clone())?;
        if tape.value(pred).shape() != target.shape() {
            return Err(NumericError::Dimension(format!(
                "target {:?} for predictions {:?}",
                target.shape(),
                tape.value(pred).shape()
            ))
            .into());
        }
        let t = tape.constant(target.clone());
        let d = tape.sub(pred, t)?;
        let s = tape.square(d);
        Ok(tape.mean(s))
    }

    pub fn predict(&self, params: &ParamSet, inp: &PreparedInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = ParamVars::bind_constant(&mut tape, params);
        let out = self.forward(&mut tape, &vars, inp, None)?;
        let pred = tape.gather_rows(out, inp.target_rows.clone())?;
        Ok(tape.value(pred).clone())
    }

    /// Attention probabilities of every block and head.
    pub fn attention_weights(&self, params: &ParamSet, inp: &PreparedInput) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = ParamVars::bind_constant(&mut tape, params);
        let mut trace = Vec::new();
        self.forward(&mut tape, &vars, inp, Some(&mut trace))?;
        Ok(trace.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// Runs one block on a grid whose tokens already have the model width.
pub fn block_forward(grid: &TokenGrid, bp: &BlockParams) -> Result<TokenGrid> {
    let b = &bp.block;
    if grid.width() != b.dim {
        return Err(NumericError::Dimension(format!("grid width {} for block width {}", grid.width(), b.dim)).into());
    }
    let maps = rotary_maps(grid, &b.plan, b.heads, b.variant)?;
    let r_t = b.time_encoder.r_t;
    let time_inputs = if b.variant.uses_time_embedding() {
        grid.segments.iter().map(|s| b.time_encoder.prepare_input(&s.taus)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut camera_inputs = Vec::new();
    let mut camera_group = Vec::new();
    if b.variant.camera_adaln {
        let mut base = Vec::new();
        let mut rows = 0;
        for s in &grid.segments {
            base.push(rows);
            let (h, w) = (s.grid_h * b.camera_encoder.patch, s.grid_w * b.camera_encoder.patch);
            for t in 0..s.latent_frames {
                let pose = s.traj.poses[(t * r_t).min(s.traj.len() - 1)];
                let intr = crate::camera::Intrinsics { width_px: w as u32, height_px: h as u32, ..s.traj.intrinsics };
                camera_inputs.push(b.camera_encoder.input(&pluecker_map(&pose, &intr))?);
            }
            rows += s.latent_frames * s.grid_h * s.grid_w;
        }
        for (i, co) in grid.coords.iter().enumerate() {
            let s = &grid.segments[grid.segment[i]];
            camera_group.push(base[grid.segment[i]] + ((co.pose_index / r_t) * s.grid_h + co.h) * s.grid_w + co.w);
        }
    }
    let inp = PreparedInput {
        patches: grid.tokens.clone(),
        type_index: Rc::new(Vec::new()),
        rope_q: Rc::new(maps.q),
        rope_k: Rc::new(maps.k),
        frame_group: Rc::new(grid.frame.clone()),
        time_inputs,
        camera_inputs,
        camera_group: Rc::new(camera_group),
        target_rows: Rc::new(Vec::new()),
        noise_level: 0.0,
    };
    let mut tape = Tape::new();
    let vars = ParamVars::bind_constant(&mut tape, &bp.params);
    let x = tape.constant(grid.tokens.clone());
    let out = b.forward(&mut tape, &vars, x, &inp, None)?;
    grid.with_tokens(tape.value(out).clone())
}
