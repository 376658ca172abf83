//! Feature-level conditioning: Time-AdaLN, Camera-AdaLN and the
//! cross-attention and channel-addition baselines.
//!
//! Every component owns a name prefix and registers its tensors in a
//! shared [`ParamSet`]; `forward` methods record on a [`Tape`] so the
//! whole model differentiates end to end.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamVars, Tape, Var};
use crate::camera::PlueckerMap;
use crate::error::{Error, NumericError, Result};
use crate::tensor::{ParamSet, Tensor, LAYER_NORM_EPS};
use crate::timewarp::WorldTimeSequence;

/// Gaussian weights with standard deviation `1/√fan_in`.
pub fn init_weight<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("matching length")
}

fn name(prefix: &str, field: &str) -> String {
    format!("{prefix}.{field}")
}

/// 1-D convolution over fps-scaled timestamps followed by a two-layer
/// perceptron with SiLU activations.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoder {
    pub prefix: String,
    pub r_t: usize,
    pub width: usize,
}

impl TimeEncoder {
    pub fn new(prefix: impl Into<String>, r_t: usize, width: usize) -> Self {
        Self { prefix: prefix.into(), r_t, width }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let (p, e) = (&self.prefix, self.width);
        params.insert(name(p, "conv.w"), init_weight(rng, &[self.r_t, 1, e], self.r_t))?;
        params.insert(name(p, "conv.b"), Tensor::zeros(&[e]))?;
        params.insert(name(p, "fc1.w"), init_weight(rng, &[e, e], e))?;
        params.insert(name(p, "fc1.b"), Tensor::zeros(&[e]))?;
        params.insert(name(p, "fc2.w"), init_weight(rng, &[e, e], e))?;
        params.insert(name(p, "fc2.b"), Tensor::zeros(&[e]))?;
        Ok(())
    }

    /// Scaled timestamps padded to a whole number of windows. A trailing
    /// partial window is filled with the mean of its own entries, so the
    /// window average matches [`crate::timewarp::pool_to_latent`].
    pub fn prepare_input(&self, taus: &WorldTimeSequence) -> Result<Tensor> {
        let f = taus.len();
        if self.r_t == 0 || f < self.r_t {
            return Err(NumericError::Dimension(format!(
                "{f} frames cannot fill one temporal window of {}",
                self.r_t
            ))
            .into());
        }
        let mut x: Vec<f64> = taus.tau.iter().map(|t| t * taus.fps).collect();
        let rem = f % self.r_t;
        if rem != 0 {
            let tail = &x[f - rem..];
            let mean = tail.iter().sum::<f64>() / rem as f64;
            x.extend(std::iter::repeat(mean).take(self.r_t - rem));
        }
        Ok(Tensor::new(vec![x.len(), 1], x)?)
    }

    /// `[latent_frames, width]` embeddings.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, taus: &WorldTimeSequence) -> Result<Var> {
        let x = tape.constant(self.prepare_input(taus)?);
        self.forward_prepared(tape, vars, x)
    }

    pub fn forward_prepared(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let h = tape.conv1d(x, vars.get(&name(p, "conv.w"))?, self.r_t)?;
        let h = tape.add_row(h, vars.get(&name(p, "conv.b"))?)?;
        let h = tape.silu(h);
        let h = tape.linear(h, vars.get(&name(p, "fc1.w"))?, vars.get(&name(p, "fc1.b"))?)?;
        let h = tape.silu(h);
        Ok(tape.linear(h, vars.get(&name(p, "fc2.w"))?, vars.get(&name(p, "fc2.b"))?)?)
    }
}

/// Evaluates a time encoder outside any training loop.
pub fn encode_time(taus: &WorldTimeSequence, enc: &TimeEncoder, params: &ParamSet) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind_constant(&mut tape, params);
    let out = enc.forward(&mut tape, &vars, taus)?;
    Ok(tape.value(out).clone())
}

/// Scale and shift predictors `f_γ`, `f_β`. The last layer of each starts
/// at zero weight with bias 1 (γ) or 0 (β), so modulation is the identity
/// at initialization for any input.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaLNHead {
    pub prefix: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl AdaLNHead {
    pub fn new(prefix: impl Into<String>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self { prefix: prefix.into(), in_dim, hidden, out_dim }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let p = &self.prefix;
        for (branch, bias) in [("gamma", 1.0), ("beta", 0.0)] {
            params.insert(name(p, &format!("{branch}.fc1.w")), init_weight(rng, &[self.in_dim, self.hidden], self.in_dim))?;
            params.insert(name(p, &format!("{branch}.fc1.b")), Tensor::zeros(&[self.hidden]))?;
            params.insert(name(p, &format!("{branch}.fc2.w")), Tensor::zeros(&[self.hidden, self.out_dim]))?;
            params.insert(name(p, &format!("{branch}.fc2.b")), Tensor::full(&[self.out_dim], bias))?;
        }
        Ok(())
    }

    /// `(γ, β)`, each `[M, out_dim]`, for `M` embedding rows.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, emb: Var) -> Result<(Var, Var)> {
        let p = &self.prefix;
        let mut out = Vec::with_capacity(2);
        for branch in ["gamma", "beta"] {
            let get = |f: &str| vars.get(&name(p, &format!("{branch}.{f}")));
            let h = tape.linear(emb, get("fc1.w")?, get("fc1.b")?)?;
            let h = tape.silu(h);
            out.push(tape.linear(h, get("fc2.w")?, get("fc2.b")?)?);
        }
        Ok((out[0], out[1]))
    }
}

/// `x ⊙ γ[group] + β[group]`, where `group[i]` selects the modulation row of token `i`.
pub fn modulate(tape: &mut Tape, x: Var, gamma: Var, beta: Var, group: &Rc<Vec<usize>>) -> Result<Var> {
    let n = tape.value(x).rows();
    if group.len() != n {
        return Err(NumericError::Dimension(format!("{} group indices for {n} tokens", group.len())).into());
    }
    let g = tape.gather_rows(gamma, group.clone())?;
    let b = tape.gather_rows(beta, group.clone())?;
    let y = tape.mul(x, g)?;
    Ok(tape.add(y, b)?)
}

/// `LN(z) ⊙ f_γ(e) + f_β(e)` with the embedding of each token's latent frame.
pub fn adaln_modulate(
    z: &Tensor,
    embedding: &Tensor,
    frame_of_token: &[usize],
    head: &AdaLNHead,
    params: &ParamSet,
) -> Result<Tensor> {
    if frame_of_token.iter().any(|&f| f >= embedding.rows()) {
        return Err(NumericError::Dimension(format!(
            "token frame index outside {} embeddings",
            embedding.rows()
        ))
        .into());
    }
    let mut tape = Tape::new();
    let vars = ParamVars::bind_constant(&mut tape, params);
    let zv = tape.constant(z.clone());
    let normed = tape.layer_norm(zv, LAYER_NORM_EPS)?;
    let e = tape.constant(embedding.clone());
    let (g, b) = head.forward(&mut tape, &vars, e)?;
    let out = modulate(&mut tape, normed, g, b, &Rc::new(frame_of_token.to_vec()))?;
    Ok(tape.value(out).clone())
}

/// Plücker map to token features: a `p×p` stride-`p` convolution
/// (6 → width), SiLU, then a 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraEncoder {
    pub prefix: String,
    pub patch: usize,
    pub width: usize,
}

impl CameraEncoder {
    pub fn new(prefix: impl Into<String>, patch: usize, width: usize) -> Self {
        Self { prefix: prefix.into(), patch, width }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let (p, k, e) = (&self.prefix, self.patch, self.width);
        params.insert(name(p, "conv1.w"), init_weight(rng, &[k, k, 6, e], k * k * 6))?;
        params.insert(name(p, "conv1.b"), Tensor::zeros(&[e]))?;
        params.insert(name(p, "conv2.w"), init_weight(rng, &[1, 1, e, e], e))?;
        params.insert(name(p, "conv2.b"), Tensor::zeros(&[e]))?;
        Ok(())
    }

    /// `[H, W, 6]` tensor of a Plücker map.
    pub fn input(&self, pmap: &PlueckerMap) -> Result<Tensor> {
        if self.patch == 0 || pmap.height % self.patch != 0 || pmap.width % self.patch != 0 {
            return Err(NumericError::Dimension(format!(
                "{}x{} Plücker map is not divisible by patch {}",
                pmap.height, pmap.width, self.patch
            ))
            .into());
        }
        Ok(Tensor::new(vec![pmap.height, pmap.width, 6], pmap.data.clone())?)
    }

    /// Token features `[(H/p)·(W/p), width]` in row-major patch order.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, map: Var) -> Result<Var> {
        let p = &self.prefix;
        let [h, w, _] = tape.shape(map)[..] else {
            return Err(NumericError::Dimension("camera encoder input must be [H, W, 6]".into()).into());
        };
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(NumericError::Dimension(format!("{h}x{w} map is not divisible by patch {}", self.patch)).into());
        }
        let x = tape.conv2d(map, vars.get(&name(p, "conv1.w"))?, self.patch)?;
        let tokens = (h / self.patch) * (w / self.patch);
        let x = tape.reshape(x, &[tokens, self.width])?;
        let x = tape.add_row(x, vars.get(&name(p, "conv1.b"))?)?;
        let x = tape.silu(x);
        let x = tape.reshape(x, &[h / self.patch, w / self.patch, self.width])?;
        let x = tape.conv2d(x, vars.get(&name(p, "conv2.w"))?, 1)?;
        let x = tape.reshape(x, &[tokens, self.width])?;
        Ok(tape.add_row(x, vars.get(&name(p, "conv2.b"))?)?)
    }
}

pub fn encode_camera(pmap: &PlueckerMap, enc: &CameraEncoder, params: &ParamSet) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::bind_constant(&mut tape, params);
    let x = tape.constant(enc.input(pmap)?);
    let out = enc.forward(&mut tape, &vars, x)?;
    Ok(tape.value(out).clone())
}

/// Single-head residual cross-attention from tokens to condition tokens,
/// with a zero-initialized output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub prefix: String,
    pub dim: usize,
    pub cond_dim: usize,
}

impl CrossAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, cond_dim: usize) -> Self {
        Self { prefix: prefix.into(), dim, cond_dim }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) -> Result<()> {
        let (p, d, e) = (&self.prefix, self.dim, self.cond_dim);
        params.insert(name(p, "wq"), init_weight(rng, &[d, d], d))?;
        params.insert(name(p, "wk"), init_weight(rng, &[e, d], e))?;
        params.insert(name(p, "wv"), init_weight(rng, &[e, d], e))?;
        params.insert(name(p, "wo"), Tensor::zeros(&[d, d]))?;
        params.insert(name(p, "bo"), Tensor::zeros(&[d]))?;
        Ok(())
    }

    /// `z + softmax((z W_Q)(c W_K)ᵀ/√d)(c W_V) W_O + b_O`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, z: Var, cond: Var) -> Result<Var> {
        let p = &self.prefix;
        let q = tape.matmul(z, vars.get(&name(p, "wq"))?)?;
        let k = tape.matmul(cond, vars.get(&name(p, "wk"))?)?;
        let v = tape.matmul(cond, vars.get(&name(p, "wv"))?)?;
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let att = tape.softmax_rows(logits)?;
        let ctx = tape.matmul(att, v)?;
        let out = tape.linear(ctx, vars.get(&name(p, "wo"))?, vars.get(&name(p, "bo"))?)?;
        Ok(tape.add(z, out)?)
    }
}

pub fn cross_attention_condition(z: &Tensor, cond_tokens: &Tensor, xattn: &CrossAttention, params: &ParamSet) -> Result<Tensor> {
    if z.shape().len() != 2 || z.cols() != xattn.dim || cond_tokens.shape().len() != 2 || cond_tokens.cols() != xattn.cond_dim {
        return Err(Error::Numeric(NumericError::Dimension(format!(
            "cross-attention expects [N, {}] tokens and [M, {}] conditions, got {:?} and {:?}",
            xattn.dim,
            xattn.cond_dim,
            z.shape(),
            cond_tokens.shape()
        ))));
    }
    let mut tape = Tape::new();
    let vars = ParamVars::bind_constant(&mut tape, params);
    let zv = tape.constant(z.clone());
    let c = tape.constant(cond_tokens.clone());
    let out = xattn.forward(&mut tape, &vars, zv, c)?;
    Ok(tape.value(out).clone())
}

/// Adds a zero-initialized projection of per-group condition features.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAdd {
    pub prefix: String,
    pub cond_dim: usize,
    pub dim: usize,
}

impl ChannelAdd {
    pub fn new(prefix: impl Into<String>, cond_dim: usize, dim: usize) -> Self {
        Self { prefix: prefix.into(), cond_dim, dim }
    }

    pub fn init(&self, params: &mut ParamSet) -> Result<()> {
        params.insert(name(&self.prefix, "w"), Tensor::zeros(&[self.cond_dim, self.dim]))?;
        params.insert(name(&self.prefix, "b"), Tensor::zeros(&[self.dim]))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, z: Var, cond: Var, group: &Rc<Vec<usize>>) -> Result<Var> {
        let proj = tape.linear(cond, vars.get(&name(&self.prefix, "w"))?, vars.get(&name(&self.prefix, "b"))?)?;
        let per_token = tape.gather_rows(proj, group.clone())?;
        Ok(tape.add(z, per_token)?)
    }
}

/// `z + features[group]`, features already in token width.
pub fn channel_add_condition(z: &Tensor, cond_features: &Tensor, group: &[usize]) -> Result<Tensor> {
    if cond_features.shape().len() != 2 || cond_features.cols() != z.cols() || group.len() != z.rows() {
        return Err(NumericError::Dimension(format!(
            "channel addition of {:?} features onto {:?} tokens with {} group indices",
            cond_features.shape(),
            z.shape(),
            group.len()
        ))
        .into());
    }
    let mut out = z.clone();
    let d = z.cols();
    for (i, &g) in group.iter().enumerate() {
        if g >= cond_features.rows() {
            return Err(NumericError::Dimension(format!("group {g} outside {} feature rows", cond_features.rows())).into());
        }
        for (o, c) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(cond_features.row(g)) {
            *o += c;
        }
    }
    Ok(out)
}
