//! Camera-accuracy and masked image-similarity metrics.
//!
//! Trajectories are compared after first-frame gauge normalization: every
//! pose is expressed relative to frame 0 (`P₀⁻¹Pᵢ`). Translation errors are
//! additionally aligned by the least-squares scale.

use serde::Serialize;

use crate::camera::{CameraTrajectory, Mat3, Vec3};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Declared comparison protocol, written into report headers.
pub const TRAJECTORY_CONVENTION: &str = "per-frame errors after first-frame normalization P0^-1 Pi; \
rotation: geodesic angle in degrees, mean over frames; translation: least-squares scale alignment, mean residual in meters";

fn relative_to_first(traj: &CameraTrajectory) -> Vec<(Mat3, Vec3)> {
    let first = traj.poses[0];
    let r0t = first.rotation.transpose();
    traj.poses.iter().map(|p| (r0t * p.rotation, r0t * (p.translation - first.translation))).collect()
}

fn check_pair(est: &CameraTrajectory, gt: &CameraTrajectory, min_len: usize) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::Mismatch(format!("estimated trajectory has {} frames, ground truth {}", est.len(), gt.len())));
    }
    if est.len() < min_len {
        return Err(Error::Domain(format!("need at least {min_len} frames, got {}", est.len())));
    }
    for p in est.poses.iter().chain(&gt.poses) {
        p.validate()?;
    }
    Ok(())
}

/// Angle of a rotation matrix in degrees.
///
/// Uses `atan2(‖axis‖, tr − 1)` with the skew part as the axis, since
/// `acos` of the trace loses about half the digits near zero.
pub fn geodesic_deg(r: &Mat3) -> f64 {
    let axis = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    axis.norm().atan2(r.trace() - 1.0).to_degrees()
}

/// Per-frame rotation errors in degrees.
pub fn rotation_errors(est: &CameraTrajectory, gt: &CameraTrajectory) -> Result<Vec<f64>> {
    check_pair(est, gt, 1)?;
    Ok(relative_to_first(est)
        .iter()
        .zip(relative_to_first(gt))
        .map(|((re, _), (rg, _))| geodesic_deg(&(re.transpose() * rg)))
        .collect())
}

pub fn rot_err(est: &CameraTrajectory, gt: &CameraTrajectory) -> Result<f64> {
    let e = rotation_errors(est, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TranslationAlignment {
    pub scale: f64,
    /// Set when the estimate has no translation at all and the scale was fixed to 1.
    pub degenerate: bool,
    pub residuals: Vec<f64>,
    pub mean: f64,
}

pub fn translation_alignment(est: &CameraTrajectory, gt: &CameraTrajectory) -> Result<TranslationAlignment> {
    check_pair(est, gt, 2)?;
    let te: Vec<Vec3> = relative_to_first(est).into_iter().map(|(_, t)| t).collect();
    let tg: Vec<Vec3> = relative_to_first(gt).into_iter().map(|(_, t)| t).collect();
    let den: f64 = te.iter().map(|t| t.norm_squared()).sum();
    let num: f64 = te.iter().zip(&tg).map(|(a, b)| a.dot(b)).sum();
    let degenerate = den == 0.0;
    let scale = if degenerate { 1.0 } else { num / den };
    let residuals: Vec<f64> = te.iter().zip(&tg).map(|(a, b)| (scale * a - b).norm()).collect();
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    Ok(TranslationAlignment { scale, degenerate, residuals, mean })
}

pub fn trans_err(est: &CameraTrajectory, gt: &CameraTrajectory) -> Result<f64> {
    Ok(translation_alignment(est, gt)?.mean)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryReport {
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub scale: f64,
    pub degenerate_scale: bool,
    pub rotation_per_frame: Vec<f64>,
    pub translation_per_frame: Vec<f64>,
}

impl TrajectoryReport {
    pub fn compute(est: &CameraTrajectory, gt: &CameraTrajectory) -> Result<Self> {
        let rot = rotation_errors(est, gt)?;
        let tr = translation_alignment(est, gt)?;
        Ok(Self {
            rot_err_deg: rot.iter().sum::<f64>() / rot.len() as f64,
            trans_err: tr.mean,
            scale: tr.scale,
            degenerate_scale: tr.degenerate,
            rotation_per_frame: rot,
            translation_per_frame: tr.residuals,
        })
    }

    /// One row per frame plus a `mean` summary row. `header` lines are
    /// emitted first, each prefixed with `# `.
    pub fn to_csv(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            out.push_str(&format!("# {h}\n"));
        }
        out.push_str(&format!("# convention: {TRAJECTORY_CONVENTION}\n"));
        out.push_str(&format!("# scale: {}{}\n", self.scale, if self.degenerate_scale { " (degenerate, fixed to 1)" } else { "" }));
        out.push_str("frame,rot_err_deg,trans_err\n");
        for (i, (r, t)) in self.rotation_per_frame.iter().zip(&self.translation_per_frame).enumerate() {
            out.push_str(&format!("{i},{r},{t}\n"));
        }
        out.push_str(&format!("mean,{},{}\n", self.rot_err_deg, self.trans_err));
        out
    }
}

// ---- images ----------------------------------------------------------------

/// Two `[H, W, C]` images plus a `[H, W]` mask (nonzero = evaluate).
#[derive(Clone, Debug)]
pub struct MaskedImagePair<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub mask: &'a [bool],
}

fn image_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let dims = match a.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Domain(format!("images must be [H, W] or [H, W, C], got {s:?}"))),
    };
    if a.shape() != b.shape() {
        return Err(Error::Mismatch(format!("image shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(dims)
}

impl<'a> MaskedImagePair<'a> {
    pub fn new(a: &'a Tensor, b: &'a Tensor, mask: &'a [bool]) -> Result<Self> {
        let (h, w, _) = image_dims(a, b)?;
        if mask.len() != h * w {
            return Err(Error::Mismatch(format!("mask has {} entries for a {h}x{w} image", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Domain("mask selects no pixels".into()));
        }
        Ok(Self { a, b, mask })
    }
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn masked_mean(pair: &MaskedImagePair<'_>, f: impl Fn(f64, f64) -> f64) -> f64 {
    let c = pair.a.numel() / pair.mask.len();
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, &m) in pair.mask.iter().enumerate() {
        if m {
            for ch in 0..c {
                let i = p * c + ch;
                acc += f(pair.a.data()[i], pair.b.data()[i]);
            }
            n += c;
        }
    }
    acc / n as f64
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let (h, w, _) = image_dims(a, b)?;
    let mask = vec![true; h * w];
    mpsnr(&MaskedImagePair::new(a, b, &mask)?, peak)
}

pub fn mpsnr(pair: &MaskedImagePair<'_>, peak: f64) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::Domain(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(masked_mean(pair, |x, y| (x - y) * (x - y)), peak))
}

pub fn mmae(pair: &MaskedImagePair<'_>) -> f64 {
    masked_mean(pair, |x, y| (x - y).abs())
}

pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w, _) = image_dims(a, b)?;
    let mask = vec![true; h * w];
    Ok(mmae(&MaskedImagePair::new(a, b, &mask)?))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect()
}

/// Per-pixel SSIM map averaged over channels. Windows are truncated at the
/// image border and renormalized over the in-bounds weights.
pub fn ssim_map(a: &Tensor, b: &Tensor, peak: f64) -> Result<Vec<f64>> {
    let (h, w, c) = image_dims(a, b)?;
    let g = gaussian_window();
    let r = (SSIM_WINDOW / 2) as isize;
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (da, db) = (a.data(), b.data());
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut total = 0.0;
            for ch in 0..c {
                let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -r..=r {
                    let yy = y + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                        let i = (yy as usize * w + xx as usize) * c + ch;
                        let (va, vb) = (da[i], db[i]);
                        sw += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (ma, mb) = (ma / sw, mb / sw);
                let va = (saa / sw - ma * ma).max(0.0);
                let vb = (sbb / sw - mb * mb).max(0.0);
                let cov = sab / sw - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            out[y as usize * w + x as usize] = total / c as f64;
        }
    }
    Ok(out)
}

pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = ssim_map(a, b, peak)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Mean SSIM over windows whose center pixel is inside the mask.
pub fn mssim(pair: &MaskedImagePair<'_>, peak: f64) -> Result<f64> {
    let m = ssim_map(pair.a, pair.b, peak)?;
    let (sum, n) = m
        .iter()
        .zip(pair.mask)
        .filter(|(_, &k)| k)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    Ok(sum / n as f64)
}
