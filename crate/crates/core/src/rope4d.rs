//! Rotary encodings over continuous time, latent rows/columns and camera pose.
//!
//! Each head's channels are laid out as `[time | height | width | camera]`.
//! The rotary slices are split into 2-channel pairs rotated by `R(pos·θ_k)`;
//! the camera slice is split into 4-channel homogeneous blocks. Queries get
//! `Dᵀ` (or `P⁻ᵀ` on camera blocks) and keys get the matching factor so
//! that every logit depends only on relative time and relative pose.

use serde::{Deserialize, Serialize};

use crate::autodiff::BlockLinearMaps;
use crate::camera::{CameraPose, CameraTrajectory, Vec3};
use crate::error::{Error, NumericError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BASE: f64 = 10000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotaryPlan {
    pub head_dim: usize,
    pub base: f64,
    pub d_t: usize,
    pub d_h: usize,
    pub d_w: usize,
    pub d_c: usize,
    /// Multiplier applied to timestamps before rotation (frames per second
    /// of the token grid), so uniform timestamps reduce to frame indices.
    pub time_scale: f64,
}

impl RotaryPlan {
    pub fn new(head_dim: usize, d_t: usize, d_h: usize, d_w: usize, d_c: usize) -> Result<Self> {
        let plan = Self { head_dim, base: DEFAULT_BASE, d_t, d_h, d_w, d_c, time_scale: 1.0 };
        plan.validate()?;
        Ok(plan)
    }

    /// Equal quarters for time, height, width and camera.
    pub fn even_split(head_dim: usize) -> Result<Self> {
        if head_dim % 16 != 0 {
            return Err(Error::Domain(format!("even split needs head_dim divisible by 16, got {head_dim}")));
        }
        let q = head_dim / 4;
        Self::new(head_dim, q, q, q, q)
    }

    pub fn with_time_scale(mut self, scale: f64) -> Self {
        self.time_scale = scale;
        self
    }

    pub fn with_base(mut self, base: f64) -> Self {
        self.base = base;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.d_t + self.d_h + self.d_w + self.d_c;
        if self.head_dim == 0 || self.head_dim % 2 != 0 || sum != self.head_dim {
            return Err(Error::Domain(format!(
                "channel split {}+{}+{}+{} does not partition head_dim {}",
                self.d_t, self.d_h, self.d_w, self.d_c, self.head_dim
            )));
        }
        if self.d_t % 2 != 0 || self.d_h % 2 != 0 || self.d_w % 2 != 0 || self.d_c % 4 != 0 {
            return Err(Error::Domain("rotary slices must be even and the camera slice divisible by 4".into()));
        }
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(Error::Domain(format!("rotary base must exceed 1, got {}", self.base)));
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(Error::Domain(format!("time scale must be positive, got {}", self.time_scale)));
        }
        Ok(())
    }

    /// Frequencies `θ_k = b^(−2(k−1)/(d′/2))` for a rotary slice of width `d′`.
    pub fn frequencies(&self, width: usize) -> Vec<f64> {
        let pairs = width / 2;
        (0..pairs).map(|k| self.base.powf(-2.0 * k as f64 / pairs as f64)).collect()
    }

    pub fn time_offset(&self) -> usize {
        0
    }

    pub fn height_offset(&self) -> usize {
        self.d_t
    }

    pub fn width_offset(&self) -> usize {
        self.d_t + self.d_h
    }

    pub fn camera_offset(&self) -> usize {
        self.d_t + self.d_h + self.d_w
    }
}

/// Grid coordinates of one token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCoords {
    pub tau: f64,
    pub h: usize,
    pub w: usize,
    pub pose_index: usize,
}

fn rotation2(angle: f64) -> [f64; 4] {
    let (s, c) = angle.sin_cos();
    [c, -s, s, c]
}

/// `D(τ) = diag(R(τθ_1), …, R(τθ_{d_t/2}))` as a dense `[d_t, d_t]` tensor.
pub fn time_rotation(tau: f64, plan: &RotaryPlan) -> Tensor {
    let d = plan.d_t;
    let mut m = Tensor::zeros(&[d, d]);
    let data = m.data_mut();
    for (k, theta) in plan.frequencies(d).into_iter().enumerate() {
        let r = rotation2(tau * theta);
        let i = 2 * k;
        data[i * d + i] = r[0];
        data[i * d + i + 1] = r[1];
        data[(i + 1) * d + i] = r[2];
        data[(i + 1) * d + i + 1] = r[3];
    }
    m
}

/// Camera-slice scale: the largest distance of a camera center from the
/// centroid of all centers (never below 1). Invariant under rigid motions.
pub fn translation_scale(poses: &[CameraPose]) -> f64 {
    if poses.is_empty() {
        return 1.0;
    }
    let centroid = poses.iter().fold(Vec3::zeros(), |acc, p| acc + p.center()) / poses.len() as f64;
    poses.iter().map(|p| (p.center() - centroid).norm()).fold(1.0, f64::max)
}

/// Query and key block maps for a set of tokens, possibly spanning several heads.
#[derive(Clone, Debug)]
pub struct RotaryMaps {
    pub q: BlockLinearMaps,
    pub k: BlockLinearMaps,
}

/// Positions of `N` tokens along each rotary axis. Entries left `None`
/// keep that slice untouched.
#[derive(Clone, Debug, Default)]
pub struct RotaryPositions<'a> {
    pub time: Option<&'a [f64]>,
    pub height: Option<&'a [f64]>,
    pub width: Option<&'a [f64]>,
    /// Per-token poses with the scale the translations are divided by.
    pub poses: Option<(&'a [CameraPose], f64)>,
}

impl RotaryMaps {
    pub fn build(plan: &RotaryPlan, n: usize, heads: usize, pos: &RotaryPositions<'_>) -> Result<Self> {
        plan.validate()?;
        for (name, len) in [
            ("time", pos.time.map(<[f64]>::len)),
            ("height", pos.height.map(<[f64]>::len)),
            ("width", pos.width.map(<[f64]>::len)),
            ("pose", pos.poses.map(|p| p.0.len())),
        ] {
            if let Some(len) = len {
                if len != n {
                    return Err(NumericError::Dimension(format!("{len} {name} positions for {n} tokens")).into());
                }
            }
        }
        let hd = plan.head_dim;
        let mut blocks = Vec::new();
        for h in 0..heads {
            let base = h * hd;
            for off in (0..plan.d_t + plan.d_h + plan.d_w).step_by(2) {
                blocks.push((base + off, 2));
            }
            for off in (plan.camera_offset()..hd).step_by(4) {
                blocks.push((base + off, 4));
            }
        }
        let per_head = blocks.len() / heads.max(1);
        let mut q = BlockLinearMaps::identity(n, hd * heads, blocks.clone())?;
        let mut k = BlockLinearMaps::identity(n, hd * heads, blocks)?;
        let slices = [
            (pos.time, plan.d_t, 0usize),
            (pos.height, plan.d_h, plan.d_t / 2),
            (pos.width, plan.d_w, (plan.d_t + plan.d_h) / 2),
        ];
        for (positions, width, first_block) in slices {
            let Some(positions) = positions else { continue };
            let thetas = plan.frequencies(width);
            for (row, &p) in positions.iter().enumerate() {
                for (j, theta) in thetas.iter().enumerate() {
                    // Dᵀ for both queries and keys.
                    let r = rotation2(p * theta);
                    let rt = [r[0], r[2], r[1], r[3]];
                    for h in 0..heads {
                        let b = h * per_head + first_block + j;
                        q.block_mut(row, b).copy_from_slice(&rt);
                        k.block_mut(row, b).copy_from_slice(&rt);
                    }
                }
            }
        }
        if let Some((poses, scale)) = pos.poses {
            let first_block = (plan.d_t + plan.d_h + plan.d_w) / 2;
            let cam_blocks = plan.d_c / 4;
            for (row, pose) in poses.iter().enumerate() {
                pose.validate().map_err(|e| Error::Domain(format!("camera rotary pose {row}: {e}")))?;
                let scaled = CameraPose { rotation: pose.rotation, translation: pose.translation / scale };
                let p = scaled.to_homogeneous();
                let p_inv_t = scaled.inverse().to_homogeneous().transpose();
                for j in 0..cam_blocks {
                    for h in 0..heads {
                        let b = h * per_head + first_block + j;
                        copy_row_major(q.block_mut(row, b), &p_inv_t);
                        copy_row_major(k.block_mut(row, b), &p);
                    }
                }
            }
        }
        Ok(Self { q, k })
    }

    pub fn apply(&self, q: &Tensor, k: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.q.apply(q)?, self.k.apply(k)?))
    }
}

fn copy_row_major(dst: &mut [f64], m: &nalgebra::Matrix4<f64>) {
    for i in 0..4 {
        for j in 0..4 {
            dst[i * 4 + j] = m[(i, j)];
        }
    }
}

fn check_qk(q: &Tensor, k: &Tensor, plan: &RotaryPlan, n: usize) -> Result<()> {
    for (name, t) in [("Q", q), ("K", k)] {
        if t.shape().len() != 2 || t.cols() != plan.head_dim {
            return Err(NumericError::Dimension(format!("{name} has shape {:?}, expected [N, {}]", t.shape(), plan.head_dim)).into());
        }
    }
    if q.rows() != n || k.rows() != n {
        return Err(NumericError::Dimension(format!("{n} positions for {} queries and {} keys", q.rows(), k.rows())).into());
    }
    Ok(())
}

/// Rotates the time slice of every token: `Qᵢᵗ = D(s·τᵢ)ᵀQᵢ` with `s` the plan's time scale.
pub fn apply_time_rope(q: &Tensor, k: &Tensor, taus: &[f64], plan: &RotaryPlan) -> Result<(Tensor, Tensor)> {
    check_qk(q, k, plan, taus.len())?;
    let scaled: Vec<f64> = taus.iter().map(|t| t * plan.time_scale).collect();
    let pos = RotaryPositions { time: Some(&scaled), ..Default::default() };
    RotaryMaps::build(plan, taus.len(), 1, &pos)?.apply(q, k)
}

/// Standard rotary embedding on the time slice at integer positions.
pub fn apply_index_rope(q: &Tensor, k: &Tensor, indices: &[usize], plan: &RotaryPlan) -> Result<(Tensor, Tensor)> {
    check_qk(q, k, plan, indices.len())?;
    let pos: Vec<f64> = indices.iter().map(|&i| i as f64).collect();
    let pos = RotaryPositions { time: Some(&pos), ..Default::default() };
    RotaryMaps::build(plan, indices.len(), 1, &pos)?.apply(q, k)
}

/// Relative-pose transform on the camera slice. Translations are divided by
/// [`translation_scale`] of the given poses.
pub fn camera_rotary(q: &Tensor, k: &Tensor, poses: &[CameraPose], plan: &RotaryPlan) -> Result<(Tensor, Tensor)> {
    check_qk(q, k, plan, poses.len())?;
    let pos = RotaryPositions { poses: Some((poses, translation_scale(poses))), ..Default::default() };
    RotaryMaps::build(plan, poses.len(), 1, &pos)?.apply(q, k)
}

/// Time rotation, row/column index rotation and camera transform on their
/// disjoint slices.
pub fn apply_rope_4d(
    q: &Tensor,
    k: &Tensor,
    coords: &[TokenCoords],
    traj: &CameraTrajectory,
    plan: &RotaryPlan,
) -> Result<(Tensor, Tensor)> {
    check_qk(q, k, plan, coords.len())?;
    let time: Vec<f64> = coords.iter().map(|c| c.tau * plan.time_scale).collect();
    let height: Vec<f64> = coords.iter().map(|c| c.h as f64).collect();
    let width: Vec<f64> = coords.iter().map(|c| c.w as f64).collect();
    let poses = coords
        .iter()
        .map(|c| {
            traj.poses.get(c.pose_index).copied().ok_or_else(|| {
                Error::from(NumericError::Dimension(format!(
                    "pose index {} outside trajectory of {} poses",
                    c.pose_index,
                    traj.len()
                )))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pos = RotaryPositions {
        time: Some(&time),
        height: Some(&height),
        width: Some(&width),
        poses: Some((&poses, translation_scale(&traj.poses))),
    };
    RotaryMaps::build(plan, coords.len(), 1, &pos)?.apply(q, k)
}

/// Pairwise logits `Q Kᵀ`.
pub fn logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    Ok(crate::tensor::matmul_nt(q, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Mat3};
    use crate::tensor::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = nalgebra::Rotation3::from_scaled_axis(axis * 2.0);
        let t = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        CameraPose::new(*rot.matrix(), t).unwrap()
    }

    #[test]
    fn plan_validation() {
        assert!(RotaryPlan::new(64, 16, 16, 16, 16).is_ok());
        assert!(RotaryPlan::new(64, 16, 16, 16, 8).is_err());
        assert!(RotaryPlan::new(64, 18, 16, 16, 14).is_err());
        assert!(RotaryPlan::new(64, 16, 16, 16, 16).unwrap().with_base(1.0).validate().is_err());
        let f = RotaryPlan::new(64, 16, 16, 16, 16).unwrap().frequencies(16);
        assert_eq!(f[0], 1.0);
        assert!(f.windows(2).all(|w| w[1] < w[0]) && f.iter().all(|&t| t > 0.0 && t <= 1.0));
    }

    #[test]
    fn time_rotation_examples() {
        let plan = RotaryPlan::new(8, 8, 0, 0, 0).unwrap();
        assert_eq!(time_rotation(0.0, &plan), Tensor::identity(8));
        let p2 = RotaryPlan::new(2, 2, 0, 0, 0).unwrap();
        let r = time_rotation(std::f64::consts::PI, &p2);
        assert!(r.max_abs_diff(&Tensor::from_rows(&[vec![-1.0, 0.0], vec![0.0, -1.0]])) < 1e-15);
        let d = time_rotation(3.7, &plan);
        assert!(crate::tensor::matmul_nt(&d, &d).unwrap().max_abs_diff(&Tensor::identity(8)) < 1e-12);
    }

    #[test]
    fn relative_offset_identity() {
        let plan = RotaryPlan::new(16, 16, 0, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, 5, 16);
        let k = random(&mut rng, 5, 16);
        let taus: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..100.0)).collect();
        let (qt, kt) = apply_time_rope(&q, &k, &taus, &plan).unwrap();
        let l = logits(&qt, &kt).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d = time_rotation(taus[i] - taus[j], &plan);
                let kj = Tensor::new(vec![16, 1], k.row(j).to_vec()).unwrap();
                let dk = matmul(&d, &kj).unwrap();
                let expect: f64 = q.row(i).iter().zip(dk.data()).map(|(a, b)| a * b).sum();
                assert!((l.at2(i, j) - expect).abs() < 1e-12);
            }
        }
        // norm preservation
        for i in 0..5 {
            let a: f64 = qt.row(i).iter().map(|v| v * v).sum();
            let b: f64 = q.row(i).iter().map(|v| v * v).sum();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn time_shift_invariance_and_zero() {
        let plan = RotaryPlan::new(16, 8, 4, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, 4, 16);
        let k = random(&mut rng, 4, 16);
        let (q0, k0) = apply_time_rope(&q, &k, &[0.0; 4], &plan).unwrap();
        assert_eq!((q0.clone(), k0), (q.clone(), k.clone()));
        let taus = [0.1, 0.5, 2.0, 7.3];
        let shifted: Vec<f64> = taus.iter().map(|t| t + 13.25).collect();
        let (a, b) = apply_time_rope(&q, &k, &taus, &plan).unwrap();
        let (c, d) = apply_time_rope(&q, &k, &shifted, &plan).unwrap();
        assert!(logits(&a, &b).unwrap().max_abs_diff(&logits(&c, &d).unwrap()) < 1e-12);
        // channels outside the time slice are untouched
        assert!(a.row(2)[8..] == q.row(2)[8..]);
        assert!(apply_time_rope(&q, &k, &taus[..3], &plan).is_err());
    }

    #[test]
    fn uniform_time_matches_index_rope() {
        for fps in [8.0, 16.0, 24.0, 30.0] {
            let plan = RotaryPlan::new(32, 32, 0, 0, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(fps as u64);
            let n = 64;
            let q = random(&mut rng, n, 32);
            let k = random(&mut rng, n, 32);
            let taus: Vec<f64> = (0..n).map(|i| i as f64 / fps).collect();
            let idx: Vec<usize> = (0..n).collect();
            let (a, b) = apply_time_rope(&q, &k, &taus, &plan.clone().with_time_scale(fps)).unwrap();
            let (c, d) = apply_index_rope(&q, &k, &idx, &plan).unwrap();
            assert!(a.max_abs_diff(&c) < 1e-12 && b.max_abs_diff(&d) < 1e-12);
        }
    }

    #[test]
    fn index_rope_permutes_with_tokens() {
        let plan = RotaryPlan::new(8, 8, 0, 0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(&mut rng, 3, 8);
        let (a, _) = apply_index_rope(&q, &q, &[0, 4, 9], &plan).unwrap();
        let perm = Tensor::from_rows(&[q.row(2).to_vec(), q.row(0).to_vec(), q.row(1).to_vec()]);
        let (b, _) = apply_index_rope(&perm, &perm, &[9, 0, 4], &plan).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(2), b.row(0));
        let (z, _) = apply_index_rope(&q, &q, &[0, 0, 0], &plan).unwrap();
        assert_eq!(z, q);
    }

    #[test]
    fn camera_rotary_cases() {
        let plan = RotaryPlan::new(8, 0, 0, 0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, 3, 8);
        let k = random(&mut rng, 3, 8);
        let same = vec![random_pose(&mut rng); 3];
        let (a, b) = camera_rotary(&q, &k, &same, &plan).unwrap();
        assert!(logits(&a, &b).unwrap().max_abs_diff(&logits(&q, &k).unwrap()) < 1e-12);

        let poses: Vec<CameraPose> = (0..3).map(|_| random_pose(&mut rng)).collect();
        let w = random_pose(&mut rng);
        let moved: Vec<CameraPose> = poses.iter().map(|p| w.compose(p)).collect();
        let (a, b) = camera_rotary(&q, &k, &poses, &plan).unwrap();
        let (c, d) = camera_rotary(&q, &k, &moved, &plan).unwrap();
        assert!(logits(&a, &b).unwrap().max_abs_diff(&logits(&c, &d).unwrap()) < 1e-9);

        let shear = CameraPose { rotation: Mat3::new(1.0, 0.2, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0), translation: Vec3::zeros() };
        assert!(matches!(camera_rotary(&q, &k, &[shear; 3], &plan), Err(Error::Domain(_))));
    }

    #[test]
    fn roll_about_optical_axis_depends_only_on_relative_angle() {
        let plan = RotaryPlan::new(4, 0, 0, 0, 4).unwrap();
        let roll = |deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            CameraPose::new(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0), Vec3::zeros()).unwrap()
        };
        let q = Tensor::from_rows(&[vec![0.3, -0.2, 0.5, 1.0], vec![0.3, -0.2, 0.5, 1.0]]);
        let k = Tensor::from_rows(&[vec![0.7, 0.1, -0.4, 1.0], vec![0.7, 0.1, -0.4, 1.0]]);
        let l1 = { let (a, b) = camera_rotary(&q, &k, &[roll(10.0), roll(35.0)], &plan).unwrap(); logits(&a, &b).unwrap() };
        let l2 = { let (a, b) = camera_rotary(&q, &k, &[roll(-50.0), roll(-25.0)], &plan).unwrap(); logits(&a, &b).unwrap() };
        assert!(l1.max_abs_diff(&l2) < 1e-12);
        // direct oracle: qᵀ R(25°) k on the rotation block
        let (s, c) = 25f64.to_radians().sin_cos();
        let rk = [c * 0.7 - s * 0.1, s * 0.7 + c * 0.1, -0.4, 1.0];
        let expect: f64 = q.row(0).iter().zip(rk).map(|(a, b)| a * b).sum();
        assert!((l1.at2(0, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn rope_4d_cases() {
        let intr = Intrinsics::standard(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<CameraPose> = (0..4).map(|_| random_pose(&mut rng)).collect();
        let traj = CameraTrajectory::new(poses, intr, 8.0).unwrap();
        let plan = RotaryPlan::even_split(32).unwrap();
        let coords: Vec<TokenCoords> = (0..6)
            .map(|i| TokenCoords { tau: 0.3 * i as f64, h: i % 2, w: i / 3, pose_index: i % 4 })
            .collect();
        let q = random(&mut rng, 6, 32);
        let k = random(&mut rng, 6, 32);
        let (a, b) = apply_rope_4d(&q, &k, &coords, &traj, &plan).unwrap();
        let base = logits(&a, &b).unwrap();

        let w = random_pose(&mut rng);
        let moved = crate::camera::global_transform(&traj, &w).unwrap();
        let shifted: Vec<TokenCoords> = coords.iter().map(|c| TokenCoords { tau: c.tau + 4.5, ..*c }).collect();
        let (c, d) = apply_rope_4d(&q, &k, &shifted, &moved, &plan).unwrap();
        let l = logits(&c, &d).unwrap();
        let rel = base.max_abs_diff(&l) / base.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rel < 1e-8);

        // identity poses, origin tokens, zero time: identity
        let still = CameraTrajectory::new(vec![CameraPose::identity()], intr, 8.0).unwrap();
        let origin = vec![TokenCoords { tau: 0.0, h: 0, w: 0, pose_index: 0 }; 6];
        let (e, f) = apply_rope_4d(&q, &k, &origin, &still, &plan).unwrap();
        assert_eq!((e, f), (q.clone(), k.clone()));

        // without a camera slice it is time rope plus spatial rope
        let p0 = RotaryPlan::new(24, 8, 8, 8, 0).unwrap();
        let q24 = random(&mut rng, 6, 24);
        let (g, _) = apply_rope_4d(&q24, &q24, &coords, &traj, &p0).unwrap();
        let taus: Vec<f64> = coords.iter().map(|c| c.tau).collect();
        let (t_only, _) = apply_time_rope(&q24, &q24, &taus, &p0).unwrap();
        assert!(g.row(3)[..8].iter().zip(&t_only.row(3)[..8]).all(|(x, y)| (x - y).abs() < 1e-15));

        let bad = vec![TokenCoords { tau: 0.0, h: 0, w: 0, pose_index: 9 }; 6];
        assert!(apply_rope_4d(&q, &k, &bad, &traj, &plan).is_err());
    }

    #[test]
    fn multi_head_maps_repeat_per_head() {
        let plan = RotaryPlan::new(8, 4, 0, 0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poses: Vec<CameraPose> = (0..3).map(|_| random_pose(&mut rng)).collect();
        let taus = [0.0, 1.5, 3.0];
        let scale = translation_scale(&poses);
        let pos = RotaryPositions { time: Some(&taus), poses: Some((&poses, scale)), ..Default::default() };
        let maps = RotaryMaps::build(&plan, 3, 2, &pos).unwrap();
        let q = random(&mut rng, 3, 16);
        let out = maps.q.apply(&q).unwrap();
        let single = RotaryMaps::build(&plan, 3, 1, &pos).unwrap();
        let second: Vec<Vec<f64>> = (0..3).map(|r| q.row(r)[8..].to_vec()).collect();
        let expect = single.q.apply(&Tensor::from_rows(&second)).unwrap();
        for r in 0..3 {
            assert!(out.row(r)[8..].iter().zip(expect.row(r)).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }
}
