//! Camera poses, look-at waypoint trajectories, Plücker ray maps.
//!
//! Convention: right-handed world, camera-to-world extrinsics, the camera
//! looks down its local −z axis with +y up. Image rows grow downwards, so
//! pixel `(u, v)` (center at `(u+0.5, v+0.5)`) maps to the camera-space
//! direction `((u+0.5−cx)/fx, −(v+0.5−cy)/fy, −1)`.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timewarp::eval_smoothstep;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Human-readable statement of the camera convention, written into reports.
pub const CAMERA_CONVENTION: &str =
    "right-handed; camera-to-world extrinsics; camera looks down -z with +y up; pixel centers at (u+0.5, v+0.5)";

const ORTHO_TOL: f64 = 1e-9;

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// A rigid transform of the world, same representation as a pose.
pub type RigidTransform = CameraPose;

impl CameraPose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Rotation about the world y axis by `degrees`, no translation.
    pub fn yaw(degrees: f64) -> Self {
        let (s, c) = degrees.to_radians().sin_cos();
        let rotation = Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        Self { rotation, translation: Vec3::zeros() }
    }

    /// Largest entry of `|RᵀR − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("pose has non-finite entries".into()));
        }
        let ortho = self.orthonormality_error();
        let det = self.rotation.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Domain(format!(
                "rotation is not proper orthonormal (|RᵀR−I|∞ = {ortho:e}, det = {det})"
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Viewing direction in world coordinates (camera −z).
    pub fn forward(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other`, then `self`.
    pub fn compose(&self, other: &CameraPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Projects a world point to continuous pixel coordinates (pixel `(u, v)`
    /// covers `[u, u+1) × [v, v+1)`); `None` if the point is behind the camera.
    pub fn project(&self, intr: &Intrinsics, point: &Vec3) -> Option<(f64, f64)> {
        let pc = self.rotation.transpose() * (point - self.translation);
        if pc.z >= -1e-12 {
            return None;
        }
        let depth = -pc.z;
        Some((intr.cx() + intr.fx() * pc.x / depth, intr.cy() - intr.fy() * pc.y / depth))
    }

    /// Unit world-space direction of the ray through continuous pixel coordinates `(x, y)`.
    pub fn ray_direction(&self, intr: &Intrinsics, x: f64, y: f64) -> Vec3 {
        let local = Vec3::new((x - intr.cx()) / intr.fx(), -(y - intr.cy()) / intr.fy(), -1.0);
        (self.rotation * local).normalize()
    }
}

/// Pinhole intrinsics derived from a focal length and sensor width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal_mm: f64,
    pub sensor_width_mm: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl Intrinsics {
    pub const DEFAULT_FOCAL_MM: f64 = 30.0;
    pub const DEFAULT_SENSOR_WIDTH_MM: f64 = 50.0;

    pub fn new(focal_mm: f64, sensor_width_mm: f64, width_px: u32, height_px: u32) -> Result<Self> {
        let intr = Self { focal_mm, sensor_width_mm, width_px, height_px };
        intr.validate()?;
        Ok(intr)
    }

    /// 30 mm focal length on a 50 mm wide sensor.
    pub fn standard(width_px: u32, height_px: u32) -> Self {
        Self {
            focal_mm: Self::DEFAULT_FOCAL_MM,
            sensor_width_mm: Self::DEFAULT_SENSOR_WIDTH_MM,
            width_px,
            height_px,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.focal_mm.is_finite()
            && self.focal_mm > 0.0
            && self.sensor_width_mm.is_finite()
            && self.sensor_width_mm > 0.0
            && self.width_px > 0
            && self.height_px > 0;
        if !ok {
            return Err(Error::Domain(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.focal_mm / self.sensor_width_mm * self.width_px as f64
    }

    /// Square pixels.
    pub fn fy(&self) -> f64 {
        self.fx()
    }

    pub fn cx(&self) -> f64 {
        self.width_px as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height_px as f64 / 2.0
    }
}

/// Spherical look-at parameters of one camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointSpec {
    pub lookat_center: [f64; 3],
    pub radius: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

impl WaypointSpec {
    pub fn center(&self) -> Vec3 {
        Vec3::from(self.lookat_center)
    }

    /// Camera position on the sphere around the look-at center.
    pub fn position(&self) -> Vec3 {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        self.center() + self.radius * Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }
}

pub fn world_up() -> Vec3 {
    Vec3::new(0.0, 1.0, 0.0)
}

/// Camera at the waypoint position looking at its center.
pub fn look_at_pose(spec: &WaypointSpec, up: &Vec3) -> Result<CameraPose> {
    let eye = spec.position();
    let to_center = spec.center() - eye;
    if !(spec.radius.is_finite() && spec.radius > 0.0) || to_center.norm() < 1e-12 {
        return Err(Error::Degenerate("camera position coincides with the look-at center".into()));
    }
    let forward = to_center.normalize();
    let side = forward.cross(up);
    if side.norm() < 1e-9 {
        return Err(Error::Degenerate("up vector is parallel to the viewing direction".into()));
    }
    let right = side.normalize();
    let true_up = right.cross(&forward);
    let rotation = Mat3::from_columns(&[right, true_up, -forward]);
    CameraPose::new(rotation, eye)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    pub poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
    pub fps: f64,
    /// Per-frame look-at parameters the poses were built from, when known.
    pub lookat: Option<Vec<WaypointSpec>>,
}

impl CameraTrajectory {
    pub fn new(poses: Vec<CameraPose>, intrinsics: Intrinsics, fps: f64) -> Result<Self> {
        let traj = Self { poses, intrinsics, fps, lookat: None };
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::Domain("trajectory needs at least one pose".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Domain(format!("fps must be positive, got {}", self.fps)));
        }
        self.intrinsics.validate()?;
        for p in &self.poses {
            p.validate()?;
        }
        if let Some(l) = &self.lookat {
            if l.len() != self.poses.len() {
                return Err(Error::Mismatch(format!("{} look-at entries for {} poses", l.len(), self.poses.len())));
            }
        }
        Ok(())
    }

    /// `frames` copies of one pose.
    pub fn constant(pose: CameraPose, frames: usize, intrinsics: Intrinsics, fps: f64) -> Result<Self> {
        Self::new(vec![pose; frames], intrinsics, fps)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Easing {
    Uniform,
    Smoothstep,
}

impl Easing {
    fn apply(self, t: f64) -> f64 {
        match self {
            Easing::Uniform => t,
            Easing::Smoothstep => eval_smoothstep(t.clamp(0.0, 1.0)).expect("clamped argument"),
        }
    }
}

fn wrap_degrees(a: f64) -> f64 {
    let r = (a + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Interpolates waypoints in look-at parameter space and rebuilds each
/// frame's orientation with [`look_at_pose`]. Azimuth follows the shorter arc.
pub fn interpolate_waypoints(
    waypoints: &[WaypointSpec],
    frames: usize,
    easing: Easing,
    intrinsics: Intrinsics,
    fps: f64,
) -> Result<CameraTrajectory> {
    if waypoints.len() < 2 || frames < 2 {
        return Err(Error::Domain(format!(
            "interpolation needs ≥ 2 waypoints and ≥ 2 frames, got {} and {frames}",
            waypoints.len()
        )));
    }
    // Unwrap azimuths so consecutive waypoints differ by at most 180°.
    let mut az = vec![waypoints[0].azimuth_deg];
    for w in waypoints.windows(2) {
        let prev = *az.last().unwrap();
        az.push(prev + wrap_degrees(w[1].azimuth_deg - w[0].azimuth_deg));
    }
    let segments = waypoints.len() - 1;
    let mut params = Vec::with_capacity(frames);
    for i in 0..frames {
        let s = i as f64 * segments as f64 / (frames - 1) as f64;
        let k = (s.floor() as usize).min(segments - 1);
        let t = easing.apply(s - k as f64);
        let (a, b) = (&waypoints[k], &waypoints[k + 1]);
        params.push(WaypointSpec {
            lookat_center: [
                lerp(a.lookat_center[0], b.lookat_center[0], t),
                lerp(a.lookat_center[1], b.lookat_center[1], t),
                lerp(a.lookat_center[2], b.lookat_center[2], t),
            ],
            radius: lerp(a.radius, b.radius, t),
            azimuth_deg: lerp(az[k], az[k + 1], t),
            elevation_deg: lerp(a.elevation_deg, b.elevation_deg, t),
        });
    }
    // Endpoints reproduce the waypoints exactly.
    params[0] = waypoints[0];
    params[frames - 1] = WaypointSpec { azimuth_deg: az[segments], ..waypoints[segments] };
    let up = world_up();
    let poses = params.iter().map(|p| look_at_pose(p, &up)).collect::<Result<Vec<_>>>()?;
    let mut traj = CameraTrajectory::new(poses, intrinsics, fps)?;
    traj.lookat = Some(params);
    Ok(traj)
}

/// Framing limits applied to every generated trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConstraints {
    pub subject_centroid: [f64; 3],
    pub radius_min: f64,
    pub radius_max: f64,
    pub max_azimuth_span_deg: f64,
    pub max_elevation_span_deg: f64,
    pub max_lookat_offset: f64,
    /// Range for the base elevation of sampled cameras.
    pub elevation_range_deg: (f64, f64),
}

impl Default for TrajectoryConstraints {
    fn default() -> Self {
        Self {
            subject_centroid: [0.0, 0.0, 0.0],
            radius_min: 4.0,
            radius_max: 12.0,
            max_azimuth_span_deg: 75.0,
            max_elevation_span_deg: 30.0,
            max_lookat_offset: 1.0,
            elevation_range_deg: (0.0, 30.0),
        }
    }
}

impl TrajectoryConstraints {
    pub fn around(centroid: [f64; 3]) -> Self {
        Self { subject_centroid: centroid, ..Self::default() }
    }
}

/// Recomputed framing statistics of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FramingStats {
    pub radius_min: f64,
    pub radius_max: f64,
    pub azimuth_span_deg: f64,
    pub elevation_span_deg: f64,
    pub max_lookat_offset: f64,
    pub max_orthonormality_error: f64,
}

/// Azimuth and elevation (degrees) of the direction from the look-at
/// center to the camera, recovered from the pose orientation alone.
pub fn view_angles(pose: &CameraPose) -> (f64, f64) {
    let back = -pose.forward();
    let az = back.x.atan2(back.z).to_degrees();
    let el = back.y.clamp(-1.0, 1.0).asin().to_degrees();
    (az, el)
}

/// Angular span of a set of azimuths along the circle: 360° minus the
/// largest gap between sorted angles.
pub fn azimuth_span(angles: &[f64]) -> f64 {
    if angles.len() < 2 {
        return 0.0;
    }
    let mut a: Vec<f64> = angles.iter().map(|x| x.rem_euclid(360.0)).collect();
    a.sort_by(f64::total_cmp);
    let mut largest_gap = a[0] + 360.0 - a[a.len() - 1];
    for w in a.windows(2) {
        largest_gap = largest_gap.max(w[1] - w[0]);
    }
    360.0 - largest_gap
}

fn span(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Recomputes framing statistics. Angles come from the poses; radius and
/// look-at offset need the per-frame look-at annotation.
pub fn framing_stats(traj: &CameraTrajectory, centroid: [f64; 3]) -> Result<FramingStats> {
    let lookat = traj
        .lookat
        .as_ref()
        .ok_or_else(|| Error::Domain("trajectory carries no look-at annotation".into()))?;
    let angles: Vec<(f64, f64)> = traj.poses.iter().map(view_angles).collect();
    let azs: Vec<f64> = angles.iter().map(|a| a.0).collect();
    let centroid = Vec3::from(centroid);
    let radii: Vec<f64> = traj.poses.iter().zip(lookat).map(|(p, l)| (p.center() - l.center()).norm()).collect();
    Ok(FramingStats {
        radius_min: radii.iter().copied().fold(f64::INFINITY, f64::min),
        radius_max: radii.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        azimuth_span_deg: azimuth_span(&azs),
        elevation_span_deg: span(angles.iter().map(|a| a.1)),
        max_lookat_offset: lookat.iter().map(|l| (l.center() - centroid).norm()).fold(0.0, f64::max),
        max_orthonormality_error: traj.poses.iter().map(CameraPose::orthonormality_error).fold(0.0, f64::max),
    })
}

/// One failed framing check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub check: &'static str,
    pub detail: String,
}

const SPAN_SLACK: f64 = 1e-9;

/// Names every constraint the trajectory breaks (empty when all hold).
pub fn check_constraints(traj: &CameraTrajectory, c: &TrajectoryConstraints) -> Result<Vec<Violation>> {
    let s = framing_stats(traj, c.subject_centroid)?;
    let mut out = Vec::new();
    if s.radius_min < c.radius_min - SPAN_SLACK || s.radius_max > c.radius_max + SPAN_SLACK {
        out.push(Violation {
            check: "radius_range",
            detail: format!("radius [{:.6}, {:.6}] outside [{}, {}]", s.radius_min, s.radius_max, c.radius_min, c.radius_max),
        });
    }
    if s.azimuth_span_deg > c.max_azimuth_span_deg + SPAN_SLACK {
        out.push(Violation {
            check: "azimuth_span",
            detail: format!("azimuth span {:.6}° exceeds {}°", s.azimuth_span_deg, c.max_azimuth_span_deg),
        });
    }
    if s.elevation_span_deg > c.max_elevation_span_deg + SPAN_SLACK {
        out.push(Violation {
            check: "elevation_span",
            detail: format!("elevation span {:.6}° exceeds {}°", s.elevation_span_deg, c.max_elevation_span_deg),
        });
    }
    if s.max_lookat_offset > c.max_lookat_offset + SPAN_SLACK {
        out.push(Violation {
            check: "lookat_offset",
            detail: format!("look-at offset {:.6} m exceeds {} m", s.max_lookat_offset, c.max_lookat_offset),
        });
    }
    if s.max_orthonormality_error > ORTHO_TOL {
        out.push(Violation {
            check: "rotation_orthonormal",
            detail: format!("|RᵀR−I|∞ = {:e}", s.max_orthonormality_error),
        });
    }
    Ok(out)
}

/// Interpolates the waypoints and fails with an infeasibility error if the
/// result breaks any framing constraint.
pub fn constrained_from_waypoints(
    waypoints: &[WaypointSpec],
    frames: usize,
    easing: Easing,
    constraints: &TrajectoryConstraints,
    intrinsics: Intrinsics,
    fps: f64,
) -> Result<CameraTrajectory> {
    let traj = if waypoints.len() == 1 || frames == 1 {
        static_from(&waypoints[0], frames, intrinsics, fps)?
    } else {
        interpolate_waypoints(waypoints, frames, easing, intrinsics, fps)?
    };
    let violations = check_constraints(&traj, constraints)?;
    if let Some(v) = violations.first() {
        return Err(Error::Infeasible(format!("{}: {}", v.check, v.detail)));
    }
    Ok(traj)
}

fn static_from(w: &WaypointSpec, frames: usize, intrinsics: Intrinsics, fps: f64) -> Result<CameraTrajectory> {
    let pose = look_at_pose(w, &world_up())?;
    let mut traj = CameraTrajectory::constant(pose, frames, intrinsics, fps)?;
    traj.lookat = Some(vec![*w; frames]);
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Static,
    Orbit,
    MultiWaypoint,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 3] = [TrajectoryKind::MultiWaypoint, TrajectoryKind::Orbit, TrajectoryKind::Static];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryKind::Static => "static",
            TrajectoryKind::Orbit => "orbit",
            TrajectoryKind::MultiWaypoint => "multi_waypoint",
        }
    }
}

/// Rejection-sampling budget before [`sample_trajectory`] gives up.
pub const MAX_SAMPLING_ATTEMPTS: usize = 100;

fn sample_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

fn sample_waypoint(rng: &mut ChaCha8Rng, c: &TrajectoryConstraints, base_az: f64, base_el: f64, spread: (f64, f64)) -> WaypointSpec {
    let center = Vec3::from(c.subject_centroid) + sample_in_ball(rng, c.max_lookat_offset);
    let (el_lo, el_hi) = c.elevation_range_deg;
    WaypointSpec {
        lookat_center: center.into(),
        radius: rng.gen_range(c.radius_min..=c.radius_max),
        azimuth_deg: base_az + rng.gen_range(-spread.0..=spread.0),
        elevation_deg: (base_el + rng.gen_range(-spread.1..=spread.1)).clamp(el_lo, el_hi),
    }
}

/// Samples a constrained trajectory of the given kind.
///
/// `static` holds one waypoint; `orbit` moves from a base camera to a single
/// perturbed waypoint; `multi_waypoint` passes through 3–4 waypoints. The
/// easing (uniform or smoothstep) is drawn per trajectory. Candidates that
/// break a constraint are rejected and redrawn.
pub fn sample_trajectory(
    kind: TrajectoryKind,
    constraints: &TrajectoryConstraints,
    frames: usize,
    seed: u64,
    intrinsics: Intrinsics,
    fps: f64,
) -> Result<CameraTrajectory> {
    if frames == 0 {
        return Err(Error::Domain("trajectory needs at least one frame".into()));
    }
    if constraints.radius_min > constraints.radius_max || constraints.radius_min <= 0.0 {
        return Err(Error::Infeasible(format!(
            "radius range [{}, {}] is empty",
            constraints.radius_min, constraints.radius_max
        )));
    }
    let (el_lo, el_hi) = constraints.elevation_range_deg;
    if el_lo > el_hi || el_hi >= 90.0 || el_lo <= -90.0 {
        return Err(Error::Infeasible(format!("elevation range [{el_lo}, {el_hi}] is unusable")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_az = constraints.max_azimuth_span_deg / 2.0;
    let half_el = constraints.max_elevation_span_deg / 2.0;
    for _ in 0..MAX_SAMPLING_ATTEMPTS {
        let base_az = rng.gen_range(-180.0..180.0);
        let base_el = rng.gen_range(el_lo..=el_hi);
        let easing = if rng.gen_bool(0.5) { Easing::Uniform } else { Easing::Smoothstep };
        let waypoints: Vec<WaypointSpec> = match kind {
            TrajectoryKind::Static => vec![sample_waypoint(&mut rng, constraints, base_az, base_el, (0.0, 0.0))],
            TrajectoryKind::Orbit => {
                let base = sample_waypoint(&mut rng, constraints, base_az, base_el, (0.0, 0.0));
                let sweep = rng.gen_range(-2.0 * half_az..=2.0 * half_az);
                let target = WaypointSpec {
                    azimuth_deg: base.azimuth_deg + sweep,
                    elevation_deg: (base.elevation_deg + rng.gen_range(-half_el..=half_el) / 2.0).clamp(el_lo, el_hi),
                    radius: (base.radius + rng.gen_range(-1.0..=1.0))
                        .clamp(constraints.radius_min, constraints.radius_max),
                    ..base
                };
                vec![base, target]
            }
            TrajectoryKind::MultiWaypoint => {
                let n = rng.gen_range(3..=4);
                (0..n).map(|_| sample_waypoint(&mut rng, constraints, base_az, base_el, (half_az, half_el))).collect()
            }
        };
        match constrained_from_waypoints(&waypoints, frames, easing, constraints, intrinsics, fps) {
            Ok(traj) => return Ok(traj),
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Infeasible(format!(
        "no {} trajectory satisfied the constraints after {MAX_SAMPLING_ATTEMPTS} attempts",
        kind.name()
    )))
}

/// Per-pixel Plücker coordinates `(d, m)` of the camera rays.
#[derive(Clone, Debug, PartialEq)]
pub struct PlueckerMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `[H][W][6]`: direction then moment.
    pub data: Vec<f64>,
}

impl PlueckerMap {
    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        &self.data[(v * self.width + u) * 6..][..6]
    }

    /// Flat little-endian export: `PLK1`, u32 H, u32 W, u32 reserved, then
    /// `H·W·6` f32 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"PLK1")?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != b"PLK1" {
            return Err(Error::Parse { offset: 0, message: "bad magic, expected PLK1".into() });
        }
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; height * width * 6 * 4];
        r.read_exact(&mut payload)
            .map_err(|e| Error::Parse { offset: 16, message: format!("truncated payload: {e}") })?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Ok(Self { height, width, data })
    }
}

pub fn pluecker_map(pose: &CameraPose, intr: &Intrinsics) -> PlueckerMap {
    let (h, w) = (intr.height_px as usize, intr.width_px as usize);
    let origin = pose.center();
    let mut data = Vec::with_capacity(h * w * 6);
    for v in 0..h {
        for u in 0..w {
            let d = pose.ray_direction(intr, u as f64 + 0.5, v as f64 + 0.5);
            let m = origin.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    PlueckerMap { height: h, width: w, data }
}

/// Keeps poses `0, factor, 2·factor, …`.
pub fn subsample_trajectory(traj: &CameraTrajectory, factor: usize) -> Result<CameraTrajectory> {
    if factor == 0 {
        return Err(Error::Domain("subsampling factor must be ≥ 1".into()));
    }
    Ok(CameraTrajectory {
        poses: traj.poses.iter().step_by(factor).copied().collect(),
        intrinsics: traj.intrinsics,
        fps: traj.fps,
        lookat: traj.lookat.as_ref().map(|l| l.iter().step_by(factor).copied().collect()),
    })
}

/// Applies the world transform `w` to every pose. Look-at annotations are
/// dropped since their angles are tied to the original world axes.
pub fn global_transform(traj: &CameraTrajectory, w: &RigidTransform) -> Result<CameraTrajectory> {
    w.validate().map_err(|e| Error::Domain(format!("global transform is not rigid: {e}")))?;
    Ok(CameraTrajectory {
        poses: traj.poses.iter().map(|p| w.compose(p)).collect(),
        intrinsics: traj.intrinsics,
        fps: traj.fps,
        lookat: None,
    })
}

// ---- JSON file format ----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct TrajectoryJson {
    fps: f64,
    intrinsics: Intrinsics,
    poses: Vec<PoseJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lookat: Option<Vec<WaypointSpec>>,
}

impl Serialize for CameraTrajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let poses = self
            .poses
            .iter()
            .map(|p| {
                let mut r = [0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        r[i * 3 + j] = p.rotation[(i, j)];
                    }
                }
                PoseJson { r, t: p.translation.into() }
            })
            .collect();
        TrajectoryJson { fps: self.fps, intrinsics: self.intrinsics, poses, lookat: self.lookat.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraTrajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = TrajectoryJson::deserialize(d)?;
        let poses = raw
            .poses
            .iter()
            .map(|p| CameraPose { rotation: Mat3::from_row_slice(&p.r), translation: Vec3::from(p.t) })
            .collect();
        Ok(CameraTrajectory { poses, intrinsics: raw.intrinsics, fps: raw.fps, lookat: raw.lookat })
    }
}

/// Reads and validates a trajectory JSON file.
pub fn read_trajectory(path: &std::path::Path) -> Result<CameraTrajectory> {
    let text = std::fs::read_to_string(path)?;
    let traj: CameraTrajectory = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    traj.validate()?;
    Ok(traj)
}

/// Byte offset of a 1-based (line, column) position.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len();
    }
    text.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wp(az: f64, el: f64) -> WaypointSpec {
        WaypointSpec { lookat_center: [0.0; 3], radius: 5.0, azimuth_deg: az, elevation_deg: el }
    }

    #[test]
    fn axis_aligned_look_at() {
        let p = look_at_pose(&wp(0.0, 0.0), &world_up()).unwrap();
        assert!((p.center() - Vec3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
        assert!((p.forward() - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert!((p.rotation - Mat3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn gimbal_case_is_degenerate() {
        assert!(matches!(look_at_pose(&wp(0.0, 90.0), &world_up()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn look_at_distance_is_radius() {
        let spec = WaypointSpec { lookat_center: [0.3, -0.2, 0.5], radius: 7.5, azimuth_deg: 33.0, elevation_deg: 12.0 };
        let p = look_at_pose(&spec, &world_up()).unwrap();
        assert!(((p.center() - spec.center()).norm() - 7.5).abs() < 1e-9);
        let (az, el) = view_angles(&p);
        assert!((az - 33.0).abs() < 1e-9 && (el - 12.0).abs() < 1e-9);
    }

    #[test]
    fn static_trajectory_is_constant() {
        let intr = Intrinsics::standard(64, 64);
        let t = sample_trajectory(TrajectoryKind::Static, &TrajectoryConstraints::default(), 10, 3, intr, 16.0).unwrap();
        assert_eq!(t.len(), 10);
        assert!(t.poses.iter().all(|p| *p == t.poses[0]));
    }

    #[test]
    fn over_wide_azimuth_is_infeasible() {
        let intr = Intrinsics::standard(64, 64);
        let err = constrained_from_waypoints(
            &[wp(0.0, 10.0), wp(80.0, 10.0)],
            9,
            Easing::Uniform,
            &TrajectoryConstraints::default(),
            intr,
            16.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Infeasible(ref m) if m.starts_with("azimuth_span")), "{err}");
    }

    #[test]
    fn identical_waypoints_give_constant_path() {
        let intr = Intrinsics::standard(8, 8);
        let t = interpolate_waypoints(&[wp(10.0, 5.0), wp(10.0, 5.0)], 6, Easing::Smoothstep, intr, 8.0).unwrap();
        for p in &t.poses {
            assert!((p.rotation - t.poses[0].rotation).abs().max() < 1e-12);
            assert!((p.translation - t.poses[0].translation).norm() < 1e-12);
        }
    }

    #[test]
    fn uniform_easing_steps_evenly() {
        let intr = Intrinsics::standard(8, 8);
        let t = interpolate_waypoints(&[wp(0.0, 0.0), wp(60.0, 0.0)], 7, Easing::Uniform, intr, 8.0).unwrap();
        let az: Vec<f64> = t.poses.iter().map(|p| view_angles(p).0).collect();
        for (i, a) in az.iter().enumerate() {
            assert!((a - 10.0 * i as f64).abs() < 1e-9, "{az:?}");
        }
    }

    #[test]
    fn smoothstep_increments_are_smallest_at_ends() {
        let intr = Intrinsics::standard(8, 8);
        let t = interpolate_waypoints(&[wp(0.0, 0.0), wp(60.0, 0.0)], 9, Easing::Smoothstep, intr, 8.0).unwrap();
        let az: Vec<f64> = t.poses.iter().map(|p| view_angles(p).0).collect();
        let inc: Vec<f64> = az.windows(2).map(|w| w[1] - w[0]).collect();
        let min_inner = inc[1..inc.len() - 1].iter().copied().fold(f64::INFINITY, f64::min);
        assert!(inc[0] < min_inner && inc[inc.len() - 1] < min_inner, "{inc:?}");
    }

    #[test]
    fn easings_agree_at_key_times() {
        let intr = Intrinsics::standard(8, 8);
        let a = wp(-20.0, 5.0);
        let b = WaypointSpec { lookat_center: [0.5, 0.0, -0.5], radius: 9.0, azimuth_deg: 40.0, elevation_deg: 20.0 };
        let u = interpolate_waypoints(&[a, b], 9, Easing::Uniform, intr, 8.0).unwrap();
        let s = interpolate_waypoints(&[a, b], 9, Easing::Smoothstep, intr, 8.0).unwrap();
        for i in [0, 4, 8] {
            assert!((u.poses[i].translation - s.poses[i].translation).norm() < 1e-12);
            assert!((u.poses[i].rotation - s.poses[i].rotation).abs().max() < 1e-12);
        }
    }

    #[test]
    fn endpoints_match_waypoints() {
        let intr = Intrinsics::standard(8, 8);
        let ws = [wp(170.0, 5.0), wp(-170.0, 10.0), wp(-150.0, 0.0)];
        let t = interpolate_waypoints(&ws, 11, Easing::Uniform, intr, 8.0).unwrap();
        let first = look_at_pose(&ws[0], &world_up()).unwrap();
        let last = look_at_pose(&ws[2], &world_up()).unwrap();
        assert!((t.poses[0].translation - first.translation).norm() < 1e-12);
        assert!((t.poses[10].translation - last.translation).norm() < 1e-9);
        // shorter arc through ±180°
        let azs: Vec<f64> = t.poses.iter().map(|p| view_angles(p).0).collect();
        assert!(azimuth_span(&azs) < 40.0 + 1e-9, "{azs:?}");
    }

    #[test]
    fn pluecker_identities() {
        let intr = Intrinsics::standard(64, 64);
        let pose = look_at_pose(&WaypointSpec { lookat_center: [0.2, 0.1, 0.0], radius: 6.0, azimuth_deg: 25.0, elevation_deg: 15.0 }, &world_up()).unwrap();
        let map = pluecker_map(&pose, &intr);
        for px in map.data.chunks(6) {
            let d = Vec3::new(px[0], px[1], px[2]);
            let m = Vec3::new(px[3], px[4], px[5]);
            assert!((d.norm() - 1.0).abs() < 1e-9);
            assert!(d.dot(&m).abs() < 1e-9);
        }
        let id = pluecker_map(&CameraPose::identity(), &intr);
        assert!(id.data.chunks(6).all(|px| px[3..].iter().all(|&v| v == 0.0)));
        // optical axis
        let d = CameraPose::identity().ray_direction(&intr, intr.cx(), intr.cy());
        assert!((d - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        let odd = Intrinsics::standard(65, 65);
        let m = pluecker_map(&CameraPose::identity(), &odd);
        assert_eq!(&m.pixel(32, 32)[..3], &[0.0, 0.0, -1.0]);
    }

    #[test]
    fn pluecker_binary_layout() {
        let intr = Intrinsics::standard(4, 3);
        let map = pluecker_map(&CameraPose::identity(), &intr);
        let mut buf = Vec::new();
        map.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 3 * 4 * 6 * 4);
        assert_eq!(&buf[..4], b"PLK1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 0);
        let back = PlueckerMap::read_binary(&buf[..]).unwrap();
        assert_eq!((back.height, back.width), (3, 4));
        assert!(back.data.iter().zip(&map.data).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(PlueckerMap::read_binary(&buf[..20]).is_err());
    }

    #[test]
    fn subsampling_indices() {
        let intr = Intrinsics::standard(8, 8);
        let poses: Vec<CameraPose> = (0..9).map(|i| CameraPose::yaw(i as f64)).collect();
        let t = CameraTrajectory::new(poses.clone(), intr, 16.0).unwrap();
        assert_eq!(subsample_trajectory(&t, 1).unwrap(), t);
        let s = subsample_trajectory(&t, 4).unwrap();
        assert_eq!(s.poses, vec![poses[0], poses[4], poses[8]]);
        assert_eq!(s.fps, 16.0);
        let ab = subsample_trajectory(&subsample_trajectory(&t, 2).unwrap(), 2).unwrap();
        assert_eq!(ab, s);
    }

    #[test]
    fn global_transform_cases() {
        let intr = Intrinsics::standard(8, 8);
        let poses = vec![
            look_at_pose(&wp(10.0, 5.0), &world_up()).unwrap(),
            look_at_pose(&wp(40.0, 15.0), &world_up()).unwrap(),
        ];
        let t = CameraTrajectory::new(poses, intr, 16.0).unwrap();
        assert_eq!(global_transform(&t, &CameraPose::identity()).unwrap().poses, t.poses);
        let yawed = global_transform(&t, &CameraPose::yaw(180.0)).unwrap();
        for (a, b) in t.poses.iter().zip(&yawed.poses) {
            assert!((b.center().x + a.center().x).abs() < 1e-12);
            assert!((b.center().y - a.center().y).abs() < 1e-12);
            assert!((b.center().z + a.center().z).abs() < 1e-12);
        }
        let rel = |p: &[CameraPose]| p[0].inverse().compose(&p[1]);
        let w = CameraPose::new(CameraPose::yaw(33.0).rotation, Vec3::new(1.0, -2.0, 3.0)).unwrap();
        let moved = global_transform(&t, &w).unwrap();
        let (r0, r1) = (rel(&t.poses), rel(&moved.poses));
        assert!((r0.rotation - r1.rotation).abs().max() < 1e-12);
        assert!((r0.translation - r1.translation).norm() < 1e-12);
        let shear = CameraPose { rotation: Mat3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0), translation: Vec3::zeros() };
        assert!(matches!(global_transform(&t, &shear), Err(Error::Domain(_))));
    }

    #[test]
    fn trajectory_json_round_trip() {
        let intr = Intrinsics::standard(64, 64);
        let t = sample_trajectory(TrajectoryKind::Orbit, &TrajectoryConstraints::default(), 5, 11, intr, 16.0).unwrap();
        let json = serde_json::to_value(&t).unwrap();
        assert_eq!(json["poses"][0]["R"].as_array().unwrap().len(), 9);
        assert_eq!(json["intrinsics"]["focal_mm"], 30.0);
        let back: CameraTrajectory = serde_json::from_value(json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn intrinsics_focal_ratio() {
        let i = Intrinsics::standard(64, 48);
        assert!((i.fx() - 30.0 / 50.0 * 64.0).abs() < 1e-12);
        assert_eq!(i.fy(), i.fx());
        assert_eq!((i.cx(), i.cy()), (32.0, 24.0));
        assert!(Intrinsics::new(0.0, 50.0, 8, 8).is_err());
    }

    #[test]
    fn byte_offsets() {
        assert_eq!(byte_offset("ab\ncd", 2, 2), 4);
        assert_eq!(byte_offset("ab", 1, 1), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sampled_trajectories_meet_constraints(seed in any::<u64>(), kind in 0usize..3, frames in 1usize..20) {
            let intr = Intrinsics::standard(16, 16);
            let c = TrajectoryConstraints::around([0.5, 1.0, -0.3]);
            let t = sample_trajectory(TrajectoryKind::ALL[kind], &c, frames, seed, intr, 16.0).unwrap();
            prop_assert_eq!(t.len(), frames);
            prop_assert!(check_constraints(&t, &c).unwrap().is_empty());
        }
    }
}
