//! Python bindings for chronocam.
//!
//! Images cross the boundary as flat row-major lists with an explicit
//! `(height, width, channels)` shape; query/key matrices as lists of rows.
//! Trajectories are wrapped in [`Trajectory`] and round-trip through the
//! same JSON format the command-line tool reads.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use chronocam::camera::{self, CameraTrajectory, Intrinsics, TrajectoryConstraints, TrajectoryKind};
use chronocam::ditblock::Variant;
use chronocam::metrics::{self, MaskedImagePair};
use chronocam::rope4d::{self, RotaryPlan};
use chronocam::timewarp::{self, WarpKind, WarpSpec, WorldTimeSequence};
use chronocam::toytrain::{self, CameraSetup, ToyConfig, TrainConfig};
use chronocam::{forge, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Training(m) => PyRuntimeError::new_err(format!("training failed: {m}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for chronocam::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn image(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    let (h, w, c) = shape;
    Tensor::new(vec![h, w, c], data).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(data: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let d = data.first().map_or(0, Vec::len);
    if data.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = data.len();
    Tensor::new(vec![n, d], data.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// A camera trajectory: camera-to-world poses plus shared intrinsics.
#[pyclass(module = "chronocam_py", from_py_object)]
#[derive(Clone)]
struct Trajectory {
    inner: CameraTrajectory,
}

#[pymethods]
impl Trajectory {
    /// Parses the trajectory JSON format.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CameraTrajectory = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().py()?;
        Ok(Self { inner })
    }

    /// Loads and validates a trajectory JSON file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: camera::read_trajectory(&path).py()? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps
    }

    /// Camera centers in world coordinates.
    fn centers(&self) -> Vec<[f64; 3]> {
        self.inner.poses.iter().map(|p| p.center().into()).collect()
    }

    /// Rotation of frame `i` as three rows.
    fn rotation(&self, i: usize) -> PyResult<[[f64; 3]; 3]> {
        let p = self.inner.poses.get(i).ok_or_else(|| PyValueError::new_err(format!("frame {i} out of range")))?;
        let r = p.rotation;
        Ok([0, 1, 2].map(|a| [0, 1, 2].map(|b| r[(a, b)])))
    }

    /// Applies a world transform given as a rotation (three rows) and a translation.
    fn transformed(&self, rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let r = camera::Mat3::from_fn(|a, b| rotation[a][b]);
        let w = camera::CameraPose::new(r, camera::Vec3::from(translation)).py()?;
        Ok(Self { inner: camera::global_transform(&self.inner, &w).py()? })
    }

    /// Radius, azimuth/elevation spans and look-at offset around `centroid`.
    fn framing_stats(&self, centroid: [f64; 3]) -> PyResult<BTreeMap<&'static str, f64>> {
        let s = camera::framing_stats(&self.inner, centroid).py()?;
        Ok(BTreeMap::from([
            ("radius_min", s.radius_min),
            ("radius_max", s.radius_max),
            ("azimuth_span_deg", s.azimuth_span_deg),
            ("elevation_span_deg", s.elevation_span_deg),
            ("max_lookat_offset", s.max_lookat_offset),
            ("max_orthonormality_error", s.max_orthonormality_error),
        ]))
    }

    fn __repr__(&self) -> String {
        format!("Trajectory(frames={}, fps={})", self.inner.len(), self.inner.fps)
    }
}

/// World-time sequence for a warp kind.
#[pyfunction]
#[pyo3(signature = (kind, frames, duration, fps, seed=0, params=None))]
fn generate_warp(
    kind: &str,
    frames: usize,
    duration: f64,
    fps: f64,
    seed: u64,
    params: Option<BTreeMap<String, f64>>,
) -> PyResult<Vec<f64>> {
    let kind: WarpKind = kind.parse().py()?;
    let spec = WarpSpec { kind, params: params.unwrap_or_default(), seed };
    Ok(timewarp::generate_warp(&spec, frames, duration, fps).py()?.tau)
}

/// Averages world times over windows of `factor` frames.
#[pyfunction]
fn pool_to_latent(tau: Vec<f64>, fps: f64, factor: usize) -> PyResult<Vec<f64>> {
    let seq = WorldTimeSequence::new(tau, fps).py()?;
    Ok(timewarp::pool_to_latent(&seq, factor).py()?.tau)
}

/// Samples a constrained camera trajectory around `centroid`.
#[pyfunction]
#[pyo3(signature = (kind, frames, seed, centroid=[0.0, 0.0, 0.0], width=640, height=384, fps=16.0))]
fn sample_trajectory(
    kind: &str,
    frames: usize,
    seed: u64,
    centroid: [f64; 3],
    width: u32,
    height: u32,
    fps: f64,
) -> PyResult<Trajectory> {
    let kind = TrajectoryKind::ALL
        .into_iter()
        .find(|k| k.name() == kind)
        .ok_or_else(|| PyValueError::new_err(format!("unknown trajectory kind {kind:?}")))?;
    let c = TrajectoryConstraints::around(centroid);
    let inner = camera::sample_trajectory(kind, &c, frames, seed, Intrinsics::standard(width, height), fps).py()?;
    Ok(Trajectory { inner })
}

/// Mean geodesic rotation error in degrees after first-frame normalization.
#[pyfunction]
fn rot_err(est: &Trajectory, gt: &Trajectory) -> PyResult<f64> {
    metrics::rot_err(&est.inner, &gt.inner).py()
}

/// Mean translation error after least-squares scale alignment.
#[pyfunction]
fn trans_err(est: &Trajectory, gt: &Trajectory) -> PyResult<f64> {
    metrics::trans_err(&est.inner, &gt.inner).py()
}

/// PSNR, SSIM and MAE of two images, restricted to `mask` when given.
#[pyfunction]
#[pyo3(signature = (a, b, shape, mask=None, peak=1.0))]
fn image_metrics(
    a: Vec<f64>,
    b: Vec<f64>,
    shape: (usize, usize, usize),
    mask: Option<Vec<bool>>,
    peak: f64,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let (a, b) = (image(a, shape)?, image(b, shape)?);
    let mask = mask.unwrap_or_else(|| vec![true; shape.0 * shape.1]);
    let pair = MaskedImagePair::new(&a, &b, &mask).py()?;
    Ok(BTreeMap::from([
        ("psnr", metrics::mpsnr(&pair, peak).py()?),
        ("ssim", metrics::mssim(&pair, peak).py()?),
        ("mae", metrics::mmae(&pair)),
    ]))
}

/// Rotates query and key rows by their world times.
///
/// The time slice covers the whole row, so rows need an even length.
#[pyfunction]
#[pyo3(signature = (q, k, taus, time_scale=1.0))]
fn apply_time_rope(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    taus: Vec<f64>,
    time_scale: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (q, k) = (rows(q)?, rows(k)?);
    let d = q.cols();
    let plan = RotaryPlan::new(d, d, 0, 0, 0).py()?.with_time_scale(time_scale);
    let (a, b) = rope4d::apply_time_rope(&q, &k, &taus, &plan).py()?;
    Ok((to_rows(&a), to_rows(&b)))
}

/// Scaled-free dot-product logits `q kᵀ`.
#[pyfunction]
fn logits(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&rope4d::logits(&rows(q)?, &rows(k)?).py()?))
}

/// Writes a forge dataset and returns the number of manifests.
#[pyfunction]
#[pyo3(signature = (scenes, out, seed=0, fps=16.0, frames=81))]
fn forge_dataset(scenes: usize, out: PathBuf, seed: u64, fps: f64, frames: usize) -> PyResult<usize> {
    Ok(forge::forge_dataset(scenes, seed, fps, frames, &out).py()?.entries.len())
}

/// Validates one manifest; returns `(passed, failed check descriptions)`.
#[pyfunction]
fn validate_manifest(path: PathBuf) -> PyResult<(bool, Vec<String>)> {
    let r = forge::validate_manifest(&path).py()?;
    let failed = r.failed().iter().map(|c| format!("{}: {}", c.name, c.detail)).collect();
    Ok((r.passed, failed))
}

/// Trains every variant for every seed on the toy task and returns one
/// dict per run (`variant`, `seed`, `held_out_loss`, `psnr`, `final_train_loss`).
#[pyfunction]
#[pyo3(signature = (variants, seeds, iterations=2000, camera="shared"))]
fn run_ablation(
    py: Python<'_>,
    variants: Vec<String>,
    seeds: Vec<u64>,
    iterations: usize,
    camera: &str,
) -> PyResult<Vec<BTreeMap<&'static str, Py<PyAny>>>> {
    let setup = match camera {
        "shared" => CameraSetup::Shared,
        "novel" => CameraSetup::Novel,
        other => return Err(PyValueError::new_err(format!("unknown camera setup {other:?}"))),
    };
    let parsed: Vec<Variant> = variants.iter().map(|v| v.parse()).collect::<chronocam::Result<_>>().py()?;
    let toy = ToyConfig::desk(setup);
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&s| parsed.iter().map(move |&v| TrainConfig { iterations, ..TrainConfig::desk(v, s) }))
        .collect();
    let report = py.detach(|| toytrain::run_ablation(&toy, &configs)).py()?;
    report
        .rows
        .iter()
        .map(|r| {
            Ok(BTreeMap::from([
                ("variant", r.variant.clone().into_pyobject(py)?.into_any().unbind()),
                ("seed", r.seed.into_pyobject(py)?.into_any().unbind()),
                ("held_out_loss", r.held_out_loss.into_pyobject(py)?.into_any().unbind()),
                ("psnr", r.psnr.into_pyobject(py)?.into_any().unbind()),
                ("final_train_loss", r.final_train_loss.into_pyobject(py)?.into_any().unbind()),
            ]))
        })
        .collect()
}

#[pymodule]
fn chronocam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("TIME_VARIANTS", Variant::TIME_VARIANTS.to_vec())?;
    m.add("COMPONENT_VARIANTS", Variant::COMPONENT_VARIANTS.to_vec())?;
    m.add("CAMERA_CONVENTION", camera::CAMERA_CONVENTION)?;
    m.add_class::<Trajectory>()?;
    m.add_function(wrap_pyfunction!(generate_warp, m)?)?;
    m.add_function(wrap_pyfunction!(pool_to_latent, m)?)?;
    m.add_function(wrap_pyfunction!(sample_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(rot_err, m)?)?;
    m.add_function(wrap_pyfunction!(trans_err, m)?)?;
    m.add_function(wrap_pyfunction!(image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(apply_time_rope, m)?)?;
    m.add_function(wrap_pyfunction!(logits, m)?)?;
    m.add_function(wrap_pyfunction!(forge_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(validate_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    Ok(())
}
