//! Render-ready scene manifests: every scene pairs 3 camera trajectories
//! with 3 world-time patterns.
//!
//! On disk each camera × time variant is its own `forge4d/1` manifest
//! holding a single entry in `variants`, and the dataset index lists one
//! NDJSON line per variant file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{
    byte_offset, check_constraints, sample_trajectory, CameraTrajectory, Intrinsics, TrajectoryConstraints, TrajectoryKind,
};
use crate::error::{Error, Result};
use crate::seeds;
use crate::timewarp::{generate_warp, validate_monotone, WarpKind, WarpSpec};

pub const SCHEMA: &str = "forge4d/1";
pub const ENVIRONMENT_COUNT: usize = 80;
pub const CHARACTER_COUNT: usize = 100;
pub const VARIANTS_PER_SCENE: usize = 9;
pub const DEFAULT_FPS: f64 = 16.0;
pub const DEFAULT_FRAMES: usize = 81;
pub const RENDER_WIDTH: u32 = 640;
pub const RENDER_HEIGHT: u32 = 384;

/// Tolerance when comparing a linear timeline with `i / fps`.
const LINEAR_TOL: f64 = 1e-9;

pub fn environment_catalog() -> Vec<String> {
    (0..ENVIRONMENT_COUNT).map(|i| format!("environment_{i:02}")).collect()
}

pub fn character_catalog() -> Vec<String> {
    (0..CHARACTER_COUNT).map(|i| format!("character_{i:03}")).collect()
}

pub fn render_intrinsics() -> Intrinsics {
    Intrinsics { focal_mm: 30.0, sensor_width_mm: 50.0, width_px: RENDER_WIDTH, height_px: RENDER_HEIGHT }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVariant {
    pub variant_id: String,
    pub camera_kind: String,
    pub camera: CameraTrajectory,
    /// Seconds, one per frame.
    pub world_time: Vec<f64>,
    pub warp_spec: WarpSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub schema: String,
    pub scene_id: String,
    pub environment: String,
    pub character: String,
    pub fps: f64,
    pub frames: usize,
    pub seed: u64,
    pub subject_centroid: [f64; 3],
    /// Mocap clip length; world time saturates here.
    pub duration: f64,
    pub variants: Vec<ManifestVariant>,
}

impl SceneManifest {
    /// One manifest per variant, sharing all scene-level fields.
    pub fn split(&self) -> Vec<SceneManifest> {
        self.variants.iter().map(|v| SceneManifest { variants: vec![v.clone()], ..self.clone() }).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// The two non-linear patterns follow the dataset recipe: one slow-motion
/// and one pausing timeline, with sampled parameters.
fn temporal_patterns(seed: u64, frames: usize) -> Vec<WarpSpec> {
    let mut rng = seeds::rng(seed, "temporal_patterns");
    let steps = frames - 1;
    let pause_len = rng.gen_range(1..=(steps / 3).max(1));
    let pause_from = rng.gen_range(0..=steps - pause_len);
    vec![
        WarpSpec::new(WarpKind::Linear, seeds::derive(seed, "warp_linear")),
        WarpSpec::new(WarpKind::SlowMotion, seeds::derive(seed, "warp_slow_motion")).with_param("factor", rng.gen_range(0.25..=0.75)),
        WarpSpec::new(WarpKind::Pausing, seeds::derive(seed, "warp_pausing"))
            .with_param("pause_from", pause_from as f64)
            .with_param("pause_to", (pause_from + pause_len) as f64),
    ]
}

fn catalog_pick(seed: u64, label: &str, n: usize) -> usize {
    (seeds::derive(seed, label) % n as u64) as usize
}

/// A deterministic 9-variant manifest for one scene.
pub fn forge_scene(scene_seed: u64, fps: f64, frames: usize, subject_centroid: [f64; 3]) -> Result<SceneManifest> {
    if frames < 2 {
        return Err(Error::Domain(format!("scenes need at least 2 frames, got {frames}")));
    }
    let constraints = TrajectoryConstraints::around(subject_centroid);
    let duration = (frames - 1) as f64 / fps;
    let cameras = TrajectoryKind::ALL
        .iter()
        .map(|&k| {
            let traj = sample_trajectory(k, &constraints, frames, seeds::derive(scene_seed, k.name()), render_intrinsics(), fps)?;
            Ok((k, traj))
        })
        .collect::<Result<Vec<_>>>()?;
    let warps = temporal_patterns(scene_seed, frames);
    let mut variants = Vec::with_capacity(VARIANTS_PER_SCENE);
    for (kind, traj) in &cameras {
        for spec in &warps {
            let taus = generate_warp(spec, frames, duration, fps)?;
            variants.push(ManifestVariant {
                variant_id: format!("{}-{}", kind.name(), spec.kind.name()),
                camera_kind: kind.name().to_string(),
                camera: traj.clone(),
                world_time: taus.tau,
                warp_spec: spec.clone(),
            });
        }
    }
    let envs = environment_catalog();
    let chars = character_catalog();
    Ok(SceneManifest {
        schema: SCHEMA.to_string(),
        scene_id: format!("scene_{scene_seed:016x}"),
        environment: envs[catalog_pick(scene_seed, "environment", envs.len())].clone(),
        character: chars[catalog_pick(scene_seed, "character", chars.len())].clone(),
        fps,
        frames,
        seed: scene_seed,
        subject_centroid,
        duration,
        variants,
    })
}

/// Subject placement of a dataset scene: within 2 m of the origin on the
/// ground plane, at a standing person's centroid height.
pub fn scene_centroid(scene_seed: u64) -> [f64; 3] {
    let mut rng = seeds::rng(scene_seed, "centroid");
    [rng.gen_range(-2.0..=2.0), rng.gen_range(0.8..=1.1), rng.gen_range(-2.0..=2.0)]
}

/// One line of the dataset index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub path: String,
    pub scene_id: String,
    pub variant_id: String,
    pub environment: String,
    pub character: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema: String,
    pub global_seed: u64,
    pub fps: f64,
    pub frames: usize,
    pub scenes: usize,
    pub entries: Vec<IndexEntry>,
    pub environment_counts: BTreeMap<String, usize>,
    pub character_counts: BTreeMap<String, usize>,
}

impl DatasetIndex {
    pub fn to_ndjson(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}", serde_json::to_string(e)?);
        }
        Ok(s)
    }
}

pub fn scene_seed(global_seed: u64, scene: usize) -> u64 {
    seeds::derive_indexed(global_seed, "scene", scene as u64)
}

/// Manifests of scene `i`, tags drawn round-robin from the catalogs.
pub fn forge_dataset_scene(global_seed: u64, scene: usize, fps: f64, frames: usize) -> Result<SceneManifest> {
    let seed = scene_seed(global_seed, scene);
    let mut m = forge_scene(seed, fps, frames, scene_centroid(seed))?;
    m.scene_id = format!("scene_{scene:05}");
    m.environment = environment_catalog()[scene % ENVIRONMENT_COUNT].clone();
    m.character = character_catalog()[scene % CHARACTER_COUNT].clone();
    Ok(m)
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes `manifests/<scene_id>/<variant_id>.json` for every variant and
/// `index.ndjson` plus `dataset.json` under `out`.
pub fn forge_dataset(n_scenes: usize, global_seed: u64, fps: f64, frames: usize, out: &Path) -> Result<DatasetIndex> {
    if n_scenes == 0 {
        return Err(Error::Domain("n_scenes must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(n_scenes * VARIANTS_PER_SCENE);
    let mut environment_counts = BTreeMap::new();
    let mut character_counts = BTreeMap::new();
    for i in 0..n_scenes {
        let scene = forge_dataset_scene(global_seed, i, fps, frames)?;
        *environment_counts.entry(scene.environment.clone()).or_insert(0) += 1;
        *character_counts.entry(scene.character.clone()).or_insert(0) += 1;
        let dir = out.join("manifests").join(&scene.scene_id);
        fs::create_dir_all(&dir)?;
        for m in scene.split() {
            let v = &m.variants[0];
            let rel = PathBuf::from("manifests").join(&scene.scene_id).join(format!("{}.json", v.variant_id));
            let text = m.to_json()?;
            fs::write(out.join(&rel), &text)?;
            entries.push(IndexEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                scene_id: m.scene_id.clone(),
                variant_id: v.variant_id.clone(),
                environment: m.environment.clone(),
                character: m.character.clone(),
                sha256: sha256_hex(text.as_bytes()),
            });
        }
    }
    let index = DatasetIndex {
        schema: SCHEMA.to_string(),
        global_seed,
        fps,
        frames,
        scenes: n_scenes,
        entries,
        environment_counts,
        character_counts,
    };
    fs::write(out.join("index.ndjson"), index.to_ndjson()?)?;
    let mut summary = serde_json::to_string_pretty(&DatasetSummary::from(&index))?;
    summary.push('\n');
    fs::write(out.join("dataset.json"), summary)?;
    Ok(index)
}

#[derive(Serialize)]
struct DatasetSummary<'a> {
    schema: &'a str,
    global_seed: u64,
    fps: f64,
    frames: usize,
    scenes: usize,
    manifests: usize,
    environment_counts: &'a BTreeMap<String, usize>,
    character_counts: &'a BTreeMap<String, usize>,
}

impl<'a> From<&'a DatasetIndex> for DatasetSummary<'a> {
    fn from(i: &'a DatasetIndex) -> Self {
        Self {
            schema: &i.schema,
            global_seed: i.global_seed,
            fps: i.fps,
            frames: i.frames,
            scenes: i.scenes,
            manifests: i.entries.len(),
            environment_counts: &i.environment_counts,
            character_counts: &i.character_counts,
        }
    }
}

// ---- validation -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub path: String,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

fn check(checks: &mut Vec<Check>, name: &str, passed: bool, detail: impl Into<String>) {
    checks.push(Check { name: name.to_string(), passed, detail: detail.into() });
}

/// Re-checks every invariant of an in-memory manifest.
pub fn validate_scene(m: &SceneManifest) -> Vec<Check> {
    let mut out = Vec::new();
    check(&mut out, "schema", m.schema == SCHEMA, format!("schema {:?}", m.schema));
    let n = m.variants.len();
    check(
        &mut out,
        "variant_count",
        n == 1 || n == VARIANTS_PER_SCENE,
        format!("{n} variants (expected 1 per file or {VARIANTS_PER_SCENE} per scene)"),
    );
    let mut ids: Vec<&str> = m.variants.iter().map(|v| v.variant_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    check(&mut out, "variant_ids_unique", ids.len() == n, format!("{} distinct ids", ids.len()));
    let constraints = TrajectoryConstraints::around(m.subject_centroid);
    for v in &m.variants {
        let id = &v.variant_id;
        let lens_ok = v.world_time.len() == m.frames && v.camera.len() == m.frames;
        check(
            &mut out,
            "frame_counts",
            lens_ok,
            format!("{id}: {} timestamps, {} poses, {} frames", v.world_time.len(), v.camera.len(), m.frames),
        );
        let mono = crate::timewarp::WorldTimeSequence::new(v.world_time.clone(), m.fps).map(|t| validate_monotone(&t));
        check(&mut out, "world_time_monotone", matches!(mono, Ok(true)), format!("{id}"));
        let in_range = v.world_time.iter().all(|&t| (-LINEAR_TOL..=m.duration + LINEAR_TOL).contains(&t));
        check(&mut out, "world_time_range", in_range, format!("{id}: within [0, {}] s", m.duration));
        if v.warp_spec.kind == WarpKind::Linear {
            let ok = v.world_time.iter().enumerate().all(|(i, &t)| (t - i as f64 / m.fps).abs() <= LINEAR_TOL);
            check(&mut out, "linear_timeline", ok, format!("{id}: τ_i = i/fps"));
        }
        let ortho = v.camera.poses.iter().map(|p| p.orthonormality_error()).fold(0.0, f64::max);
        check(&mut out, "pose_orthonormality", ortho <= 1e-9, format!("{id}: |RᵀR−I|∞ = {ortho:e}"));
        match check_constraints(&v.camera, &constraints) {
            Ok(violations) => {
                for name in ["radius_range", "azimuth_span", "elevation_span", "lookat_offset"] {
                    let hit = violations.iter().find(|x| x.check == name);
                    check(&mut out, name, hit.is_none(), format!("{id}: {}", hit.map(|h| h.detail.as_str()).unwrap_or("ok")));
                }
            }
            Err(e) => check(&mut out, "framing", false, format!("{id}: {e}")),
        }
    }
    if n == VARIANTS_PER_SCENE {
        let mut by_kind: BTreeMap<&str, Vec<&ManifestVariant>> = BTreeMap::new();
        for v in &m.variants {
            by_kind.entry(v.camera_kind.as_str()).or_default().push(v);
        }
        let shared = by_kind.len() == 3 && by_kind.values().all(|vs| vs.len() == 3 && vs.iter().all(|v| v.camera == vs[0].camera));
        check(&mut out, "shared_cameras", shared, format!("{} camera kinds", by_kind.len()));
    }
    out
}

/// Parses and validates one manifest file. Malformed JSON is a parse error
/// carrying the byte offset.
pub fn validate_manifest(path: &Path) -> Result<ValidationReport> {
    let text = fs::read_to_string(path)?;
    let m = parse_manifest(&text)?;
    let checks = validate_scene(&m);
    Ok(ValidationReport { path: path.display().to_string(), passed: checks.iter().all(|c| c.passed), checks })
}

pub fn parse_manifest(text: &str) -> Result<SceneManifest> {
    serde_json::from_str(text).map_err(|e| Error::Parse { offset: byte_offset(text, e.line(), e.column()), message: e.to_string() })
}

/// Cross-file checks over a forged directory: entry count and camera
/// sharing among the temporal variants of each scene.
pub fn validate_dataset(out: &Path) -> Result<Vec<Check>> {
    let text = fs::read_to_string(out.join("index.ndjson"))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if !line.trim().is_empty() {
            let e: IndexEntry = serde_json::from_str(line)
                .map_err(|e| Error::Parse { offset: offset + byte_offset(line, e.line(), e.column()), message: e.to_string() })?;
            entries.push(e);
        }
        offset += line.len();
    }
    let mut scenes: BTreeMap<String, Vec<SceneManifest>> = BTreeMap::new();
    let mut checks = Vec::new();
    for e in &entries {
        let body = fs::read_to_string(out.join(&e.path))?;
        check(&mut checks, "sha256", sha256_hex(body.as_bytes()) == e.sha256, e.path.clone());
        scenes.entry(e.scene_id.clone()).or_default().push(parse_manifest(&body)?);
    }
    check(
        &mut checks,
        "entry_count",
        entries.len() == scenes.len() * VARIANTS_PER_SCENE,
        format!("{} entries for {} scenes", entries.len(), scenes.len()),
    );
    for (id, ms) in &scenes {
        let mut merged = ms[0].clone();
        merged.variants = ms.iter().flat_map(|m| m.variants.iter().cloned()).collect();
        for c in validate_scene(&merged) {
            if !c.passed || c.name == "shared_cameras" || c.name == "variant_count" {
                checks.push(Check { detail: format!("{id}: {}", c.detail), ..c });
            }
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_variants_deterministic() {
        let a = forge_scene(42, 16.0, 9, [0.0, 1.0, 0.0]).unwrap();
        let b = forge_scene(42, 16.0, 9, [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a.variants.len(), 9);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(validate_scene(&a).iter().all(|c| c.passed), "{:?}", validate_scene(&a));
    }

    #[test]
    fn linear_pattern_is_frame_time() {
        let m = forge_scene(3, 16.0, 9, [0.5, 1.0, -0.5]).unwrap();
        let lin = m.variants.iter().find(|v| v.warp_spec.kind == WarpKind::Linear).unwrap();
        for (i, t) in lin.world_time.iter().enumerate() {
            assert!((t - i as f64 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_azimuth_span_is_named() {
        let m = forge_scene(5, 16.0, 9, [0.0, 1.0, 0.0]).unwrap();
        let mut one = m.split().remove(0);
        let v = &mut one.variants[0];
        let la = v.camera.lookat.clone().unwrap();
        let mut spec = la[0];
        let n = v.camera.poses.len();
        for i in 0..n {
            spec.azimuth_deg = la[0].azimuth_deg + 80.0 * i as f64 / (n - 1) as f64;
            v.camera.poses[i] = crate::camera::look_at_pose(&spec, &crate::camera::world_up()).unwrap();
            v.camera.lookat.as_mut().unwrap()[i] = spec;
        }
        let failed: Vec<String> = validate_scene(&one).into_iter().filter(|c| !c.passed).map(|c| c.name).collect();
        assert_eq!(failed, vec!["azimuth_span".to_string()]);
    }

    #[test]
    fn truncated_manifest_reports_offset() {
        let text = forge_scene(1, 16.0, 9, [0.0, 1.0, 0.0]).unwrap().to_json().unwrap();
        let cut = &text[..text.len() / 2];
        match parse_manifest(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn zero_frames_or_scenes_rejected() {
        assert!(forge_scene(1, 16.0, 1, [0.0; 3]).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(forge_dataset(0, 1, 16.0, 9, dir.path()).is_err());
    }
}
