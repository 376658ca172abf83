use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use chronocam::camera::{global_transform, read_trajectory, CameraPose, CameraTrajectory, Vec3, CAMERA_CONVENTION};
use chronocam::ditblock::Variant;
use chronocam::forge::{forge_dataset, validate_dataset, validate_manifest};
use chronocam::metrics::{mae, mmae, mpsnr, mssim, psnr, ssim, MaskedImagePair, TrajectoryReport, TRAJECTORY_CONVENTION};
use chronocam::rope4d::{apply_index_rope, apply_time_rope, camera_rotary, logits, RotaryPlan};
use chronocam::toytrain::{loss_curve_csv, run_ablation, CameraSetup, ToyConfig, TrainConfig};
use chronocam::{seeds, Error, Tensor};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "chronocam", version, about = "World-time and camera conditioning toolkit")]
struct Cli {
    /// Root seed; every random stream is derived from it by name.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Override a resolved config key, e.g. `--set iterations=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forge scene manifests and the dataset index.
    Forge(ForgeArgs),
    /// Train conditioning variants on the toy task and rank them.
    Ablate(AblateArgs),
    /// Camera and image metrics over files.
    Eval(EvalArgs),
    /// Dump rotary attention logits and check their identities.
    RopeDemo(RopeArgs),
}

#[derive(Args, Debug)]
struct ForgeArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = chronocam::forge::DEFAULT_FPS)]
    fps: f64,
    #[arg(long, default_value_t = chronocam::forge::DEFAULT_FRAMES)]
    frames: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CameraArg {
    Shared,
    Novel,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// `all` (world-time variants), `components` (camera + time variants) or a comma list.
    #[arg(long, default_value = "all")]
    variants: String,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    /// Camera relation of the toy task; defaults to `novel` for `components`.
    #[arg(long, value_enum)]
    camera: Option<CameraArg>,
    /// Train an ε-predictor at this noise level instead of regressing targets.
    #[arg(long)]
    denoise: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Estimated trajectory JSON.
    #[arg(long, requires = "gt")]
    est: Option<PathBuf>,
    /// Ground-truth trajectory JSON.
    #[arg(long, requires = "est")]
    gt: Option<PathBuf>,
    #[arg(long, requires = "image_b")]
    image_a: Option<PathBuf>,
    #[arg(long, requires = "image_a")]
    image_b: Option<PathBuf>,
    /// Mask image (nonzero = evaluate); defaults to all pixels.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RopeArgs {
    /// Comma-separated world times in seconds; defaults to uniform frames at `--fps`.
    #[arg(long)]
    taus: Option<String>,
    #[arg(long, default_value_t = 16.0)]
    fps: f64,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Trajectory JSON for the camera slice; a sampled orbit is used otherwise.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Time offset applied for the shift check.
    #[arg(long, default_value_t = 3.25)]
    shift: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Parse { .. } | Error::Json(_) => EXIT_IO,
            Error::Training(_) => EXIT_TRAINING,
            Error::Mismatch(_) => EXIT_MISMATCH,
            Error::Domain(_) | Error::Infeasible(_) | Error::Degenerate(_) | Error::Numeric(_) => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: msg.into() }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) }
}

/// Applies `--set` overrides to a serialized config. Keys must already exist;
/// dotted keys reach into nested objects.
fn resolve<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<(T, String), Failure> {
    let mut v = serde_json::to_value(base).map_err(|e| usage(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| usage(format!("override {o:?} is not KEY=VALUE")))?;
        let mut slot = &mut v;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| usage(format!("unknown config key {key:?}")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    }
    let resolved: T = serde_json::from_value(v.clone()).map_err(|e| usage(format!("invalid override: {e}")))?;
    let text = serde_json::to_string(&v).map_err(|e| usage(e.to_string()))?;
    log::info!("resolved config: {text}");
    Ok((resolved, text))
}

fn header(command: &str, config: &str) -> Vec<String> {
    vec![
        format!("chronocam {} {command}", env!("CARGO_PKG_VERSION")),
        format!("config_sha256: {:x}", Sha256::digest(config.as_bytes())),
        format!("config: {config}"),
        format!("camera_convention: {CAMERA_CONVENTION}"),
        format!("trajectory_convention: {TRAJECTORY_CONVENTION}"),
    ]
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(path, text).map_err(io_at(path))
}

fn commented(header: &[String]) -> String {
    header.iter().map(|h| format!("# {h}\n")).collect()
}

// ---- forge ------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForgeConfig {
    scenes: usize,
    seed: u64,
    fps: f64,
    frames: usize,
}

fn cmd_forge(cli: &Cli, a: &ForgeArgs) -> Result<(), Failure> {
    let (cfg, text) = resolve(&ForgeConfig { scenes: a.scenes, seed: cli.seed, fps: a.fps, frames: a.frames }, &cli.overrides)?;
    if cfg.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    if cfg.frames < 2 || !(cfg.fps > 0.0) {
        return Err(usage("--frames must be ≥ 2 and --fps positive"));
    }
    fs::create_dir_all(&a.out).map_err(io_at(&a.out))?;
    let index = forge_dataset(cfg.scenes, cfg.seed, cfg.fps, cfg.frames, &a.out)?;
    let mut failures = Vec::new();
    for e in &index.entries {
        let report = validate_manifest(&a.out.join(&e.path))?;
        for c in report.failed() {
            failures.push(format!("{}: {} ({})", e.path, c.name, c.detail));
        }
    }
    for c in validate_dataset(&a.out)? {
        if !c.passed {
            failures.push(format!("dataset: {} ({})", c.name, c.detail));
        }
    }
    write(&a.out.join("forge_report.txt"), &format!("{}manifests: {}\nfailures: {}\n", commented(&header("forge", &text)), index.entries.len(), failures.len()))?;
    if !failures.is_empty() {
        return Err(Failure { code: EXIT_IO, message: format!("validation failed:\n{}", failures.join("\n")) });
    }
    println!("{} manifests for {} scenes in {}", index.entries.len(), cfg.scenes, a.out.display());
    Ok(())
}

// ---- ablate -----------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblateConfig {
    variants: Vec<String>,
    seeds: Vec<u64>,
    lr: f64,
    clip: f64,
    iterations: usize,
    batch: usize,
    noise_level: Option<f64>,
    toy: ToyConfig,
}

fn parse_variants(spec: &str) -> Result<Vec<String>, Failure> {
    let names: Vec<String> = match spec {
        "all" => Variant::TIME_VARIANTS.iter().map(|s| s.to_string()).collect(),
        "components" => Variant::COMPONENT_VARIANTS.iter().map(|s| s.to_string()).collect(),
        list => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
    };
    for n in &names {
        if n.parse::<Variant>().is_err() {
            let valid: Vec<&str> = Variant::TIME_VARIANTS.iter().chain(&Variant::COMPONENT_VARIANTS).copied().collect();
            return Err(usage(format!("unknown variant {n:?}; valid names: all, components, {}", valid.join(", "))));
        }
    }
    if names.is_empty() {
        return Err(usage("no variants given"));
    }
    Ok(names)
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<(), Failure> {
    let variants = parse_variants(&a.variants)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let camera = match a.camera {
        Some(CameraArg::Shared) => CameraSetup::Shared,
        Some(CameraArg::Novel) => CameraSetup::Novel,
        None if a.variants == "components" => CameraSetup::Novel,
        None => CameraSetup::Shared,
    };
    let desk = TrainConfig::desk("trope".parse().expect("known variant"), 0);
    let base = AblateConfig {
        variants,
        seeds: (0..a.seeds).map(|i| seeds::derive_indexed(cli.seed, "ablation_seed", i)).collect(),
        lr: desk.lr,
        clip: desk.clip,
        iterations: desk.iterations,
        batch: desk.batch,
        noise_level: a.denoise,
        toy: ToyConfig::desk(camera),
    };
    let (cfg, text) = resolve(&base, &cli.overrides)?;
    let configs: Vec<TrainConfig> = cfg
        .seeds
        .iter()
        .flat_map(|&seed| {
            cfg.variants.iter().map(move |v| TrainConfig {
                lr: cfg.lr,
                clip: cfg.clip,
                iterations: cfg.iterations,
                batch: cfg.batch,
                seed,
                variant: v.parse().expect("validated above"),
                noise_level: cfg.noise_level,
            })
        })
        .collect();
    let report = run_ablation(&cfg.toy, &configs)?;
    let hdr = header("ablate", &text);
    write(&a.out.join("ablation.csv"), &report.to_csv(&hdr))?;
    let summary = serde_json::json!({ "header": hdr, "summary": report.summary, "pairwise": report.pairwise, "rows": report.rows });
    write(&a.out.join("ablation.json"), &(serde_json::to_string_pretty(&summary).map_err(|e| usage(e.to_string()))? + "\n"))?;
    for r in report.rows.iter().filter(|r| r.seed == cfg.seeds[0]) {
        write(&a.out.join(format!("loss_{}.csv", r.variant.replace('+', "_"))), &loss_curve_csv(&r.curve))?;
    }
    for s in &report.summary {
        println!("{:<12} rank {}  held-out loss {:.6} ± {:.6}  psnr {:.3} ± {:.3}", s.variant, s.rank, s.mean_loss, s.sd_loss, s.mean_psnr, s.sd_psnr);
    }
    Ok(())
}

// ---- eval -------------------------------------------------------------------

/// Image file: `{"height", "width", "channels", "data"}` with row-major values.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageFile {
    height: usize,
    width: usize,
    #[serde(default = "one")]
    channels: usize,
    data: Vec<f64>,
}

fn one() -> usize {
    1
}

fn read_image(path: &Path) -> Result<Tensor, Failure> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let img: ImageFile = serde_json::from_str(&text).map_err(|e| Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) })?;
    Tensor::new(vec![img.height, img.width, img.channels], img.data).map_err(|e| Failure { code: EXIT_MISMATCH, message: format!("{}: {e}", path.display()) })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    est: Option<PathBuf>,
    gt: Option<PathBuf>,
    image_a: Option<PathBuf>,
    image_b: Option<PathBuf>,
    mask: Option<PathBuf>,
    peak: f64,
}

fn load_traj(path: &Path) -> Result<CameraTrajectory, Failure> {
    if !path.exists() {
        return Err(Failure { code: EXIT_IO, message: format!("{}: no such file", path.display()) });
    }
    read_trajectory(path).map_err(|e| match e {
        Error::Io(err) => io_at(path)(err),
        other => {
            let f = Failure::from(other);
            Failure { message: format!("{}: {}", path.display(), f.message), ..f }
        }
    })
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<(), Failure> {
    let base = EvalConfig { est: a.est.clone(), gt: a.gt.clone(), image_a: a.image_a.clone(), image_b: a.image_b.clone(), mask: a.mask.clone(), peak: 1.0 };
    let (cfg, text) = resolve(&base, &cli.overrides)?;
    let hdr = header("eval", &text);
    let mut out = String::new();
    match (&cfg.est, &cfg.gt) {
        (Some(est), Some(gt)) => {
            let (e, g) = (load_traj(est)?, load_traj(gt)?);
            let r = TrajectoryReport::compute(&e, &g)?;
            out.push_str(&r.to_csv(&hdr));
            println!("RotErr {:.6} deg  TransErr {:.6}", r.rot_err_deg, r.trans_err);
        }
        _ => out.push_str(&commented(&hdr)),
    }
    if let (Some(pa), Some(pb)) = (&cfg.image_a, &cfg.image_b) {
        let (ia, ib) = (read_image(pa)?, read_image(pb)?);
        if ia.shape() != ib.shape() {
            return Err(Failure { code: EXIT_MISMATCH, message: format!("image shapes {:?} and {:?} differ", ia.shape(), ib.shape()) });
        }
        let (h, w) = (ia.shape()[0], ia.shape()[1]);
        let mask: Vec<bool> = match &cfg.mask {
            Some(p) => {
                let m = read_image(p)?;
                if m.shape()[..2] != [h, w] {
                    return Err(Failure { code: EXIT_MISMATCH, message: format!("mask {:?} does not match {h}x{w}", m.shape()) });
                }
                let c = m.shape()[2];
                (0..h * w).map(|i| m.data()[i * c] != 0.0).collect()
            }
            None => vec![true; h * w],
        };
        let pair = MaskedImagePair::new(&ia, &ib, &mask)?;
        out.push_str("metric,masked,unmasked\n");
        out.push_str(&format!("psnr,{},{}\n", mpsnr(&pair, cfg.peak)?, psnr(&ia, &ib, cfg.peak)?));
        out.push_str(&format!("mae,{},{}\n", mmae(&pair), mae(&ia, &ib)?));
        out.push_str(&format!("ssim,{},{}\n", mssim(&pair, cfg.peak)?, ssim(&ia, &ib, cfg.peak)?));
    }
    if cfg.est.is_none() && cfg.image_a.is_none() {
        return Err(usage("eval needs --est/--gt and/or --image-a/--image-b"));
    }
    write(&a.out, &out)
}

// ---- rope-demo --------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RopeConfig {
    taus: Option<Vec<f64>>,
    fps: f64,
    frames: usize,
    poses: Option<PathBuf>,
    shift: f64,
    head_dim: usize,
}

fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.iter().map(|x| x / norm));
    }
    Tensor::new(vec![n, d], data).expect("consistent shape")
}

fn max_dev(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

fn max_rel_dev(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().map(|x| x.abs()).fold(1e-12, f64::max);
    a.max_abs_diff(b) / scale
}

fn cmd_rope_demo(cli: &Cli, a: &RopeArgs) -> Result<(), Failure> {
    let taus = match &a.taus {
        Some(s) => Some(
            s.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| usage(format!("bad time value {x:?}"))))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    let base = RopeConfig { taus, fps: a.fps, frames: a.frames, poses: a.poses.clone(), shift: a.shift, head_dim: 32 };
    let (cfg, text) = resolve(&base, &cli.overrides)?;
    if !(cfg.fps > 0.0) || cfg.head_dim == 0 || cfg.head_dim % 4 != 0 {
        return Err(usage("fps must be positive and head_dim a positive multiple of 4"));
    }
    let taus = cfg.taus.clone().unwrap_or_else(|| (0..cfg.frames).map(|i| i as f64 / cfg.fps).collect());
    let n = taus.len();
    if n == 0 {
        return Err(usage("no time values"));
    }
    let mut rng = seeds::rng(cli.seed, "rope_demo");
    let plan = RotaryPlan::new(cfg.head_dim, cfg.head_dim, 0, 0, 0)?.with_time_scale(cfg.fps);
    let q = random_unit_rows(&mut rng, n, cfg.head_dim);
    let k = random_unit_rows(&mut rng, n, cfg.head_dim);
    let (qt, kt) = apply_time_rope(&q, &k, &taus, &plan)?;
    let time_logits = logits(&qt, &kt)?;

    let uniform: Vec<f64> = (0..n).map(|i| i as f64 / cfg.fps).collect();
    let (qu, ku) = apply_time_rope(&q, &k, &uniform, &plan)?;
    let (qi, ki) = apply_index_rope(&q, &k, &(0..n).collect::<Vec<_>>(), &plan)?;
    let uniform_dev = max_dev(&logits(&qu, &ku)?, &logits(&qi, &ki)?);

    let shifted: Vec<f64> = taus.iter().map(|t| t + cfg.shift).collect();
    let (qs, ks) = apply_time_rope(&q, &k, &shifted, &plan)?;
    let shift_dev = max_dev(&time_logits, &logits(&qs, &ks)?);

    let traj = match &cfg.poses {
        Some(p) => load_traj(p)?,
        None => {
            let poses = (0..n)
                .map(|i| {
                    let spec = chronocam::camera::WaypointSpec { lookat_center: [0.0, 1.0, 0.0], radius: 6.0, azimuth_deg: 40.0 * i as f64 / n.max(2) as f64, elevation_deg: 15.0 };
                    chronocam::camera::look_at_pose(&spec, &chronocam::camera::world_up())
                })
                .collect::<Result<Vec<_>, _>>()?;
            CameraTrajectory::new(poses, chronocam::camera::Intrinsics::standard(64, 64), cfg.fps)?
        }
    };
    let cam_plan = RotaryPlan::new(cfg.head_dim, 0, 0, 0, cfg.head_dim)?;
    let qc = random_unit_rows(&mut rng, traj.len(), cfg.head_dim);
    let kc = random_unit_rows(&mut rng, traj.len(), cfg.head_dim);
    let (q1, k1) = camera_rotary(&qc, &kc, &traj.poses, &cam_plan)?;
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let rot = nalgebra::Rotation3::new(axis.normalize() * rng.gen_range(0.1..3.0));
    let w = CameraPose::new(*rot.matrix(), Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))?;
    let moved = global_transform(&traj, &w)?;
    let (q2, k2) = camera_rotary(&qc, &kc, &moved.poses, &cam_plan)?;
    let gauge_dev = max_rel_dev(&logits(&q1, &k1)?, &logits(&q2, &k2)?);

    let mut csv = commented(&header("rope-demo", &text));
    csv.push_str(&format!("# uniform_vs_index_max_dev: {uniform_dev:e}\n# shift_max_dev: {shift_dev:e}\n# gauge_max_rel_dev: {gauge_dev:e}\n"));
    csv.push_str("i,j,tau_i,tau_j,logit\n");
    for i in 0..n {
        for j in 0..n {
            csv.push_str(&format!("{i},{j},{},{},{:.17e}\n", taus[i], taus[j], time_logits.at2(i, j)));
        }
    }
    write(&a.out, &csv)?;
    let verdict = |d: f64, tol: f64| if d < tol { "ok" } else { "FAIL" };
    println!("uniform time vs index rope: max deviation {uniform_dev:e} ({})", verdict(uniform_dev, 1e-12));
    println!("time shift {}: max deviation {shift_dev:e} ({})", cfg.shift, verdict(shift_dev, 1e-12));
    println!("global pose transform: max relative deviation {gauge_dev:e} ({})", verdict(gauge_dev, 1e-8));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Forge(a) => cmd_forge(&cli, a),
        Command::Ablate(a) => cmd_ablate(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::RopeDemo(a) => cmd_rope_demo(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
