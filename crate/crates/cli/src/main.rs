use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use priorloc::degeneracy::{reference_spectrum, ThresholdCalibrator};
use priorloc::eval::{self, pose_from_array, pose_to_array, Trajectory};
use priorloc::geometry::{voxel_downsample, SpatialIndex};
use priorloc::io::{self, IoError};
use priorloc::pipeline::{
    emit_reports, load_map, load_sequence, resolve, run, synth, write_sequence, GroundTruth, PipelineError, RunConfig,
    SceneSpec,
};
use priorloc::registration::align;

#[derive(Parser, Debug)]
#[command(name = "priorloc", version, about = "Prior-map-assisted LiDAR localization")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Localize a scan sequence against a prior map.
    Localize(LocalizeArgs),
    /// Generate a synthetic sequence from a scene spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trajectory metrics (ATE, RPE) of an estimate against a reference.
    EvalTraj {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Frame delta for RPE.
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Timestamp association tolerance (s).
        #[arg(long, default_value_t = 0.01)]
        max_dt: f64,
    },
    /// Map accuracy and completeness of an estimated cloud.
    EvalMap {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Inlier distance (m).
        #[arg(long, default_value_t = 0.20)]
        threshold: f64,
    },
    /// Registers one scan and prints its degeneracy report.
    DegeneracyReport(DegeneracyArgs),
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    /// Directory holding `index.txt` and the listed scans.
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    odom: PathBuf,
    #[arg(long)]
    imu: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set degeneracy.s_thres=3.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct DegeneracyArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    scan: PathBuf,
    /// Initial world pose `tx ty tz qx qy qz qw`.
    #[arg(long, num_args = 7, allow_negative_numbers = true, value_names = ["TX", "TY", "TZ", "QX", "QY", "QZ", "QW"])]
    pose: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Numerical(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<eval::EvalError> for Failure {
    fn from(e: eval::EvalError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Localize(a) => localize(a, cli.verbose > 0),
        Command::Synth { spec, out } => synthesize(&spec, &out),
        Command::EvalTraj { est, reference, delta, max_dt } => eval_traj(&est, &reference, delta, max_dt),
        Command::EvalMap { est, reference, threshold } => eval_map(&est, &reference, threshold),
        Command::DegeneracyReport(a) => degeneracy_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

/// Loads the config (or defaults) and applies overrides. Returns the config
/// and the directory relative paths inside it resolve against.
fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, PathBuf), Failure> {
    let (bytes, base) = match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            (bytes, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (b"{}".to_vec(), PathBuf::new()),
    };
    let config = RunConfig::from_json(&bytes, overrides)?;
    Ok((config, base))
}

fn print_json(v: &serde_json::Value) {
    use std::io::Write;
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn localize(a: LocalizeArgs, verbose: bool) -> Result<(), Failure> {
    let (config, base) = load_config(a.config.as_deref(), &a.overrides)?;
    let out = a
        .out
        .or_else(|| config.output_dir.as_ref().map(|p| resolve(&base, p)))
        .ok_or_else(|| Failure::Usage("an output directory is required (--out or output_dir)".into()))?;

    let map = load_map(&a.map, config.map_voxel)?;
    info!("map: {} points after downsampling", map.cloud.len());
    let initial = match &config.initial_pose {
        Some(p) => Some(pose_from_array(p).ok_or_else(|| Failure::Data("invalid initial_pose".into()))?),
        None => None,
    };
    let input = load_sequence(&a.scans, &a.odom, a.imu.as_deref(), initial)?;
    info!("{} scans, {} odometry poses, {} IMU samples", input.scans.len(), input.odometry.len(), input.imu.len());

    let ground_truth = match &config.gt_trajectory {
        Some(p) => {
            let trajectory = io::read_trajectory(&resolve(&base, p))?;
            let map = config.gt_map.as_ref().map(|m| io::read_cloud(&resolve(&base, m))).transpose()?;
            Some(GroundTruth { trajectory, map })
        }
        None => None,
    };

    let output = run(&config, &input, &map, ground_truth.as_ref())?;
    emit_reports(&output, &out, verbose || config.verbose)?;
    let s = &output.summary;
    info!(
        "{} keyframes, {} map factors, {} stage-1 rejections, {} ZUPT frames",
        s.keyframes, s.map_factors, s.stage1_rejections, s.zupt_frames
    );
    if let Some(m) = &output.metrics {
        info!("ATE {:.3} cm, RPE {:.3} cm", m.ate_rmse_cm, m.rpe_rmse_cm);
    }
    Ok(())
}

fn synthesize(spec_path: &Path, out: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(spec_path).map_err(|e| Failure::Data(format!("{}: {e}", spec_path.display())))?;
    let spec = SceneSpec::from_json(&bytes)?;
    let seq = synth(&spec)?;
    write_sequence(&seq, &spec, out)?;
    info!("wrote {} scans to {}", seq.scans.len(), out.display());
    Ok(())
}

fn eval_traj(est: &Path, reference: &Path, delta: usize, max_dt: f64) -> Result<(), Failure> {
    if delta == 0 || !(max_dt.is_finite() && max_dt > 0.0) {
        return Err(Failure::Usage("--delta must be at least 1 and --max-dt positive".into()));
    }
    let est: Trajectory = io::read_trajectory(est)?;
    let reference = io::read_trajectory(reference)?;
    let a = eval::ate(&est, &reference, max_dt)?;
    let r = eval::rpe(&est, &reference, max_dt, delta)?;
    let rd = eval::rpe_per_distance(&est, &reference, max_dt, 1.0).ok();
    print_json(&json!({
        "ate_rmse_cm": a.rmse_cm,
        "rpe_rmse_cm": r,
        "rpe_delta": delta,
        "rpe_per_meter_cm": rd,
        "matched_pairs": a.pairs,
        "alignment": pose_to_array(&a.alignment),
    }));
    Ok(())
}

fn eval_map(est: &Path, reference: &Path, threshold: f64) -> Result<(), Failure> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(Failure::Usage("--threshold must be positive".into()));
    }
    let est = io::read_cloud(est)?;
    let gt = io::read_cloud(reference)?;
    let gt_index = SpatialIndex::from_points(&gt.points).map_err(|e| Failure::Data(e.to_string()))?;
    let est_index = SpatialIndex::from_points(&est.points).map_err(|e| Failure::Data(e.to_string()))?;
    let acc = eval::map_accuracy(&est.points, &gt_index, threshold)?;
    let com = eval::map_completeness(Some(&est_index), &gt.points, threshold)?;
    print_json(&json!({ "acc_cm": acc, "com_percent": com, "threshold_m": threshold }));
    Ok(())
}

fn degeneracy_report(a: DegeneracyArgs) -> Result<(), Failure> {
    let (config, _) = load_config(a.config.as_deref(), &a.overrides)?;
    let pose: [f64; 7] = a.pose.as_slice().try_into().map_err(|_| Failure::Usage("--pose takes 7 values".into()))?;
    let init = pose_from_array(&pose)
        .ok_or_else(|| Failure::Usage("--pose must be finite with a nonzero quaternion".into()))?;
    let map = load_map(&a.map, config.map_voxel)?;
    let scan = voxel_downsample(&io::read_cloud(&a.scan)?, config.scan_voxel);
    let aligned = align(&scan, &map.cloud, &map.index, &init, &config.registration)
        .map_err(|e| Failure::Data(format!("registration: {e}")))?;
    let reference = reference_spectrum(&aligned, &map.reference).map_err(|e| Failure::Numerical(e.to_string()))?;
    let report = ThresholdCalibrator::new(config.degeneracy)
        .detect(&aligned, &reference)
        .map_err(|e| Failure::Numerical(e.to_string()))?;
    print_json(&json!({
        "pose": pose_to_array(&aligned.pose),
        "residual_rms": aligned.residual_rms,
        "correspondences": aligned.correspondences.len(),
        "iterations": aligned.iterations,
        "converged": aligned.converged,
        "report": report,
    }));
    Ok(())
}
