use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use palp_core::bundle::{
    self, execute_detect, execute_run, execute_track, replay, run_id, BundleError, BundleKind, ModelRef, RunRequest,
    SensorRecord, TraceTable,
};
use palp_core::calibration::{self, calibrate, mlp::SgdConfig, CalibrationModel, TrainConfig};
use palp_core::control::{ImpedanceParams, FORCE_LEVELS};
use palp_core::detection::{DatasetParams, HeadConfig, ReportTable};
use palp_core::metrics::{analyze, pct_rmse, TRACKING_WINDOW};
use palp_core::phantom::Preset;
use palp_core::sensors::SensorNoiseModel;

/// Seeds are stored in TOML manifests, whose integers are signed 64-bit.
const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Parser)]
#[command(name = "palp-bench", version, about = "Deterministic desk-scale palpation bench")]
struct Cli {
    /// Root directory for run bundles and models.
    #[arg(long, global = true, env = "PALP_BENCH_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the phantom presets.
    Presets,
    /// Run the five-step palpation protocol and write a bundle.
    Run(RunArgs),
    /// Collect calibration data, train the channel-to-wrench model, report accuracy.
    Calibrate(CalibrateArgs),
    /// Run the protocol with closed-loop force tracking.
    Track(TrackArgs),
    /// Build the detection benchmark and compare image, sensor and fused heads.
    Detect(DetectArgs),
    /// Compute force metrics from a stored trace.
    Metrics(MetricsArgs),
    /// Recompute the metrics of stored bundles and compare bit for bit.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct ForceArgs {
    /// Target normal force (N); one of 25, 35, 45 unless --force-override.
    #[arg(long, default_value_t = 25.0)]
    force: f64,
    /// Accept any positive target force.
    #[arg(long)]
    force_override: bool,
}

impl ForceArgs {
    fn checked(&self) -> Result<f64, Failure> {
        if !(self.force > 0.0 && self.force.is_finite()) {
            return Err(Failure::Usage(format!("--force must be positive (got {})", self.force)));
        }
        if !self.force_override && !FORCE_LEVELS.contains(&self.force) {
            return Err(Failure::Usage(format!(
                "--force must be one of 25, 35, 45 N (got {}); pass --force-override to allow other values",
                self.force
            )));
        }
        Ok(self.force)
    }
}

#[derive(Args)]
struct SensorArgs {
    /// Seed of the simulated sensor's channel mixing.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=MAX_SEED))]
    sensor_seed: Option<u64>,
    /// Disable channel noise, drift and image noise.
    #[arg(long)]
    noiseless: bool,
    /// Disable the quadratic cross-talk term.
    #[arg(long)]
    linear: bool,
}

impl SensorArgs {
    fn record(&self, model: Option<&CalibrationModel>) -> Result<SensorRecord, Failure> {
        let from_model = model.and_then(|m| m.sensor_seed);
        let seed = match (self.sensor_seed, from_model) {
            (Some(a), Some(b)) if a != b => {
                return Err(Failure::Usage(format!("--sensor-seed {a} does not match the model's sensor seed {b}")))
            }
            (a, b) => a.or(b).unwrap_or(0),
        };
        let noise = if self.noiseless { SensorNoiseModel::noiseless() } else { SensorNoiseModel::default() };
        Ok(SensorRecord { linear: self.linear, ..SensorRecord::new(seed, noise) })
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "exp1", value_parser = parse_preset)]
    preset: Preset,
    #[command(flatten)]
    force: ForceArgs,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=MAX_SEED))]
    seed: u64,
    #[command(flatten)]
    sensor: SensorArgs,
    /// Calibration model for the measured wrench (default: measured = true wrench).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Run every experiment preset at every force level, in parallel.
    #[arg(long)]
    batch: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Number of calibration samples (at least 100).
    #[arg(long, default_value_t = 3343, value_parser = clap::value_parser!(u64).range(100..))]
    points: u64,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=MAX_SEED))]
    seed: u64,
    #[command(flatten)]
    sensor: SensorArgs,
    #[arg(long, default_value_t = SgdConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = SgdConfig::default().learning_rate)]
    learning_rate: f64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64, 64, 64, 64])]
    hidden: Vec<usize>,
    /// Output directory (default: <out>/calib-n<points>-s<seed>).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, default_value = "exp1", value_parser = parse_preset)]
    preset: Preset,
    #[command(flatten)]
    force: ForceArgs,
    /// Calibration model providing the force feedback.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=MAX_SEED))]
    seed: u64,
    #[command(flatten)]
    sensor: SensorArgs,
    /// Admittance stiffness (N/mm); 0 disables the correction.
    #[arg(long, default_value_t = ImpedanceParams::default().stiffness)]
    stiffness: f64,
    #[arg(long, default_value_t = ImpedanceParams::default().damping)]
    damping: f64,
    #[arg(long, default_value_t = ImpedanceParams::default().integral)]
    integral: f64,
}

#[derive(Args)]
struct DetectArgs {
    /// Protocol-run seeds per preset.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    seeds: Vec<u64>,
    /// Seed of balancing, splitting and head training.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u64).range(0..=MAX_SEED))]
    seed: u64,
    /// Calibration model for the F/T branch (default: calibrate one first).
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    sensor: SensorArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Measured,
    True,
}

#[derive(Args)]
struct MetricsArgs {
    /// A trace.csv file or a bundle directory.
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = Source::Measured)]
    source: Source,
    /// Also report the tracking error against this commanded force (N).
    #[arg(long)]
    commanded: Option<f64>,
    /// Write the metric series CSV here instead of printing a summary only.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Bundle directories.
    #[arg(required = true)]
    bundles: Vec<PathBuf>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

enum Failure {
    Usage(String),
    Simulation(anyhow::Error),
    Mismatch(String),
    Other(anyhow::Error),
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        if e.is_simulation_fault() {
            Failure::Simulation(e.into())
        } else {
            Failure::Other(e.into())
        }
    }
}

impl From<calibration::CalibrationError> for Failure {
    fn from(e: calibration::CalibrationError) -> Self {
        match e {
            calibration::CalibrationError::Io(_)
            | calibration::CalibrationError::Json(_)
            | calibration::CalibrationError::Format(_)
            | calibration::CalibrationError::Csv(_) => Failure::Other(e.into()),
            other => Failure::Simulation(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Presets => presets(),
        Command::Run(a) => cmd_run(&cli.out, a),
        Command::Calibrate(a) => cmd_calibrate(&cli.out, a),
        Command::Track(a) => cmd_track(&cli.out, a),
        Command::Detect(a) => cmd_detect(&cli.out, a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Simulation(e)) => {
            eprintln!("simulation fault: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Mismatch(m)) => {
            eprintln!("verification mismatch: {m}");
            ExitCode::from(4)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn presets() -> Result<(), Failure> {
    for p in Preset::ALL {
        println!("{:<8} {}", p.id(), p.description());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<CalibrationModel, Failure> {
    CalibrationModel::load(path).map_err(|e| Failure::Usage(format!("loading model {}: {e}", path.display())))
}

fn cmd_run(root: &Path, a: &RunArgs) -> Result<(), Failure> {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let sensor = a.sensor.record(model.as_ref())?;
    let path = a.model.as_ref().map(|p| p.display().to_string());
    let mref = model.as_ref().zip(path.as_deref()).map(|(model, path)| ModelRef { model, path });
    let jobs: Vec<(Preset, f64)> = if a.batch {
        Preset::EXPERIMENTS.iter().flat_map(|&p| FORCE_LEVELS.map(|f| (p, f))).collect()
    } else {
        vec![(a.preset, a.force.checked()?)]
    };
    let results: Vec<Result<bundle::RunOutcome, BundleError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(p, f)| {
                scope.spawn(move || {
                    let req = RunRequest { sensor, ..RunRequest::new(p, f, a.seed) };
                    execute_run(&req, mref, &root.join(run_id(BundleKind::Run, p, f, a.seed)))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run worker panicked")).collect()
    });
    for r in results {
        let out = r?;
        let res = &out.manifest.results;
        println!(
            "{}: {} rows, {} frames, F_bench {:.3} N -> {}",
            out.manifest.run_id,
            res.rows.unwrap_or(0),
            res.frames.unwrap_or(0),
            res.f_bench.unwrap_or(f64::NAN),
            out.dir.display()
        );
    }
    Ok(())
}

fn cmd_calibrate(root: &Path, a: &CalibrateArgs) -> Result<(), Failure> {
    if a.hidden.is_empty() || a.hidden.contains(&0) {
        return Err(Failure::Usage("--hidden needs at least one positive width".into()));
    }
    let sensor = a.sensor.record(None)?;
    let noise = sensor.noise(0);
    let cfg = TrainConfig {
        hidden: a.hidden.clone(),
        sgd: SgdConfig { epochs: a.epochs, learning_rate: a.learning_rate, seed: a.seed, ..SgdConfig::default() },
    };
    let started = std::time::Instant::now();
    let cal = calibrate(sensor.sensor_seed, noise, sensor.linear, a.points as usize, a.seed, &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    let dir = a.dir.clone().unwrap_or_else(|| root.join(format!("calib-n{}-s{}", a.points, a.seed)));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    cal.model.save(&dir.join("model.json"))?;
    let mut data = Vec::new();
    cal.data.write_csv(&mut data)?;
    write(&dir.join("dataset.csv"), &data)?;
    let mut loss = String::from("epoch,train,validation,best_validation\n");
    for (e, ((t, v), b)) in cal.history.train.iter().zip(&cal.history.validation).zip(&cal.history.best_validation).enumerate()
    {
        let _ = writeln!(loss, "{e},{t},{v},{b}");
    }
    write(&dir.join("loss.csv"), loss.as_bytes())?;

    let gc = calibration::grad_check(&cal.model, &cal.data, calibration::Split::Test, 8, 20, a.seed)?;
    let r = &cal.report;
    let mut report = String::new();
    let count = |s| cal.data.count(s);
    let _ = writeln!(
        report,
        "samples: {} (train {}, test {}, validation {})",
        cal.data.len(),
        count(calibration::Split::Train),
        count(calibration::Split::Test),
        count(calibration::Split::Validation)
    );
    let _ = writeln!(report, "sensor seed: {}, linear: {}, noiseless: {}", sensor.sensor_seed, sensor.linear, a.sensor.noiseless);
    let _ = writeln!(report, "best epoch: {} of {}", cal.history.best_epoch, a.epochs);
    let _ = writeln!(report, "held-out RMSE (test split):");
    for (name, v) in ["Fx", "Fy", "Fz", "Tx", "Ty", "Tz"].iter().zip(r.rmse) {
        let unit = if name.starts_with('F') { "N" } else { "N*mm" };
        let _ = writeln!(report, "  {name}: {v:.4} {unit}");
    }
    let _ = writeln!(
        report,
        "force RMSE {:.4} N = {:.3} % of the {:.2} N force range",
        r.force_rmse,
        100.0 * r.relative_force_rmse(),
        r.force_range
    );
    let _ = writeln!(
        report,
        "torque RMSE {:.4} N*mm = {:.3} % of the {:.2} N*mm torque range",
        r.torque_rmse,
        100.0 * r.relative_torque_rmse(),
        r.torque_range
    );
    let _ = writeln!(report, "gradient check max relative error: {gc:.3e} ({})", if gc < 1e-4 { "ok" } else { "FAILED" });
    let _ = writeln!(report, "elapsed: {elapsed:.1} s");
    write(&dir.join("report.txt"), report.as_bytes())?;
    print!("{report}");
    println!("model -> {}", dir.join("model.json").display());
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_track(root: &Path, a: &TrackArgs) -> Result<(), Failure> {
    let force = a.force.checked()?;
    let gains = ImpedanceParams { stiffness: a.stiffness, damping: a.damping, integral: a.integral };
    let model = load_model(&a.model)?;
    let sensor = a.sensor.record(Some(&model))?;
    let path = a.model.display().to_string();
    let req = RunRequest { sensor, ..RunRequest::new(a.preset, force, a.seed) };
    let dir = root.join(run_id(BundleKind::Track, a.preset, force, a.seed));
    let out = execute_track(&req, &gains, Some(ModelRef { model: &model, path: &path }), &dir).map_err(|e| {
        if matches!(e, BundleError::Control(_)) {
            Failure::Simulation(anyhow!("{e}; partial trace saved in {}", dir.display()))
        } else {
            e.into()
        }
    })?;
    let res = &out.manifest.results;
    println!(
        "{}: tracking RMSE {:.2} % of {force} N over steps 2-4 (reference {:.2} %) -> {}",
        out.manifest.run_id,
        res.pct_rmse.unwrap_or(f64::NAN),
        bundle::REFERENCE_TRACKING_RMSE,
        out.dir.display()
    );
    Ok(())
}

fn cmd_detect(root: &Path, a: &DetectArgs) -> Result<(), Failure> {
    if a.seeds.is_empty() || a.seeds.iter().any(|&s| s > MAX_SEED) {
        return Err(Failure::Usage("--seeds needs at least one seed below 2^63".into()));
    }
    let (model, path) = match &a.model {
        Some(p) => (load_model(p)?, p.display().to_string()),
        None => {
            let sensor = a.sensor.record(None)?;
            eprintln!("no --model given; calibrating the sensor first");
            let cal = calibrate(sensor.sensor_seed, sensor.noise(0), sensor.linear, 3343, a.seed, &TrainConfig::default())?;
            let dir = root.join(format!("detect-s{}", a.seed));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let file = dir.join("model.json");
            cal.model.save(&file)?;
            (cal.model, file.display().to_string())
        }
    };
    let sensor = a.sensor.record(Some(&model))?;
    let params = DatasetParams { seeds: a.seeds.clone(), ..DatasetParams::default() };
    let dir = root.join(format!("detect-s{}", a.seed));
    let out = execute_detect(&params, sensor, Some(ModelRef { model: &model, path: &path }), &HeadConfig::default(), a.seed, &dir)?;
    let b = &out.benchmark;
    println!("{} samples ({} train / {} test)", b.samples, b.train, b.test);
    print!("{}", ReportTable(&b.reports));
    println!(
        "ordering (image > sensor, fused >= sensor): {}",
        if out.manifest.results.ordering_holds == Some(true) { "holds" } else { "violated" }
    );
    println!("-> {}", out.dir.display());
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<(), Failure> {
    let file = if a.trace.is_dir() { a.trace.join(bundle::TRACE) } else { a.trace.clone() };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let table = TraceTable::from_csv(&text).map_err(|m| Failure::Usage(format!("{}: {m}", file.display())))?;
    let trace = table.force_trace(matches!(a.source, Source::Measured));
    let m = analyze(&trace).map_err(|e| Failure::Simulation(e.into()))?;
    let plough = |i: usize| trace.steps[i] == palp_core::control::StepLabel::Plough;
    println!("rows: {}", table.len());
    println!("F_bench: {:.4} N", m.f_bench);
    if let Some(v) = m.rel.mean_where(plough) {
        println!("mean relative change during the sweep: {:.4}", v);
    }
    let min_rel = m.rel.values.iter().enumerate().filter(|(i, _)| plough(*i)).map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    if min_rel.is_finite() {
        println!("largest drop during the sweep: {:.4}", min_rel);
    }
    if let Some(c) = a.commanded {
        let e = pct_rmse(&trace, c, &TRACKING_WINDOW).map_err(|e| Failure::Usage(e.to_string()))?;
        println!("tracking RMSE: {e:.3} % of {c} N");
    }
    if let Some(path) = &a.csv {
        let (_, rows) = bundle::compute_metrics(&TraceTable {
            measured: if matches!(a.source, Source::Measured) { table.measured.clone() } else { table.truth.clone() },
            ..table.clone()
        });
        write(path, bundle::metrics_csv(&rows).as_bytes())?;
        println!("series -> {}", path.display());
    }
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<(), Failure> {
    let mut bad = 0;
    for dir in &a.bundles {
        let r = replay(dir)?;
        println!("{}: {} checks, {} mismatches", dir.display(), r.checked, r.mismatches.len());
        for m in r.mismatches.iter().take(20) {
            println!("  {m}");
        }
        bad += r.mismatches.len();
    }
    if bad > 0 {
        return Err(Failure::Mismatch(format!("{bad} mismatches")));
    }
    Ok(())
}
