//! Run bundles: one directory per run holding a TOML manifest, the tick-level
//! trace, derived metric series, tactile frames and an SVG plot, plus replay
//! of stored traces against stored metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, CalibrationModel};
use crate::control::{
    impedance_force_track, run_protocol, ControlError, ImpedanceParams, ProtocolConfig, ProtocolTrace, Rig, StepLabel,
};
use crate::detection::{
    ordering_holds, predictions_csv, read_predictions_csv, reports_csv, reports_from_predictions, run_benchmark,
    DatasetParams, DetectionError, HeadConfig, ReportTable,
};
use crate::metrics::{analyze, pct_rmse, ForceTrace, MetricKind, MetricsError, TRACKING_WINDOW};
use crate::phantom::{preset, Phantom, PhantomError, Preset};
use crate::seeds;
use crate::sensors::{ForceTorqueSensor, MixingModel, SensorError, SensorNoiseModel, CHANNELS};

pub const MANIFEST: &str = "manifest.txt";
pub const TRACE: &str = "trace.csv";
pub const METRICS: &str = "metrics.csv";
pub const FRAMES: &str = "frames";
pub const PLOT: &str = "plot.svg";
pub const PREDICTIONS: &str = "predictions.csv";
pub const REPORT: &str = "report.csv";
pub const REPORT_TABLE: &str = "report.txt";

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tracking error (%) drawn as a reference band on tracking plots.
pub const REFERENCE_TRACKING_RMSE: f64 = 7.04;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl BundleError {
    /// True for failures of the simulation itself rather than of files or formats.
    pub fn is_simulation_fault(&self) -> bool {
        matches!(
            self,
            BundleError::Control(_)
                | BundleError::Detection(_)
                | BundleError::Calibration(_)
                | BundleError::Phantom(_)
                | BundleError::Sensor(_)
                | BundleError::Metrics(_)
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), BundleError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, BundleError> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Run,
    Track,
    Detect,
}

/// The simulated F/T sensor of a run. Per-run noise streams are derived from
/// the run seed, so only the instrument itself is recorded here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    /// Seed of the channel mixing (the instrument identity).
    pub sensor_seed: u64,
    /// Quadratic cross-talk disabled.
    pub linear: bool,
    pub image_noise_sd: f64,
    pub channel_noise_sd: f64,
    pub drift_rate: f64,
    pub saturation_moment: f64,
}

impl Default for SensorRecord {
    fn default() -> Self {
        Self::new(0, SensorNoiseModel::default())
    }
}

impl SensorRecord {
    pub fn new(sensor_seed: u64, noise: SensorNoiseModel) -> Self {
        Self {
            sensor_seed,
            linear: false,
            image_noise_sd: noise.image_noise_sd,
            channel_noise_sd: noise.channel_noise_sd,
            drift_rate: noise.drift_rate,
            saturation_moment: noise.saturation_moment,
        }
    }

    pub fn noise(&self, run_seed: u64) -> SensorNoiseModel {
        SensorNoiseModel {
            image_noise_sd: self.image_noise_sd,
            channel_noise_sd: self.channel_noise_sd,
            drift_rate: self.drift_rate,
            saturation_moment: self.saturation_moment,
            seed: seeds::child(run_seed, 0),
        }
    }

    pub fn build(&self, run_seed: u64) -> Result<ForceTorqueSensor, SensorError> {
        let mut mixing = MixingModel::generate(self.sensor_seed)?;
        if self.linear {
            mixing = mixing.linear();
        }
        Ok(ForceTorqueSensor::new(mixing, self.noise(run_seed)))
    }
}

/// Scalar outcomes stored with the manifest and re-checked by replay.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_bench: Option<f64>,
    /// Tracking error of the true normal force (%).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pct_rmse: Option<f64>,
    #[serde(default)]
    pub aborted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_samples: Option<usize>,
    /// Image, sensor and fused F1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ordering_holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub kind: BundleKind,
    pub tool_version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Detection runs: presets and per-preset run seeds.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub presets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub run_seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    pub sensor: SensorRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub impedance: Option<ImpedanceParams>,
    /// Paths relative to the bundle directory.
    pub artifacts: Vec<String>,
    pub results: RunResults,
}

impl RunManifest {
    pub fn to_toml(&self) -> Result<String, BundleError> {
        toml::to_string(self).map_err(|e| BundleError::Manifest(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, BundleError> {
        toml::from_str(text).map_err(|e| BundleError::Manifest(e.to_string()))
    }

    pub fn load(dir: &Path) -> Result<Self, BundleError> {
        Self::from_toml(&read_file(&dir.join(MANIFEST))?)
    }
}

/// Column view of a stored trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceTable {
    pub t: Vec<f64>,
    pub position: Vec<[f64; 3]>,
    pub truth: Vec<[f64; 6]>,
    pub measured: Vec<[f64; 6]>,
    pub raw: Vec<Vec<f64>>,
    pub frame: Vec<usize>,
    pub steps: Vec<StepLabel>,
}

const WRENCH_NAMES: [&str; 6] = ["Fx", "Fy", "Fz", "Tx", "Ty", "Tz"];

pub fn trace_header() -> Vec<String> {
    let mut h: Vec<String> = ["t", "x", "y", "z"].map(String::from).to_vec();
    h.extend(WRENCH_NAMES.iter().map(|n| format!("{n}_true")));
    h.extend(WRENCH_NAMES.iter().map(|n| format!("{n}_meas")));
    h.extend((0..CHANNELS).map(|c| format!("c{c}")));
    h.push("frame_idx".into());
    h.push("step".into());
    h
}

impl From<&ProtocolTrace> for TraceTable {
    fn from(trace: &ProtocolTrace) -> Self {
        let rows = &trace.rows;
        Self {
            t: rows.iter().map(|r| r.t()).collect(),
            position: rows.iter().map(|r| [r.pose.x, r.pose.y, r.pose.z]).collect(),
            truth: rows.iter().map(|r| r.truth.to_array()).collect(),
            measured: rows.iter().map(|r| r.measured.to_array()).collect(),
            raw: rows.iter().map(|r| r.raw.clone()).collect(),
            frame: rows.iter().map(|r| r.frame).collect(),
            steps: rows.iter().map(|r| r.step).collect(),
        }
    }
}

impl TraceTable {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn force_trace(&self, measured: bool) -> ForceTrace<f64> {
        let src = if measured { &self.measured } else { &self.truth };
        ForceTrace { t: self.t.clone(), fz: src.iter().map(|w| w[2]).collect(), steps: self.steps.clone() }
    }

    /// Floats use the shortest representation that parses back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut out = trace_header().join(",");
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.t[i]);
            for v in self.position[i].iter().chain(&self.truth[i]).chain(&self.measured[i]).chain(&self.raw[i]) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", self.frame[i], self.steps[i].number());
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
        if header != trace_header() {
            return Err("unexpected trace header".into());
        }
        let mut table = TraceTable::default();
        let n_raw = CHANNELS;
        for (line, record) in reader.records().enumerate() {
            let r = record.map_err(|e| e.to_string())?;
            let num = |i: usize| -> Result<f64, String> {
                r[i].parse::<f64>().map_err(|e| format!("row {}, column {}: {e}", line + 1, header[i]))
            };
            let arr6 = |o: usize| -> Result<[f64; 6], String> {
                Ok([num(o)?, num(o + 1)?, num(o + 2)?, num(o + 3)?, num(o + 4)?, num(o + 5)?])
            };
            table.t.push(num(0)?);
            table.position.push([num(1)?, num(2)?, num(3)?]);
            table.truth.push(arr6(4)?);
            table.measured.push(arr6(10)?);
            table.raw.push((16..16 + n_raw).map(num).collect::<Result<_, _>>()?);
            let frame_col = 16 + n_raw;
            table.frame.push(r[frame_col].parse().map_err(|e| format!("row {}: frame_idx: {e}", line + 1))?);
            let step: u8 = r[frame_col + 1].parse().map_err(|e| format!("row {}: step: {e}", line + 1))?;
            table.steps.push(StepLabel::from_number(step).ok_or_else(|| format!("row {}: bad step {step}", line + 1))?);
        }
        Ok(table)
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub t: f64,
    pub value: f64,
    pub kind: MetricKind,
}

/// Benchmark force and the rel / abs / neg_abs series of the measured normal
/// force, or `None` when the trace has no hold samples (aborted runs).
pub fn compute_metrics(table: &TraceTable) -> (Option<f64>, Vec<MetricRow>) {
    let Ok(m) = analyze(&table.force_trace(true)) else {
        return (None, Vec::new());
    };
    let mut rows = Vec::with_capacity(3 * table.len());
    for series in [&m.rel, &m.abs, &m.neg_abs] {
        rows.extend(series.t.iter().zip(&series.values).map(|(&t, &value)| MetricRow { t, value, kind: series.kind }));
    }
    (Some(m.f_bench), rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("t,value,kind\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.t, r.value, r.kind);
    }
    out
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricRow>, String> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let r = record.map_err(|e| e.to_string())?;
        if r.len() != 3 {
            return Err(format!("row {}: expected 3 columns", line + 1));
        }
        let num = |i: usize| r[i].parse::<f64>().map_err(|e| format!("row {}: {e}", line + 1));
        out.push(MetricRow { t: num(0)?, value: num(1)?, kind: r[2].parse()? });
    }
    Ok(out)
}

/// Tracking error of the true normal force over the loaded steps (%).
pub fn tracking_error(table: &TraceTable, commanded: f64) -> Option<f64> {
    pct_rmse(&table.force_trace(false), commanded, &TRACKING_WINDOW).ok()
}

fn sanitize(v: f64) -> String {
    format!("{}", v).replace('.', "p").replace('-', "m")
}

pub fn run_id(kind: BundleKind, which: Preset, force: f64, seed: u64) -> String {
    let kind = match kind {
        BundleKind::Run => "run",
        BundleKind::Track => "track",
        BundleKind::Detect => "detect",
    };
    format!("{kind}-{which}-{}N-s{seed}", sanitize(force))
}

/// Inputs shared by [`execute_run`] and [`execute_track`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    pub preset: Preset,
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub sensor: SensorRecord,
}

impl RunRequest {
    pub fn new(preset: Preset, force: f64, seed: u64) -> Self {
        Self { preset, seed, protocol: ProtocolConfig::default().with_force(force), sensor: SensorRecord::default() }
    }
}

/// A calibration model and the path it was loaded from.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub model: &'a CalibrationModel,
    pub path: &'a str,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub trace: ProtocolTrace,
}

/// Protocol run written to `dir`.
pub fn execute_run(req: &RunRequest, model: Option<ModelRef<'_>>, dir: &Path) -> Result<RunOutcome, BundleError> {
    let phantom = Phantom::build(preset::<f64>(req.preset))?;
    let mut rig = Rig::new(&phantom, req.sensor.build(req.seed)?);
    rig.model = model.map(|m| m.model);
    let trace = run_protocol(&mut rig, &req.protocol)?;
    let manifest = base_manifest(BundleKind::Run, req, model, None);
    let manifest = write_trace_bundle(dir, manifest, &trace, None)?;
    Ok(RunOutcome { dir: dir.to_path_buf(), manifest, trace })
}

/// Force-tracking run written to `dir`. An instability abort still writes the
/// partial trace (with `results.aborted`) before returning the error.
pub fn execute_track(
    req: &RunRequest,
    gains: &ImpedanceParams,
    model: Option<ModelRef<'_>>,
    dir: &Path,
) -> Result<RunOutcome, BundleError> {
    let phantom = Phantom::build(preset::<f64>(req.preset))?;
    let mut rig = Rig::new(&phantom, req.sensor.build(req.seed)?);
    rig.model = model.map(|m| m.model);
    let manifest = base_manifest(BundleKind::Track, req, model, Some(*gains));
    let target = req.protocol.target_force;
    match impedance_force_track(&mut rig, &req.protocol, gains) {
        Ok(trace) => {
            let manifest = write_trace_bundle(dir, manifest, &trace, Some(target))?;
            Ok(RunOutcome { dir: dir.to_path_buf(), manifest, trace })
        }
        Err(ControlError::Unstable { force, limit, t, partial }) => {
            let mut manifest = manifest;
            manifest.results.aborted = true;
            write_trace_bundle(dir, manifest, &partial, Some(target))?;
            Err(ControlError::Unstable { force, limit, t, partial }.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn base_manifest(
    kind: BundleKind,
    req: &RunRequest,
    model: Option<ModelRef<'_>>,
    impedance: Option<ImpedanceParams>,
) -> RunManifest {
    RunManifest {
        run_id: run_id(kind, req.preset, req.protocol.target_force, req.seed),
        kind,
        tool_version: TOOL_VERSION.into(),
        seed: req.seed,
        preset: Some(req.preset.id().into()),
        presets: Vec::new(),
        run_seeds: Vec::new(),
        window: None,
        sensor: req.sensor,
        model: model.map(|m| m.path.to_string()),
        protocol: Some(req.protocol),
        impedance,
        artifacts: Vec::new(),
        results: RunResults::default(),
    }
}

fn create_dir(dir: &Path) -> Result<(), BundleError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_trace_bundle(
    dir: &Path,
    mut manifest: RunManifest,
    trace: &ProtocolTrace,
    commanded: Option<f64>,
) -> Result<RunManifest, BundleError> {
    create_dir(dir)?;
    let frames_dir = dir.join(FRAMES);
    if frames_dir.exists() {
        fs::remove_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    }
    create_dir(&frames_dir)?;
    for (i, frame) in trace.frames.iter().enumerate() {
        write_file(&frames_dir.join(frame_name(i)), frame.to_pgm())?;
    }

    let table = TraceTable::from(trace);
    write_file(&dir.join(TRACE), table.to_csv())?;
    let (f_bench, rows) = compute_metrics(&table);
    write_file(&dir.join(METRICS), metrics_csv(&rows))?;
    let pct = commanded.and_then(|c| tracking_error(&table, c));
    write_file(&dir.join(PLOT), plot_svg(&table, &rows, f_bench, commanded.map(|c| (c, pct))))?;

    manifest.results.rows = Some(table.len());
    manifest.results.frames = Some(trace.frames.len());
    manifest.results.duration = Some(table.duration());
    manifest.results.f_bench = f_bench;
    manifest.results.pct_rmse = pct;
    manifest.artifacts = vec![TRACE.into(), METRICS.into(), PLOT.into(), format!("{FRAMES}/")];
    write_file(&dir.join(MANIFEST), manifest.to_toml()?)?;
    Ok(manifest)
}

pub fn frame_name(i: usize) -> String {
    format!("{i:04}.pgm")
}

#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub benchmark: crate::detection::Benchmark,
}

/// Detection benchmark written to `dir` as predictions, report CSV and table.
pub fn execute_detect(
    params: &DatasetParams,
    sensor: SensorRecord,
    model: Option<ModelRef<'_>>,
    head: &HeadConfig,
    seed: u64,
    dir: &Path,
) -> Result<DetectOutcome, BundleError> {
    let params = DatasetParams { mixing_seed: sensor.sensor_seed, ..params.clone() };
    let benchmark = run_benchmark(&params, model.map(|m| m.model), head, seed)?;
    create_dir(dir)?;
    write_file(&dir.join(PREDICTIONS), predictions_csv(&benchmark.predictions))?;
    write_file(&dir.join(REPORT), reports_csv(&benchmark.reports))?;
    let holds = ordering_holds(&benchmark.reports);
    let table = format!("{}\nordering (image > sensor, fused >= sensor): {}\n", ReportTable(&benchmark.reports), verdict(holds));
    write_file(&dir.join(REPORT_TABLE), table)?;
    let manifest = RunManifest {
        run_id: format!("detect-s{seed}"),
        kind: BundleKind::Detect,
        tool_version: TOOL_VERSION.into(),
        seed,
        preset: None,
        presets: params.presets.iter().map(|p| p.id().to_string()).collect(),
        run_seeds: params.seeds.clone(),
        window: Some(params.window),
        sensor,
        model: model.map(|m| m.path.to_string()),
        protocol: Some(params.protocol),
        impedance: None,
        artifacts: vec![PREDICTIONS.into(), REPORT.into(), REPORT_TABLE.into()],
        results: RunResults {
            samples: Some(benchmark.samples),
            test_samples: Some(benchmark.test),
            f1: Some(benchmark.reports.map(|r| r.f1)),
            ordering_holds: Some(holds),
            ..Default::default()
        },
    };
    write_file(&dir.join(MANIFEST), manifest.to_toml()?)?;
    Ok(DetectOutcome { dir: dir.to_path_buf(), manifest, benchmark })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "violated"
    }
}

/// Outcome of [`replay`]: every comparison made and every disagreement found.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub checked: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok {
            self.mismatches.push(what());
        }
    }

    fn same_bits(&mut self, name: &str, stored: Option<f64>, fresh: Option<f64>) {
        self.check(stored.map(f64::to_bits) == fresh.map(f64::to_bits), || {
            format!("{name}: stored {stored:?}, recomputed {fresh:?}")
        });
    }
}

/// Recomputes everything derivable from the stored primary data of a bundle
/// and compares bit for bit.
pub fn replay(dir: &Path) -> Result<ReplayReport, BundleError> {
    let manifest = RunManifest::load(dir)?;
    let mut report = ReplayReport::default();
    for a in &manifest.artifacts {
        report.check(dir.join(a).exists(), || format!("missing artifact {a}"));
    }
    match manifest.kind {
        BundleKind::Run | BundleKind::Track => replay_trace(dir, &manifest, &mut report)?,
        BundleKind::Detect => replay_detect(dir, &manifest, &mut report)?,
    }
    Ok(report)
}

fn parse_err(path: PathBuf) -> impl FnOnce(String) -> BundleError {
    move |message| BundleError::Parse { path, message }
}

fn replay_trace(dir: &Path, manifest: &RunManifest, report: &mut ReplayReport) -> Result<(), BundleError> {
    let trace_path = dir.join(TRACE);
    let table = TraceTable::from_csv(&read_file(&trace_path)?).map_err(parse_err(trace_path))?;
    let metrics_path = dir.join(METRICS);
    let stored = read_metrics_csv(&read_file(&metrics_path)?).map_err(parse_err(metrics_path))?;
    let (f_bench, fresh) = compute_metrics(&table);

    report.check(stored.len() == fresh.len(), || {
        format!("metrics.csv has {} rows, recomputed {}", stored.len(), fresh.len())
    });
    for (i, (a, b)) in stored.iter().zip(&fresh).enumerate() {
        let same = a.kind == b.kind && a.t.to_bits() == b.t.to_bits() && a.value.to_bits() == b.value.to_bits();
        report.check(same, || format!("metrics.csv row {}: stored {a:?}, recomputed {b:?}", i + 1));
    }
    report.same_bits("f_bench", manifest.results.f_bench, f_bench);
    if manifest.kind == BundleKind::Track {
        let commanded = manifest.protocol.map(|p| p.target_force);
        report.same_bits("pct_rmse", manifest.results.pct_rmse, commanded.and_then(|c| tracking_error(&table, c)));
    }
    report.check(manifest.results.rows == Some(table.len()), || {
        format!("manifest rows {:?}, trace has {}", manifest.results.rows, table.len())
    });
    if let Some(p) = manifest.protocol {
        // rows span the run duration at the control rate, endpoints inclusive
        let expected = table.duration() / p.tick + 1.0;
        report.check((table.len() as f64 - expected).abs() <= 1.0 + 1e-9, || {
            format!("{} rows for {:.4} s at {:.0} Hz", table.len(), table.duration(), 1.0 / p.tick)
        });
    }
    if let Some(n) = manifest.results.frames {
        let missing = (0..n).filter(|&i| !dir.join(FRAMES).join(frame_name(i)).exists()).count();
        report.check(missing == 0, || format!("{missing} of {n} frames missing"));
        report.check(table.frame.iter().all(|&f| f < n.max(1)), || "trace references a frame beyond the stored set".into());
    }
    Ok(())
}

fn replay_detect(dir: &Path, manifest: &RunManifest, report: &mut ReplayReport) -> Result<(), BundleError> {
    let pred_path = dir.join(PREDICTIONS);
    let predictions = read_predictions_csv(read_file(&pred_path)?.as_bytes()).map_err(parse_err(pred_path))?;
    let reports = reports_from_predictions(&predictions)?;
    let stored = read_file(&dir.join(REPORT))?;
    report.check(stored == reports_csv(&reports), || "report.csv differs from the stored predictions".into());
    let f1 = reports.map(|r| r.f1);
    match manifest.results.f1 {
        Some(s) => {
            for (name, (a, b)) in ["image", "sensor", "fused"].iter().zip(s.iter().zip(&f1)) {
                report.same_bits(&format!("f1 {name}"), Some(*a), Some(*b));
            }
        }
        None => report.check(false, || "manifest has no f1 results".into()),
    }
    report.check(manifest.results.ordering_holds == Some(ordering_holds(&reports)), || {
        "ordering flag differs from the stored predictions".into()
    });
    report.check(manifest.results.test_samples == Some(predictions.len()), || {
        format!("manifest test count {:?}, predictions {}", manifest.results.test_samples, predictions.len())
    });
    Ok(())
}

struct Panel {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    t: [f64; 2],
    v: [f64; 2],
}

impl Panel {
    fn new(left: f64, top: f64, width: f64, height: f64, t: [f64; 2], values: impl Iterator<Item = f64>) -> Self {
        let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
        let pad = if hi > lo { 0.05 * (hi - lo) } else { 1.0 };
        let t = if t[1] > t[0] { t } else { [t[0], t[0] + 1.0] };
        Self { left, top, width, height, t, v: [lo - pad, hi + pad] }
    }

    fn include(mut self, v: f64) -> Self {
        let span = self.v[1] - self.v[0];
        self.v = [self.v[0].min(v - 0.05 * span), self.v[1].max(v + 0.05 * span)];
        self
    }

    fn x(&self, t: f64) -> f64 {
        self.left + (t - self.t[0]) / (self.t[1] - self.t[0]) * self.width
    }

    fn y(&self, v: f64) -> f64 {
        self.top + (self.v[1] - v) / (self.v[1] - self.v[0]) * self.height
    }

    fn frame(&self, out: &mut String, title: &str, unit: &str) {
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            self.left, self.top, self.width, self.height
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="12">{title}</text>"#,
            self.left + 4.0,
            self.top - 4.0
        );
        for (v, anchor) in [(self.v[1], self.top + 10.0), (self.v[0], self.top + self.height)] {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{:.2} {unit}</text>"#,
                self.left - 3.0,
                anchor,
                v
            );
        }
        for (t, x, anchor) in [(self.t[0], self.left, "start"), (self.t[1], self.left + self.width, "end")] {
            let _ = writeln!(
                out,
                r#"<text x="{x:.1}" y="{:.1}" font-size="9" text-anchor="{anchor}">{t:.2} s</text>"#,
                self.top + self.height + 11.0
            );
        }
    }

    fn polyline(&self, out: &mut String, t: &[f64], v: &[f64], color: &str) {
        let mut pts = String::new();
        for (&a, &b) in t.iter().zip(v) {
            let _ = write!(pts, "{:.1},{:.1} ", self.x(a), self.y(b));
        }
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#, pts.trim_end());
    }

    fn hline(&self, out: &mut String, v: f64, color: &str, dash: bool) {
        let dash = if dash { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}"{dash}/>"#,
            self.left,
            self.y(v),
            self.left + self.width,
            self.y(v)
        );
    }
}

/// Position, force (robot-frame sign, negative into the surface) with the
/// shaded negative deviation, and the relative-change inset over the sweep.
/// With `tracking = (commanded, pct_rmse)` the force panel also carries the
/// reference error band.
pub fn plot_svg(
    table: &TraceTable,
    metrics: &[MetricRow],
    f_bench: Option<f64>,
    tracking: Option<(f64, Option<f64>)>,
) -> String {
    let (w, h) = (900.0, 760.0);
    let t0 = table.t.first().copied().unwrap_or(0.0);
    let t1 = table.t.last().copied().unwrap_or(1.0);
    let span = [t0, t1];
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let ys: Vec<f64> = table.position.iter().map(|p| p[1]).collect();
    let zs: Vec<f64> = table.position.iter().map(|p| p[2]).collect();
    let pos = Panel::new(70.0, 30.0, 380.0, 160.0, span, ys.iter().copied());
    pos.frame(&mut out, "Y position", "mm");
    pos.polyline(&mut out, &table.t, &ys, "#1f77b4");
    let zp = Panel::new(500.0, 30.0, 380.0, 160.0, span, zs.iter().copied());
    zp.frame(&mut out, "Z position", "mm");
    zp.polyline(&mut out, &table.t, &zs, "#2ca02c");

    let meas: Vec<f64> = table.measured.iter().map(|w| -w[2]).collect();
    let truth: Vec<f64> = table.truth.iter().map(|w| -w[2]).collect();
    let mut force = Panel::new(70.0, 230.0, 810.0, 260.0, span, meas.iter().chain(&truth).copied());
    if let Some((c, _)) = tracking {
        force = force.include(-c * (1.0 + REFERENCE_TRACKING_RMSE / 100.0));
    }
    force.frame(&mut out, "Normal force Fz (measured blue, true grey)", "N");

    // deviation from the benchmark force over the loaded steps, shaded
    if let Some(fb) = f_bench {
        let loaded: Vec<usize> = (0..table.len()).filter(|&i| TRACKING_WINDOW.contains(&table.steps[i])).collect();
        if let (Some(&first), Some(&last)) = (loaded.first(), loaded.last()) {
            let mut path = String::new();
            for &i in &loaded {
                let _ = write!(path, "{}{:.1},{:.1} ", if i == first { "M" } else { "L" }, force.x(table.t[i]), force.y(meas[i]));
            }
            let _ = write!(path, "L{:.1},{:.1} ", force.x(table.t[last]), force.y(-fb));
            let _ = write!(path, "L{:.1},{:.1} ", force.x(table.t[first]), force.y(-fb));
            let _ = writeln!(out, r##"<path d="{}Z" fill="#d62728" fill-opacity="0.25" stroke="none"/>"##, path);
        }
        force.hline(&mut out, -fb, "#d62728", true);
    }
    force.polyline(&mut out, &table.t, &truth, "#999999");
    force.polyline(&mut out, &table.t, &meas, "#1f77b4");
    if let Some((c, pct)) = tracking {
        let band = c * REFERENCE_TRACKING_RMSE / 100.0;
        force.hline(&mut out, -c, "#000000", false);
        force.hline(&mut out, -c - band, "#ff7f0e", true);
        force.hline(&mut out, -c + band, "#ff7f0e", true);
        let label = match pct {
            Some(p) => format!("tracking RMSE {p:.2} % (reference band {REFERENCE_TRACKING_RMSE:.2} %)"),
            None => format!("tracking RMSE n/a (reference band {REFERENCE_TRACKING_RMSE:.2} %)"),
        };
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="11">{label}</text>"#, force.left + 8.0, force.top + 16.0);
    }

    // relative change over the sweep
    let plough: Vec<(f64, f64)> = metrics
        .iter()
        .filter(|r| r.kind == MetricKind::Rel)
        .zip(table.steps.iter())
        .filter(|(_, s)| **s == StepLabel::Plough)
        .map(|(r, _)| (r.t, 100.0 * r.value))
        .collect();
    if !plough.is_empty() {
        let pt: Vec<f64> = plough.iter().map(|p| p.0).collect();
        let pv: Vec<f64> = plough.iter().map(|p| p.1).collect();
        let rel = Panel::new(70.0, 540.0, 810.0, 180.0, [pt[0], pt[pt.len() - 1]], pv.iter().copied()).include(0.0);
        rel.frame(&mut out, "Relative change of Fz during the sweep", "%");
        rel.hline(&mut out, 0.0, "#444", true);
        rel.polyline(&mut out, &pt, &pv, "#9467bd");
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">time (s)</text>"#,
        w / 2.0,
        h - 10.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_request() -> RunRequest {
        let mut req = RunRequest::new(Preset::Exp1, 25.0, 3);
        req.protocol.travel = 10.0;
        req.protocol.dwell = 0.2;
        req.protocol.start = [50.0, 90.0];
        req
    }

    #[test]
    fn manifest_round_trips() {
        let req = tiny_request();
        let mut m = base_manifest(BundleKind::Track, &req, None, Some(ImpedanceParams::default()));
        m.results.f_bench = Some(25.000000000000004);
        m.results.pct_rmse = Some(0.1 + 0.2);
        let back = RunManifest::from_toml(&m.to_toml().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.results.f_bench.unwrap().to_bits(), 25.000000000000004f64.to_bits());
    }

    #[test]
    fn run_bundle_replays_clean_and_detects_tampering() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("b");
        let out = execute_run(&tiny_request(), None, &dir).unwrap();
        assert_eq!(out.manifest.results.rows, Some(out.trace.len()));
        for a in &out.manifest.artifacts {
            assert!(dir.join(a).exists(), "{a}");
        }
        let r = replay(&dir).unwrap();
        assert!(r.is_clean(), "{:?}", r.mismatches);
        assert!(r.checked > 100);

        let first = read_file(&dir.join(TRACE)).unwrap();
        execute_run(&tiny_request(), None, &dir).unwrap();
        assert_eq!(read_file(&dir.join(TRACE)).unwrap(), first);

        // perturb one measured Fz sample in the dwell
        let table = TraceTable::from_csv(&first).unwrap();
        let i = table.steps.iter().position(|s| *s == StepLabel::Dwell).unwrap() + 1;
        let mut t2 = table.clone();
        t2.measured[i][2] += 1e-9;
        write_file(&dir.join(TRACE), t2.to_csv()).unwrap();
        let r = replay(&dir).unwrap();
        assert!(!r.is_clean());
    }

    #[test]
    fn trace_csv_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let out = execute_run(&tiny_request(), None, tmp.path()).unwrap();
        let table = TraceTable::from(&out.trace);
        let back = TraceTable::from_csv(&table.to_csv()).unwrap();
        assert_eq!(back, table);
        assert_eq!(trace_header().len(), 4 + 12 + CHANNELS + 2);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let rows = vec![
            MetricRow { t: 0.1, value: -0.2, kind: MetricKind::Rel },
            MetricRow { t: 1.0 / 3.0, value: 5.0, kind: MetricKind::NegAbs },
        ];
        assert_eq!(read_metrics_csv(&metrics_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn run_ids_are_filesystem_safe() {
        assert_eq!(run_id(BundleKind::Run, Preset::Exp3, 45.0, 7), "run-exp3-45N-s7");
        assert_eq!(run_id(BundleKind::Track, Preset::Exp1, 27.5, 0), "track-exp1-27p5N-s0");
    }

    #[test]
    fn plot_is_well_formed_svg() {
        let tmp = tempfile::tempdir().unwrap();
        let out = execute_run(&tiny_request(), None, tmp.path()).unwrap();
        let svg = read_file(&tmp.path().join(PLOT)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert!(svg.contains("<path"));
        let table = TraceTable::from(&out.trace);
        let (fb, rows) = compute_metrics(&table);
        let tracked = plot_svg(&table, &rows, fb, Some((25.0, Some(1.5))));
        assert!(tracked.contains("7.04 %"));
    }
}
