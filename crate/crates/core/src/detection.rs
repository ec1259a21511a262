//! Tendon presence detection from tactile frames, F/T windows, or both.

use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::calibration::mlp::{fit, sigmoid, Loss, Mlp, MlpError, SgdConfig};
use crate::calibration::{CalibrationModel, Standardizer};
use crate::contact::Wrench;
use crate::control::{run_protocol, ControlError, ProtocolConfig, ProtocolTrace, Rig, StepLabel, FORCE_LEVELS};
use crate::metrics::{f_bench, MetricsError};
use crate::phantom::{preset, Phantom, PhantomError, Preset};
use crate::seeds::{self, Stream};
use crate::sensors::{ForceTorqueSensor, MixingModel, SensorError, SensorNoiseModel, TactileImage};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("dataset has only {0} samples")]
    SingleClass(&'static str),
    #[error("F/T window has {got} samples, expected {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("detector training diverged: {0}")]
    Training(#[from] MlpError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One classification example cut from a protocol sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: TactileImage,
    /// Measured wrenches ending at the sample position.
    pub window: Vec<Wrench<f64>>,
    /// Benchmark force of the run the sample came from (N).
    pub f_bench: f64,
    pub tendon: bool,
    pub preset: Preset,
    pub run_seed: u64,
    pub y: f64,
}

/// Layout of the simulated benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParams {
    pub presets: Vec<Preset>,
    /// One protocol run per preset and seed; forces cycle through 25/35/45 N by seed index.
    pub seeds: Vec<u64>,
    /// Mixing of the simulated sensor (must match the calibration model, if any).
    pub mixing_seed: u64,
    pub first_y: f64,
    pub spacing: f64,
    pub count: usize,
    pub window: usize,
    /// Radius of the ground-truth disc under the dome axis (mm).
    pub label_radius: f64,
    pub protocol: ProtocolConfig,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            presets: Preset::EXPERIMENTS.to_vec(),
            seeds: vec![1, 2, 3],
            mixing_seed: 0,
            first_y: 42.5,
            spacing: 5.0,
            count: 24,
            window: 30,
            label_radius: 1.0,
            protocol: ProtocolConfig::default(),
        }
    }
}

/// Ground truth: more than half of a small disc under the dome axis lies over a tendon.
pub fn tendon_label(phantom: &Phantom<f64>, x: f64, y: f64, radius: f64) -> bool {
    phantom.tendon_fraction(x, y, radius) > 0.5
}

/// Cuts labelled samples from the plough step of one trace.
pub fn samples_from_trace(
    trace: &ProtocolTrace,
    phantom: &Phantom<f64>,
    which: Preset,
    run_seed: u64,
    params: &DatasetParams,
) -> Result<Vec<LabeledSample>, DetectionError> {
    let fb = f_bench(&trace.force_trace(crate::control::ForceSource::Measured))?;
    let plough = trace.step_range(StepLabel::Plough);
    let rows = &trace.rows[plough.clone()];
    let mut out = Vec::with_capacity(params.count);
    for k in 0..params.count {
        let y = params.first_y + params.spacing * k as f64;
        let Some(i) = nearest_frame_row(rows, &trace.frames, y) else { continue };
        let end = plough.start + i + 1;
        if end < params.window {
            continue;
        }
        let window = trace.rows[end - params.window..end].iter().map(|r| r.measured).collect();
        let x = trace.rows[end - 1].pose.x;
        out.push(LabeledSample {
            image: trace.frames[rows[i].frame].clone(),
            window,
            f_bench: fb,
            tendon: tendon_label(phantom, x, rows[i].pose.y, params.label_radius),
            preset: which,
            run_seed,
            y: rows[i].pose.y,
        });
    }
    Ok(out)
}

/// Row within `rows` whose own tick rendered a frame and whose `y` is closest to `y`.
fn nearest_frame_row(rows: &[crate::control::TraceRow], frames: &[TactileImage], y: f64) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| frames.get(r.frame).is_some_and(|f| f.t == r.pose.t))
        .min_by(|a, b| (a.1.pose.y - y).abs().total_cmp(&(b.1.pose.y - y).abs()))
        .map(|(i, _)| i)
}

/// Runs every (preset, seed) protocol in parallel and returns the class-balanced sample set.
pub fn build_detection_dataset(
    params: &DatasetParams,
    model: Option<&CalibrationModel>,
    seed: u64,
) -> Result<Vec<LabeledSample>, DetectionError> {
    let mixing = MixingModel::generate(params.mixing_seed)?;
    let jobs: Vec<(Preset, usize, u64)> = params
        .presets
        .iter()
        .flat_map(|&p| params.seeds.iter().enumerate().map(move |(i, &s)| (p, i, s)))
        .collect();
    let results: Vec<Result<Vec<LabeledSample>, DetectionError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(which, index, run_seed)| {
                let mixing = mixing.clone();
                scope.spawn(move || -> Result<Vec<LabeledSample>, DetectionError> {
                    let phantom = Phantom::build(preset::<f64>(which))?;
                    let noise = SensorNoiseModel::default().with_seed(seeds::child(run_seed, which as u64));
                    let mut rig = Rig::new(&phantom, ForceTorqueSensor::new(mixing, noise));
                    rig.model = model;
                    let cfg = params.protocol.with_force(FORCE_LEVELS[index % FORCE_LEVELS.len()]);
                    let trace = run_protocol(&mut rig, &cfg)?;
                    samples_from_trace(&trace, &phantom, which, run_seed, params)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("dataset worker panicked")).collect()
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    balance(all, seed)
}

/// Subsamples the majority class down to the minority count.
pub fn balance(samples: Vec<LabeledSample>, seed: u64) -> Result<Vec<LabeledSample>, DetectionError> {
    let (mut pos, mut neg): (Vec<_>, Vec<_>) = samples.into_iter().partition(|s| s.tendon);
    if pos.is_empty() {
        return Err(DetectionError::SingleClass("no_tendon"));
    }
    if neg.is_empty() {
        return Err(DetectionError::SingleClass("tendon"));
    }
    let mut rng = seeds::rng(seed, Stream::DetectionBalance);
    let n = pos.len().min(neg.len());
    for class in [&mut pos, &mut neg] {
        if class.len() > n {
            let mut keep: Vec<usize> = (0..class.len()).collect();
            keep.shuffle(&mut rng);
            keep.truncate(n);
            keep.sort_unstable();
            let taken = std::mem::take(class);
            *class = taken.into_iter().enumerate().filter(|(i, _)| keep.binary_search(i).is_ok()).map(|(_, s)| s).collect();
        }
    }
    pos.extend(neg);
    Ok(pos)
}

const POOL: usize = 4;
const PROFILE_BINS: usize = 8;
const GRADIENT_BANDS: usize = 4;
/// Length of [`featurize_image`] output.
pub const IMAGE_FEATURES: usize = POOL * POOL + PROFILE_BINS + 2 * GRADIENT_BANDS + 2;
/// Length of [`summarize_ft`] output.
pub const FT_FEATURES: usize = 3 * 6 + 3;

/// Row-averaged column profile over the central half of the rows.
pub fn cross_profile(img: &TactileImage) -> Vec<f64> {
    let rows = img.height / 4..img.height - img.height / 4;
    let n = rows.len().max(1) as f64;
    (0..img.width).map(|c| rows.clone().map(|r| img.get(c, r) as f64).sum::<f64>() / n).collect()
}

fn gaussian_smooth(v: &[f64], sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let n = v.len() as i64;
    (0..n)
        .map(|i| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, w) in (-half..=half).zip(&kernel) {
                let j = i + k;
                if (0..n).contains(&j) {
                    acc += w * v[j as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// Band-passed profile: fine smoothing minus a broad background estimate.
pub fn ridge_response(img: &TactileImage) -> Vec<f64> {
    let p = cross_profile(img);
    let fine = gaussian_smooth(&p, 1.5);
    let broad = gaussian_smooth(&p, 8.0);
    fine.iter().zip(&broad).map(|(a, b)| a - b).collect()
}

/// Minimum prominence of a counted ridge (intensity units).
pub const RIDGE_PROMINENCE: f64 = 0.01;

/// Topographic prominence of every local maximum of `v`.
pub fn peak_prominences(v: &[f64]) -> Vec<(usize, f64)> {
    let n = v.len();
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        if !(v[i] > v[i - 1] && v[i] >= v[i + 1]) {
            continue;
        }
        // lowest point between the peak and the next higher point (or the edge)
        let base = |range: &mut dyn Iterator<Item = usize>| {
            let mut lowest = v[i];
            for j in range {
                if v[j] > v[i] {
                    break;
                }
                lowest = lowest.min(v[j]);
            }
            lowest
        };
        let left = base(&mut (0..i).rev());
        let right = base(&mut (i + 1..n));
        out.push((i, v[i] - left.max(right)));
    }
    out
}

/// Number of ridges across the sweep axis: maxima of the lightly smoothed
/// cross profile standing out by at least [`RIDGE_PROMINENCE`]. A featureless
/// contact patch counts as one ridge.
pub fn ridge_count(img: &TactileImage) -> usize {
    let profile = gaussian_smooth(&cross_profile(img), 1.5);
    peak_prominences(&profile).iter().filter(|(_, p)| *p >= RIDGE_PROMINENCE).count()
}

/// Fixed-length image descriptor: 4x4 pooled means, an 8-bin cross profile,
/// horizontal and vertical gradient energy per band, ridge count, and the
/// contrast of the central strip against its flanks.
pub fn featurize_image(img: &TactileImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut f = Vec::with_capacity(IMAGE_FEATURES);
    for by in 0..POOL {
        for bx in 0..POOL {
            let (r0, r1) = (by * h / POOL, (by + 1) * h / POOL);
            let (c0, c1) = (bx * w / POOL, (bx + 1) * w / POOL);
            let mut acc = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += img.get(c, r) as f64;
                }
            }
            f.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    let profile = cross_profile(img);
    for b in 0..PROFILE_BINS {
        let (c0, c1) = (b * w / PROFILE_BINS, (b + 1) * w / PROFILE_BINS);
        f.push(profile[c0..c1].iter().sum::<f64>() / (c1 - c0) as f64);
    }
    for band in 0..GRADIENT_BANDS {
        let (c0, c1) = (band * w / GRADIENT_BANDS, (band + 1) * w / GRADIENT_BANDS);
        let mut e = 0.0;
        let mut n = 0usize;
        for r in 0..h {
            for c in c0..c1.min(w - 1) {
                e += (img.get(c + 1, r) as f64 - img.get(c, r) as f64).powi(2);
                n += 1;
            }
        }
        f.push(e / n.max(1) as f64);
    }
    for band in 0..GRADIENT_BANDS {
        let (r0, r1) = (band * h / GRADIENT_BANDS, (band + 1) * h / GRADIENT_BANDS);
        let mut e = 0.0;
        let mut n = 0usize;
        for r in r0..r1.min(h - 1) {
            for c in 0..w {
                e += (img.get(c, r + 1) as f64 - img.get(c, r) as f64).powi(2);
                n += 1;
            }
        }
        f.push(e / n.max(1) as f64);
    }
    f.push(ridge_count(img) as f64);
    let response = ridge_response(img);
    let mid = w / 2;
    let strip = w / 20 + 1;
    let centre = response[mid - strip..mid + strip].iter().sum::<f64>() / (2 * strip) as f64;
    f.push(centre);
    f
}

fn slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Per-component mean, variance and slope (per sample) of a measured-wrench
/// window, then mean and max of `|Fz - F_bench|` and the mean relative change.
pub fn summarize_ft(window: &[Wrench<f64>], f_bench: f64, expected_len: usize) -> Result<Vec<f64>, DetectionError> {
    if window.len() != expected_len || window.is_empty() {
        return Err(DetectionError::WindowLength { expected: expected_len, got: window.len() });
    }
    let n = window.len() as f64;
    let mut f = Vec::with_capacity(FT_FEATURES);
    let columns: Vec<Vec<f64>> = (0..6).map(|c| window.iter().map(|w| w.to_array()[c]).collect()).collect();
    for col in &columns {
        f.push(col.iter().sum::<f64>() / n);
    }
    for col in &columns {
        let m = col.iter().sum::<f64>() / n;
        f.push(col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n);
    }
    for col in &columns {
        f.push(slope(col));
    }
    let dev: Vec<f64> = columns[2].iter().map(|fz| (fz - f_bench).abs()).collect();
    f.push(dev.iter().sum::<f64>() / n);
    f.push(dev.iter().cloned().fold(0.0, f64::max));
    f.push(columns[2].iter().map(|fz| (fz - f_bench) / f_bench).sum::<f64>() / n);
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Sensor,
    Fused,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Image => "Image (features + MLP)",
            Modality::Sensor => "Sensor (MLP)",
            Modality::Fused => "Combined (Late Fusion)",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Sensor => "sensor",
            Modality::Fused => "fused",
        }
    }
}

/// Standardised features into a one-logit network.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub standardizer: Standardizer,
    pub mlp: Mlp<f64>,
}

impl ClassifierHead {
    pub fn probability(&self, features: &[f64]) -> Result<f64, DetectionError> {
        Ok(sigmoid(self.mlp.forward(&self.standardizer.apply(features))?[0]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: vec![16], sgd: SgdConfig { epochs: 300, learning_rate: 0.02, momentum: 0.9, batch_size: 16, seed: 0 } }
    }
}

/// Trains a logistic head with cross-entropy on `features` / `labels`.
pub fn train_head(features: &[Vec<f64>], labels: &[bool], cfg: &HeadConfig) -> Result<ClassifierHead, DetectionError> {
    if features.is_empty() {
        return Err(DetectionError::Empty);
    }
    let standardizer = Standardizer::fit(features);
    let xs: Vec<Vec<f64>> = features.iter().map(|f| standardizer.apply(f)).collect();
    let ys: Vec<Vec<f64>> = labels.iter().map(|&l| vec![if l { 1.0 } else { 0.0 }]).collect();
    let mut widths = vec![xs[0].len()];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut mlp = Mlp::new(&widths, cfg.sgd.seed)?;
    fit(&mut mlp, (&xs, &ys), None, &cfg.sgd, Loss::Logistic)?;
    Ok(ClassifierHead { standardizer, mlp })
}

/// Image head, sensor head and the late-fusion weight on the image probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Detectors {
    pub image: ClassifierHead,
    pub sensor: ClassifierHead,
    pub image_weight: f64,
    pub window: usize,
}

/// Weighted late fusion; weight 0.5 is the plain mean.
pub fn fuse(p_image: f64, p_sensor: f64, image_weight: f64) -> f64 {
    image_weight * p_image + (1.0 - image_weight) * p_sensor
}

impl Detectors {
    pub fn probabilities(&self, s: &LabeledSample) -> Result<[f64; 3], DetectionError> {
        let pi = self.image.probability(&featurize_image(&s.image))?;
        let ps = self.sensor.probability(&summarize_ft(&s.window, s.f_bench, self.window)?)?;
        Ok([pi, ps, fuse(pi, ps, self.image_weight)])
    }
}

/// 80/20 split stratified by label. Returns (train, test) indices.
pub fn stratified_split(samples: &[LabeledSample], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeds::rng(seed, Stream::DetectionSplit);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].tendon == class).collect();
        idx.shuffle(&mut rng);
        let n_train = (0.8 * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn train_detectors(samples: &[LabeledSample], window: usize, cfg: &HeadConfig) -> Result<Detectors, DetectionError> {
    if !samples.iter().any(|s| s.tendon) {
        return Err(DetectionError::SingleClass("no_tendon"));
    }
    if samples.iter().all(|s| s.tendon) {
        return Err(DetectionError::SingleClass("tendon"));
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.tendon).collect();
    let img: Vec<Vec<f64>> = samples.iter().map(|s| featurize_image(&s.image)).collect();
    let ft: Vec<Vec<f64>> =
        samples.iter().map(|s| summarize_ft(&s.window, s.f_bench, window)).collect::<Result<_, _>>()?;
    Ok(Detectors {
        image: train_head(&img, &labels, cfg)?,
        sensor: train_head(&ft, &labels, cfg)?,
        image_weight: 0.5,
        window,
    })
}

/// Precision, recall and F1 of the tendon class at threshold 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub modality: Modality,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl EvalReport {
    pub fn from_predictions(modality: Modality, predicted: &[bool], actual: &[bool]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        Self { modality, tp, fp, tn, fn_, precision, recall, f1: f1_score(precision, recall) }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub const THRESHOLD: f64 = 0.5;

/// Probabilities of one test sample, image / sensor / fused.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub preset: Preset,
    pub run_seed: u64,
    pub y: f64,
    pub tendon: bool,
    pub probabilities: [f64; 3],
}

pub fn predict(detectors: &Detectors, test: &[LabeledSample]) -> Result<Vec<Prediction>, DetectionError> {
    test.iter()
        .map(|s| {
            Ok(Prediction {
                preset: s.preset,
                run_seed: s.run_seed,
                y: s.y,
                tendon: s.tendon,
                probabilities: detectors.probabilities(s)?,
            })
        })
        .collect()
}

/// Reports for image, sensor and fused predictions, in that order.
pub fn reports_from_predictions(predictions: &[Prediction]) -> Result<[EvalReport; 3], DetectionError> {
    if predictions.is_empty() {
        return Err(DetectionError::Empty);
    }
    let actual: Vec<bool> = predictions.iter().map(|p| p.tendon).collect();
    let modes = [Modality::Image, Modality::Sensor, Modality::Fused];
    Ok(std::array::from_fn(|m| {
        let predicted: Vec<bool> = predictions.iter().map(|p| p.probabilities[m] >= THRESHOLD).collect();
        EvalReport::from_predictions(modes[m], &predicted, &actual)
    }))
}

pub fn evaluate(detectors: &Detectors, test: &[LabeledSample]) -> Result<[EvalReport; 3], DetectionError> {
    reports_from_predictions(&predict(detectors, test)?)
}

pub fn predictions_csv(predictions: &[Prediction]) -> String {
    let mut out = String::from("preset,run_seed,y,tendon,p_image,p_sensor,p_fused\n");
    for p in predictions {
        let [a, b, c] = p.probabilities;
        let _ = writeln!(out, "{},{},{},{},{a},{b},{c}", p.preset, p.run_seed, p.y, u8::from(p.tendon));
    }
    out
}

pub fn read_predictions_csv<R: std::io::Read>(input: R) -> Result<Vec<Prediction>, String> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let r = record.map_err(|e| e.to_string())?;
        let field = |i: usize| r.get(i).ok_or_else(|| format!("row {}: missing column {i}", line + 1));
        let num = |i: usize| -> Result<f64, String> {
            field(i)?.parse::<f64>().map_err(|e| format!("row {}: {e}", line + 1))
        };
        out.push(Prediction {
            preset: field(0)?.parse()?,
            run_seed: field(1)?.parse().map_err(|e| format!("row {}: {e}", line + 1))?,
            y: num(2)?,
            tendon: field(3)? == "1",
            probabilities: [num(4)?, num(5)?, num(6)?],
        });
    }
    Ok(out)
}

/// Plain-text table with one row per modality.
pub struct ReportTable<'a>(pub &'a [EvalReport]);

impl fmt::Display for ReportTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>9} {:>7} {:>8}", "Modality", "Precision", "Recall", "F1 Score")?;
        for r in self.0 {
            writeln!(f, "{:<26} {:>9.2} {:>7.2} {:>8.2}", r.modality.label(), r.precision, r.recall, r.f1)?;
        }
        Ok(())
    }
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("modality,precision,recall,f1,tp,fp,tn,fn\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.modality.id(),
            r.precision,
            r.recall,
            r.f1,
            r.tp,
            r.fp,
            r.tn,
            r.fn_
        );
    }
    out
}

/// Image beats sensor, and fusion is no worse than sensor.
pub fn ordering_holds(reports: &[EvalReport; 3]) -> bool {
    reports[0].f1 > reports[1].f1 && reports[2].f1 >= reports[1].f1
}

/// End-to-end benchmark outcome.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub samples: usize,
    pub train: usize,
    pub test: usize,
    pub reports: [EvalReport; 3],
    pub predictions: Vec<Prediction>,
}

/// Builds the dataset, splits it, trains all heads and evaluates them.
pub fn run_benchmark(
    params: &DatasetParams,
    model: Option<&CalibrationModel>,
    head: &HeadConfig,
    seed: u64,
) -> Result<Benchmark, DetectionError> {
    let samples = build_detection_dataset(params, model, seed)?;
    let (train_idx, test_idx) = stratified_split(&samples, seed);
    let train: Vec<LabeledSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let test: Vec<LabeledSample> = test_idx.iter().map(|&i| samples[i].clone()).collect();
    let head = HeadConfig { sgd: SgdConfig { seed, ..head.sgd }, ..head.clone() };
    let detectors = train_detectors(&train, params.window, &head)?;
    let predictions = predict(&detectors, &test)?;
    let reports = reports_from_predictions(&predictions)?;
    Ok(Benchmark { samples: samples.len(), train: train.len(), test: test.len(), reports, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{indentation_field, DomeGeometry, ToolPose};
    use crate::sensors::TactileRenderer;

    fn frame(which: Preset, y: f64, z: f64, noise: f64, seed: u64) -> TactileImage {
        let p = Phantom::build(preset::<f64>(which)).unwrap();
        let patch = indentation_field(&DomeGeometry::default(), &ToolPose::at(50.0, y, z), &p, 0.25).unwrap();
        let mut rng = seeds::rng(seed, Stream::ImageNoise);
        TactileRenderer::default().render(&patch, noise, &mut rng, 0.0).unwrap()
    }

    #[test]
    fn uniform_image_has_no_gradient_energy() {
        let f = featurize_image(&TactileImage::filled(64, 64, 0.4));
        assert_eq!(f.len(), IMAGE_FEATURES);
        assert!(f[24..32].iter().all(|&e| e == 0.0));
        assert_eq!(f[32], 0.0);
    }

    #[test]
    fn feature_length_is_constant() {
        let a = featurize_image(&frame(Preset::Exp1, 60.0, -3.0, 0.005, 1));
        let b = featurize_image(&TactileImage::filled(32, 48, 0.1));
        assert_eq!(a.len(), b.len());
    }

    #[test]
    fn exp4_ridge_counts() {
        for z in [-2.6, -3.2, -3.8] {
            assert_eq!(ridge_count(&frame(Preset::Exp4, 60.0, z, 0.005, 2)), 2, "double at z {z}");
            assert_eq!(ridge_count(&frame(Preset::Exp4, 150.0, z, 0.005, 2)), 1, "single at z {z}");
        }
    }

    fn window(fz: impl Fn(usize) -> f64, n: usize) -> Vec<Wrench<f64>> {
        (0..n).map(|i| Wrench::from_array([0.1, -2.0, fz(i), 10.0, -4.0, 0.5], i as f64 / 300.0)).collect()
    }

    #[test]
    fn ft_summary_properties() {
        let c = summarize_ft(&window(|_| 25.0, 30), 25.0, 30).unwrap();
        assert_eq!(c.len(), FT_FEATURES);
        assert!(c[6..18].iter().all(|&v| v.abs() < 1e-12));
        let step = summarize_ft(&window(|i| if i < 15 { 25.0 } else { 20.0 }, 30), 25.0, 30).unwrap();
        assert!(step[12 + 2] < 0.0);
        assert_eq!(step, summarize_ft(&window(|i| if i < 15 { 25.0 } else { 20.0 }, 30), 25.0, 30).unwrap());
        assert!(matches!(
            summarize_ft(&window(|_| 1.0, 10), 1.0, 30),
            Err(DetectionError::WindowLength { expected: 30, got: 10 })
        ));
    }

    #[test]
    fn f1_arithmetic() {
        assert!((f1_score(0.64, 1.0) - 0.7805).abs() < 5e-5);
        assert_eq!(format!("{:.2}", f1_score(0.64, 1.0)), "0.78");
        assert_eq!(format!("{:.2}", f1_score(1.0, 0.97)), "0.98");
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        let r = EvalReport::from_predictions(Modality::Image, &[true, false, true], &[true, false, true]);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        assert_eq!(r.total(), 3);
    }

    #[test]
    fn fusion_is_the_mean() {
        assert!((fuse(0.9, 0.5, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(fuse(0.2, 0.8, 1.0), 0.2);
    }

    #[test]
    fn labels_follow_geometry() {
        let p = Phantom::build(preset::<f64>(Preset::Exp1)).unwrap();
        assert!(tendon_label(&p, 50.0, 50.0, 1.0));
        assert!(!tendon_label(&p, 50.0, 150.0, 1.0));
        assert_eq!(p.tendon_fraction(50.0, 150.0, 1.0), 0.0);
    }

    fn sample(tendon: bool, y: f64) -> LabeledSample {
        LabeledSample {
            image: TactileImage::filled(16, 16, 0.0),
            window: Vec::new(),
            f_bench: 25.0,
            tendon,
            preset: Preset::Exp1,
            run_seed: 0,
            y,
        }
    }

    #[test]
    fn balancing_and_split() {
        let all: Vec<_> = (0..30).map(|i| sample(i < 9, i as f64)).collect();
        let b = balance(all.clone(), 4).unwrap();
        assert_eq!(b.iter().filter(|s| s.tendon).count(), 9);
        assert_eq!(b.iter().filter(|s| !s.tendon).count(), 9);
        assert_eq!(b, balance(all, 4).unwrap());
        assert!(matches!(balance(vec![sample(true, 0.0)], 0), Err(DetectionError::SingleClass(_))));
        let (train, test) = stratified_split(&b, 1);
        assert_eq!(train.len() + test.len(), 18);
        assert_eq!(test.iter().filter(|&&i| b[i].tendon).count(), 2);
    }

    #[test]
    fn separable_image_features_give_perfect_f1() {
        let mut samples = Vec::new();
        for (k, y) in [45.0, 55.0, 65.0, 75.0, 125.0, 135.0, 145.0, 155.0].iter().enumerate() {
            for seed in 0..5u64 {
                let mut s = sample(*y < 100.0, *y);
                s.image = frame(Preset::Exp1, *y, -3.0, 0.005, seed * 10 + k as u64);
                s.window = window(|_| 25.0 + seed as f64, 30);
                samples.push(s);
            }
        }
        let (train_idx, test_idx) = stratified_split(&samples, 3);
        let train: Vec<_> = train_idx.iter().map(|&i| samples[i].clone()).collect();
        let test: Vec<_> = test_idx.iter().map(|&i| samples[i].clone()).collect();
        let det = train_detectors(&train, 30, &HeadConfig::default()).unwrap();
        let reports = evaluate(&det, &test).unwrap();
        assert_eq!(reports[0].f1, 1.0);
        let again = train_detectors(&train, 30, &HeadConfig::default()).unwrap();
        assert_eq!(again, det);
        let mut shuffled = test.clone();
        shuffled.reverse();
        let r2 = evaluate(&det, &shuffled).unwrap();
        for (a, b) in reports.iter().zip(&r2) {
            assert_eq!((a.tp, a.fp, a.tn, a.fn_), (b.tp, b.fp, b.tn, b.fn_));
        }
    }

    #[test]
    fn table_layout() {
        let r = EvalReport::from_predictions(Modality::Sensor, &[true, true, false], &[true, false, false]);
        let text = ReportTable(&[r]).to_string();
        assert!(text.contains("Sensor (MLP)"));
        assert!(text.lines().next().unwrap().contains("F1 Score"));
        assert!(reports_csv(&[r]).starts_with("modality,precision,recall,f1,tp,fp,tn,fn\nsensor,0.5,1,"));
    }
}
