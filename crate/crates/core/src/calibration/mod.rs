//! Learned map from raw F/T channels to the six-axis wrench.

pub mod mlp;

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{contact_wrench_about, indentation_field, ContactError, ContactParams, DomeGeometry, ToolPose, Wrench};
use crate::phantom::{preset, Phantom, PhantomError, Preset};
use crate::seeds::{self, Stream};
use crate::sensors::{ForceTorqueSensor, MixingModel, RawChannels, SensorError, SensorNoiseModel};
use mlp::{fit, FitHistory, Loss, Mlp, MlpError, SgdConfig};

pub const MODEL_FORMAT: &str = "palp-bench-mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration needs at least 100 points (got {0})")]
    TooFewPoints(usize),
    #[error("raw sample has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

/// Per-feature affine normalisation fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..dim)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub fn id(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Test, Split::Validation].into_iter().find(|k| k.id() == s)
    }
}

/// Kind of interaction a calibration point was sampled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    Poke,
    Slide,
    Roll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibSample {
    pub raw: Vec<f64>,
    pub label: Wrench<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibDataset {
    pub samples: Vec<CalibSample>,
    pub splits: Vec<Split>,
}

impl CalibDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    fn columns(&self, split: Split) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.indices(split)
            .into_iter()
            .map(|i| (self.samples[i].raw.clone(), self.samples[i].label.to_array().to_vec()))
            .unzip()
    }

    /// Rows `split,c0..,fx,fy,fz,tx,ty,tz`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), CalibrationError> {
        let mut wtr = csv::Writer::from_writer(out);
        let channels = self.samples.first().map_or(0, |s| s.raw.len());
        let mut header = vec!["split".to_string()];
        header.extend((0..channels).map(|i| format!("c{i}")));
        header.extend(["fx", "fy", "fz", "tx", "ty", "tz"].map(String::from));
        wtr.write_record(&header)?;
        for (s, split) in self.samples.iter().zip(&self.splits) {
            let mut rec = vec![split.id().to_string()];
            rec.extend(s.raw.iter().map(f64::to_string));
            rec.extend(s.label.to_array().iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, CalibrationError> {
        let mut rdr = csv::Reader::from_reader(input);
        let width = rdr.headers()?.len();
        if width < 8 {
            return Err(CalibrationError::Format("dataset CSV has too few columns".into()));
        }
        let mut data = Self::default();
        for rec in rdr.records() {
            let rec = rec?;
            let split = Split::parse(&rec[0]).ok_or_else(|| CalibrationError::Format(format!("bad split {:?}", &rec[0])))?;
            let nums: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| CalibrationError::Format(e.to_string())))
                .collect::<Result<_, _>>()?;
            let (raw, label) = nums.split_at(nums.len() - 6);
            let label: [f64; 6] = label.try_into().expect("six label columns");
            data.samples.push(CalibSample { raw: raw.to_vec(), label: Wrench::from_array(label, 0.0) });
            data.splits.push(split);
        }
        Ok(data)
    }
}

/// Sampling envelope of [`collect_calibration_data`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectionParams {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub max_depth: f64,
    /// Probability of a non-contact sample (zero label).
    pub no_contact: f64,
    /// Lateral offset of rolled contacts from the sensor axis (mm).
    pub roll_offset: [f64; 2],
    pub slide_speed: f64,
    pub pitch: f64,
}

impl Default for CollectionParams {
    fn default() -> Self {
        Self {
            x_range: [30.0, 70.0],
            y_range: [30.0, 170.0],
            max_depth: 4.5,
            no_contact: 0.05,
            roll_offset: [1.0, 4.0],
            slide_speed: 20.0,
            pitch: 0.25,
        }
    }
}

/// Randomised pokes, slides and rolled contacts on `phantom`, labelled with the
/// true wrench and split 70/20/10 by a seeded shuffle.
pub fn collect_calibration_data(
    phantom: &Phantom<f64>,
    sensor: &mut ForceTorqueSensor,
    n_points: usize,
    seed: u64,
    params: &CollectionParams,
) -> Result<CalibDataset, CalibrationError> {
    if n_points < 100 {
        return Err(CalibrationError::TooFewPoints(n_points));
    }
    let dome = DomeGeometry::default();
    let contact = ContactParams::default();
    let mut rng = seeds::rng(seed, Stream::CalibrationPoses);
    let mut samples = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let kind = [Interaction::Poke, Interaction::Slide, Interaction::Roll][i % 3];
        let x = rng.random_range(params.x_range[0]..params.x_range[1]);
        let y = rng.random_range(params.y_range[0]..params.y_range[1]);
        let z = if rng.random::<f64>() < params.no_contact {
            rng.random_range(0.0..1.0)
        } else {
            // sqrt spreads the Hertz-like force evenly over its range
            -params.max_depth * rng.random::<f64>().sqrt()
        };
        let mut pose = ToolPose::at(x, y, z);
        let mut pivot = [x, y];
        let heading = rng.random_range(0.0..2.0 * PI);
        match kind {
            Interaction::Poke => {}
            Interaction::Slide => pose.velocity = [params.slide_speed * heading.cos(), params.slide_speed * heading.sin()],
            Interaction::Roll => {
                let r = rng.random_range(params.roll_offset[0]..params.roll_offset[1]);
                pivot = [x - r * heading.cos(), y - r * heading.sin()];
            }
        }
        let patch = indentation_field(&dome, &pose, phantom, params.pitch)?;
        let label = contact_wrench_about(&patch, phantom, &pose, &dome, &contact, pivot);
        let raw = sensor.raw_from_wrench(&label);
        samples.push(CalibSample { raw: raw.values, label });
    }
    let splits = assign_splits(n_points, seed);
    Ok(CalibDataset { samples, splits })
}

/// 70/20/10 train/test/validation by seeded shuffle.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let n_train = (0.7 * n as f64).round() as usize;
    let n_test = ((0.2 * n as f64).floor() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed, Stream::CalibrationSplit));
    let mut splits = vec![Split::Validation; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            splits[i] = Split::Train;
        } else if rank < n_train + n_test {
            splits[i] = Split::Test;
        }
    }
    splits
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: vec![64; 4], sgd: SgdConfig::default() }
    }
}

/// Standardised network plus its normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub mlp: Mlp<f64>,
    pub input: Standardizer,
    pub output: Standardizer,
    /// Mixing seed of the sensor the model was fitted to, when known.
    pub sensor_seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    input: Standardizer,
    output: Standardizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sensor_seed: Option<u64>,
}

impl CalibrationModel {
    pub fn channels(&self) -> usize {
        self.mlp.inputs()
    }

    pub fn predict(&self, raw: &RawChannels) -> Result<Wrench<f64>, CalibrationError> {
        let mut w = self.predict_values(&raw.values)?;
        w.t = raw.t;
        Ok(w)
    }

    pub fn predict_values(&self, raw: &[f64]) -> Result<Wrench<f64>, CalibrationError> {
        if raw.len() != self.channels() {
            return Err(CalibrationError::ChannelMismatch { expected: self.channels(), got: raw.len() });
        }
        let z = self.mlp.forward(&self.input.apply(raw))?;
        let v = self.output.invert(&z);
        Ok(Wrench::from_array([v[0], v[1], v[2], v[3], v[4], v[5]], 0.0))
    }

    /// JSON layout: format tag, version, widths, row-major `out x in` weights
    /// per layer, biases, then input and output standardisation statistics.
    pub fn to_json(&self) -> Result<String, CalibrationError> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            widths: self.mlp.widths().to_vec(),
            weights: self.mlp.weights().to_vec(),
            biases: self.mlp.biases().to_vec(),
            input: self.input.clone(),
            output: self.output.clone(),
            sensor_seed: self.sensor_seed,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(CalibrationError::Format(format!("unknown format tag {:?}", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(CalibrationError::Format(format!("unsupported version {}", file.version)));
        }
        let mlp = Mlp::from_parts(file.widths, file.weights, file.biases)?;
        if file.input.mean.len() != mlp.inputs() || file.output.mean.len() != 6 || mlp.outputs() != 6 {
            return Err(CalibrationError::Format("standardisation statistics do not match the widths".into()));
        }
        Ok(Self { mlp, input: file.input, output: file.output, sensor_seed: file.sensor_seed })
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Fits standardisation on the training split and trains with MSE,
/// keeping the best-validation checkpoint.
pub fn train(data: &CalibDataset, cfg: &TrainConfig) -> Result<(CalibrationModel, FitHistory), CalibrationError> {
    let (train_x, train_y) = data.columns(Split::Train);
    if train_x.is_empty() {
        return Err(CalibrationError::EmptySplit(Split::Train));
    }
    let input = Standardizer::fit(&train_x);
    let output = Standardizer::fit(&train_y);
    let std_rows = |s: &Standardizer, rows: &[Vec<f64>]| rows.iter().map(|r| s.apply(r)).collect::<Vec<_>>();
    let tx = std_rows(&input, &train_x);
    let ty = std_rows(&output, &train_y);
    let (val_x, val_y) = data.columns(Split::Validation);
    let vx = std_rows(&input, &val_x);
    let vy = std_rows(&output, &val_y);

    let mut widths = vec![input.mean.len()];
    widths.extend(&cfg.hidden);
    widths.push(6);
    let mut mlp = Mlp::new(&widths, cfg.sgd.seed)?;
    let validation = (!vx.is_empty()).then_some((vx.as_slice(), vy.as_slice()));
    let history = fit(&mut mlp, (&tx, &ty), validation, &cfg.sgd, Loss::MeanSquared)?;
    Ok((CalibrationModel { mlp, input, output, sensor_seed: None }, history))
}

/// Held-out accuracy in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub split: Split,
    pub samples: usize,
    /// Per-component RMSE (N, N·mm).
    pub rmse: [f64; 6],
    /// RMSE pooled over Fx, Fy, Fz (N).
    pub force_rmse: f64,
    /// RMSE pooled over Tx, Ty, Tz (N·mm).
    pub torque_rmse: f64,
    /// Span of the Fz labels over the whole dataset (N).
    pub force_range: f64,
    /// Largest span of any torque component's labels (N·mm).
    pub torque_range: f64,
}

impl CalibrationReport {
    pub fn relative_force_rmse(&self) -> f64 {
        self.force_rmse / self.force_range
    }

    pub fn relative_torque_rmse(&self) -> f64 {
        self.torque_rmse / self.torque_range
    }
}

pub fn evaluate(model: &CalibrationModel, data: &CalibDataset, split: Split) -> Result<CalibrationReport, CalibrationError> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(CalibrationError::EmptySplit(split));
    }
    let mut sq = [0.0; 6];
    for &i in &idx {
        let s = &data.samples[i];
        let p = model.predict_values(&s.raw)?.to_array();
        let l = s.label.to_array();
        for c in 0..6 {
            sq[c] += (p[c] - l[c]).powi(2);
        }
    }
    let n = idx.len() as f64;
    let rmse = sq.map(|v| (v / n).sqrt());
    let span = |c: usize| {
        let (lo, hi) = data
            .samples
            .iter()
            .map(|s| s.label.to_array()[c])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        hi - lo
    };
    Ok(CalibrationReport {
        split,
        samples: idx.len(),
        rmse,
        force_rmse: ((sq[0] + sq[1] + sq[2]) / (3.0 * n)).sqrt(),
        torque_rmse: ((sq[3] + sq[4] + sq[5]) / (3.0 * n)).sqrt(),
        force_range: span(2),
        torque_range: span(3).max(span(4)).max(span(5)),
    })
}

/// Outcome of [`calibrate`].
#[derive(Debug, Clone)]
pub struct Calibration {
    pub model: CalibrationModel,
    pub data: CalibDataset,
    pub history: FitHistory,
    /// Held-out accuracy on the test split.
    pub report: CalibrationReport,
}

/// Collects `n_points` on the uniform block with the sensor built from
/// `sensor_seed` and `noise`, trains, and scores on the test split.
pub fn calibrate(
    sensor_seed: u64,
    noise: SensorNoiseModel,
    linear: bool,
    n_points: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Calibration, CalibrationError> {
    let phantom = Phantom::build(preset::<f64>(Preset::Uniform))?;
    let mut mixing = MixingModel::generate(sensor_seed)?;
    if linear {
        mixing = mixing.linear();
    }
    let mut sensor = ForceTorqueSensor::new(mixing, noise.with_seed(seeds::child(seed, 0)));
    let data = collect_calibration_data(&phantom, &mut sensor, n_points, seed, &CollectionParams::default())?;
    let (mut model, history) = train(&data, cfg)?;
    model.sensor_seed = Some(sensor_seed);
    let report = evaluate(&model, &data, Split::Test)?;
    Ok(Calibration { model, data, history, report })
}

/// Force-residual norm (N) of each sample in `split`.
pub fn force_residuals(model: &CalibrationModel, data: &CalibDataset, split: Split) -> Result<Vec<f64>, CalibrationError> {
    data.indices(split)
        .into_iter()
        .map(|i| {
            let s = &data.samples[i];
            let p = model.predict_values(&s.raw)?;
            Ok(((p.fx - s.label.fx).powi(2) + (p.fy - s.label.fy).powi(2) + (p.fz - s.label.fz).powi(2)).sqrt())
        })
        .collect()
}

/// Gradient check of `model` on standardised samples from `split`.
pub fn grad_check(
    model: &CalibrationModel,
    data: &CalibDataset,
    split: Split,
    samples: usize,
    per_layer: usize,
    seed: u64,
) -> Result<f64, CalibrationError> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(CalibrationError::EmptySplit(split));
    }
    let (xs, ys): (Vec<_>, Vec<_>) = idx
        .iter()
        .take(samples.max(1))
        .map(|&i| {
            let s = &data.samples[i];
            (model.input.apply(&s.raw), model.output.apply(&s.label.to_array()))
        })
        .unzip();
    Ok(mlp::grad_check(&model.mlp, &xs, &ys, Loss::MeanSquared, per_layer, seed)?)
}
