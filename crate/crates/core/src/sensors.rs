//! Synthetic sensor front ends: the tactile camera and the raw F/T channels.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::contact::{ContactPatch, ToolPose, Wrench};
use crate::seeds::{self, Stream};

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("tactile resolution {0}x{1} is below the 16x16 minimum")]
    Resolution(usize, usize),
    #[error("mixing matrix is rank deficient (condition number {0:.3e})")]
    RankDeficient(f64),
    #[error("trajectory timestamps not increasing at index {0}")]
    NonMonotonic(usize),
    #[error("sample rate must be positive (got {0})")]
    Rate(f64),
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Number of raw channels of the simulated F/T front end.
pub const CHANNELS: usize = 12;
/// Raw-channel sample rate (Hz).
pub const RAW_RATE: f64 = 300.0;
/// Default tactile frame rate (Hz).
pub const FRAME_RATE: f64 = 30.0;

/// Grayscale tactile frame, row-major, intensities in `[0, 1]`.
///
/// Row index grows with `y` (the sweep direction), column index with `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub t: f64,
}

impl TactileImage {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, pixels: vec![value; width * height], t: 0.0 }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Binary portable graymap (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, SensorError> {
        let bad = |m: &str| SensorError::Pgm(m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("magic is not P5"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != w * h {
            return Err(bad("pixel count does not match header"));
        }
        Ok(Self { width: w, height: h, pixels: data.iter().map(|&b| b as f32 / 255.0).collect(), t: 0.0 })
    }
}

/// Uncalibrated F/T channel vector (ADC-like units).
#[derive(Debug, Clone, PartialEq)]
pub struct RawChannels {
    pub values: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoiseModel {
    pub image_noise_sd: f64,
    /// Gaussian channel noise (raw units).
    pub channel_noise_sd: f64,
    /// Slow offset drift (raw units per second) along a fixed channel direction.
    pub drift_rate: f64,
    /// Moment magnitude (N·mm) beyond which the front end soft-clips.
    pub saturation_moment: f64,
    pub seed: u64,
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        Self { image_noise_sd: 0.005, channel_noise_sd: 1.0, drift_rate: 0.5, saturation_moment: 500.0, seed: 0 }
    }
}

impl SensorNoiseModel {
    /// Noise and drift disabled; saturation kept.
    pub fn noiseless() -> Self {
        Self { image_noise_sd: 0.0, channel_noise_sd: 0.0, drift_rate: 0.0, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Smooth saturation: identity up to `limit`, then `limit (1 + tanh((|v| - limit) / limit))`.
pub fn soft_clip(v: f64, limit: f64) -> f64 {
    let a = v.abs();
    if a <= limit {
        v
    } else {
        v.signum() * limit * (1.0 + ((a - limit) / limit).tanh())
    }
}

/// Ground-truth wrench-to-channel map of one simulated sensor:
/// `c = M w + q(w / scale) + offsets`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingModel {
    /// Effective `C x 6` matrix acting on the physical wrench.
    matrix: Vec<[f64; 6]>,
    /// Per-channel quadratic coefficients on the normalised wrench (upper triangle used).
    quadratic: Vec<[[f64; 6]; 6]>,
    offsets: Vec<f64>,
    drift_direction: Vec<f64>,
    pub seed: u64,
}

/// Normalisation of wrench components before mixing: 50 N, 500 N·mm.
pub const WRENCH_SCALE: [f64; 6] = [50.0, 50.0, 50.0, 500.0, 500.0, 500.0];
const CHANNEL_GAIN: f64 = 1000.0;

impl MixingModel {
    /// Seeded random full-rank mixing with a mild quadratic cross-term.
    pub fn generate(seed: u64) -> Result<Self, SensorError> {
        let mut rng = seeds::rng(seed, Stream::Mixing);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let matrix: Vec<[f64; 6]> = (0..CHANNELS)
            .map(|_| {
                let mut row = [0.0; 6];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = CHANNEL_GAIN * normal.sample(&mut rng) / WRENCH_SCALE[j];
                }
                row
            })
            .collect();
        let quadratic = (0..CHANNELS)
            .map(|_| {
                let mut q = [[0.0; 6]; 6];
                for (j, row) in q.iter_mut().enumerate() {
                    for v in &mut row[j..] {
                        *v = CHANNEL_GAIN * 0.02 * normal.sample(&mut rng);
                    }
                }
                q
            })
            .collect();
        let offsets = (0..CHANNELS).map(|_| rng.random_range(-2000.0..2000.0)).collect();
        let mut drift_direction: Vec<f64> = (0..CHANNELS).map(|_| normal.sample(&mut rng)).collect();
        let norm = drift_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        drift_direction.iter_mut().for_each(|v| *v /= norm);
        let model = Self { matrix, quadratic, offsets, drift_direction, seed };
        model.check_rank()?;
        Ok(model)
    }

    /// Same sensor with the quadratic term removed.
    pub fn linear(mut self) -> Self {
        self.quadratic.iter_mut().for_each(|q| *q = [[0.0; 6]; 6]);
        self
    }

    fn check_rank(&self) -> Result<(), SensorError> {
        let m = DMatrix::from_fn(CHANNELS, 6, |i, j| self.matrix[i][j] * WRENCH_SCALE[j]);
        let sv = m.singular_values();
        let (min, max) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        let cond = max / min;
        if !(cond.is_finite() && cond < 1e6) {
            return Err(SensorError::RankDeficient(cond));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.matrix.len()
    }

    pub fn matrix(&self) -> &[[f64; 6]] {
        &self.matrix
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn has_quadratic(&self) -> bool {
        self.quadratic.iter().any(|q| q.iter().flatten().any(|&v| v != 0.0))
    }

    /// Noise-free channels for an already saturated wrench.
    pub fn apply(&self, w: &[f64; 6]) -> Vec<f64> {
        let mut u = [0.0; 6];
        for j in 0..6 {
            u[j] = w[j] / WRENCH_SCALE[j];
        }
        self.matrix
            .iter()
            .zip(&self.quadratic)
            .zip(&self.offsets)
            .map(|((row, q), off)| {
                let mut c = *off;
                for j in 0..6 {
                    c += row[j] * w[j];
                }
                for j in 0..6 {
                    for k in j..6 {
                        c += q[j][k] * u[j] * u[k];
                    }
                }
                c
            })
            .collect()
    }
}

/// Orthographic rendering of the dome's gel compression.
///
/// Gel compression is taken proportional to the local contact pressure, so
/// stiff inclusions show as bright ridges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TactileRenderer {
    pub width: usize,
    pub height: usize,
    /// Side of the square field of view on the dome (mm).
    pub field_of_view: f64,
    /// Pressure mapped to normalised compression 1 (Pa).
    pub reference_pressure: f64,
    /// Unloaded gel brightness, `g(0)`.
    pub background: f64,
    /// Relative brightness loss at the field edge midpoints.
    pub vignette: f64,
}

impl Default for TactileRenderer {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            field_of_view: 32.0,
            reference_pressure: 2.0e5,
            background: 0.25,
            vignette: 0.2,
        }
    }
}

impl TactileRenderer {
    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    /// Fixed monotone response of the gel.
    #[inline]
    pub fn response(&self, compression: f64) -> f64 {
        self.background + (1.0 - self.background) * (1.0 - (-compression).exp())
    }

    #[inline]
    fn vignette_at(&self, dx: f64, dy: f64) -> f64 {
        let half = 0.5 * self.field_of_view;
        1.0 - self.vignette * (dx * dx + dy * dy) / (half * half)
    }

    fn pixel_offset(&self, idx: usize, n: usize) -> f64 {
        let step = self.field_of_view / n as f64;
        -0.5 * self.field_of_view + (idx as f64 + 0.5) * step
    }

    /// Renders `patch`; `noise_sd` Gaussian pixel noise drawn from `rng`.
    pub fn render(
        &self,
        patch: &ContactPatch<f64>,
        noise_sd: f64,
        rng: &mut ChaCha8Rng,
        t: f64,
    ) -> Result<TactileImage, SensorError> {
        if self.width < 16 || self.height < 16 {
            return Err(SensorError::Resolution(self.width, self.height));
        }
        let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("finite sd"));
        let mut pixels = Vec::with_capacity(self.width * self.height);
        for row in 0..self.height {
            let dy = self.pixel_offset(row, self.height);
            for col in 0..self.width {
                let dx = self.pixel_offset(col, self.width);
                let pressure = nearest_pressure(patch, dx, dy);
                let mut v = self.response(pressure / self.reference_pressure) * self.vignette_at(dx, dy);
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        Ok(TactileImage { width: self.width, height: self.height, pixels, t })
    }

    /// The unloaded image `g(0) * vignette`.
    pub fn background_image(&self) -> TactileImage {
        let mut img = TactileImage::filled(self.width, self.height, 0.0);
        for row in 0..self.height {
            for col in 0..self.width {
                let v = self.response(0.0) * self.vignette_at(self.pixel_offset(col, self.width), self.pixel_offset(row, self.height));
                img.pixels[row * self.width + col] = v as f32;
            }
        }
        img
    }
}

fn nearest_pressure(patch: &ContactPatch<f64>, dx: f64, dy: f64) -> f64 {
    if patch.samples.is_empty() {
        return 0.0;
    }
    let i = (dx / patch.pitch).round() as i64;
    let j = (dy / patch.pitch).round() as i64;
    patch.at_offset(i, j).map_or(0.0, |s| s.pressure)
}

/// One simulated sensor: fixed mixing plus seeded noise generators.
#[derive(Debug, Clone)]
pub struct ForceTorqueSensor {
    mixing: MixingModel,
    noise: SensorNoiseModel,
    channel_rng: ChaCha8Rng,
    image_rng: ChaCha8Rng,
}

impl ForceTorqueSensor {
    pub fn new(mixing: MixingModel, noise: SensorNoiseModel) -> Self {
        Self {
            channel_rng: seeds::rng(noise.seed, Stream::ChannelNoise),
            image_rng: seeds::rng(noise.seed, Stream::ImageNoise),
            mixing,
            noise,
        }
    }

    pub fn mixing(&self) -> &MixingModel {
        &self.mixing
    }

    pub fn noise(&self) -> &SensorNoiseModel {
        &self.noise
    }

    /// Applies moment saturation to a wrench.
    pub fn saturate(&self, w: &Wrench<f64>) -> [f64; 6] {
        let mut v = w.to_array();
        for m in &mut v[3..] {
            *m = soft_clip(*m, self.noise.saturation_moment);
        }
        v
    }

    /// `channels = M w' + q(w') + offsets + drift(t) + noise`, `w'` the saturated wrench.
    pub fn raw_from_wrench(&mut self, w: &Wrench<f64>) -> RawChannels {
        let mut values = self.mixing.apply(&self.saturate(w));
        let drift = self.noise.drift_rate * w.t;
        if drift != 0.0 {
            for (v, d) in values.iter_mut().zip(&self.mixing.drift_direction) {
                *v += drift * d;
            }
        }
        if self.noise.channel_noise_sd > 0.0 {
            let n = Normal::new(0.0, self.noise.channel_noise_sd).expect("finite sd");
            for v in &mut values {
                *v += n.sample(&mut self.channel_rng);
            }
        }
        RawChannels { values, t: w.t }
    }

    pub fn render(
        &mut self,
        renderer: &TactileRenderer,
        patch: &ContactPatch<f64>,
        t: f64,
    ) -> Result<TactileImage, SensorError> {
        renderer.render(patch, self.noise.image_noise_sd, &mut self.image_rng, t)
    }
}

/// Output of [`stream`].
#[derive(Debug, Clone, Default)]
pub struct SensorStream {
    pub raw: Vec<RawChannels>,
    pub frames: Vec<TactileImage>,
}

/// Resamples a control trajectory into raw channels at `rate` Hz (inclusive
/// endpoints, linear wrench interpolation) and tactile frames at `frame_rate` Hz.
pub fn stream(
    sensor: &mut ForceTorqueSensor,
    trajectory: &[(ToolPose<f64>, Wrench<f64>)],
    rate: f64,
    frame_rate: f64,
    mut render: impl FnMut(&mut ForceTorqueSensor, &ToolPose<f64>) -> Result<TactileImage, SensorError>,
) -> Result<SensorStream, SensorError> {
    if !(rate > 0.0) {
        return Err(SensorError::Rate(rate));
    }
    if !(frame_rate > 0.0) {
        return Err(SensorError::Rate(frame_rate));
    }
    if let Some(i) = trajectory.windows(2).position(|w| !(w[1].0.t > w[0].0.t)) {
        return Err(SensorError::NonMonotonic(i + 1));
    }
    let mut out = SensorStream::default();
    let (Some(first), Some(last)) = (trajectory.first(), trajectory.last()) else {
        return Ok(out);
    };
    let (t0, t1) = (first.0.t, last.0.t);
    let samples_at = |r: f64| ((t1 - t0) * r + 1e-9).floor() as usize + 1;

    let mut seg = 0;
    let mut locate = |t: f64| {
        while seg + 1 < trajectory.len() - 1 && trajectory[seg + 1].0.t <= t {
            seg += 1;
        }
        seg
    };
    let interp = |seg: usize, t: f64| -> (ToolPose<f64>, Wrench<f64>) {
        if trajectory.len() == 1 {
            return trajectory[0];
        }
        let (pa, wa) = &trajectory[seg];
        let (pb, wb) = &trajectory[seg + 1];
        let s = ((t - pa.t) / (pb.t - pa.t)).clamp(0.0, 1.0);
        let mut w = wa.lerp(wb, s);
        w.t = t;
        let pose = ToolPose {
            x: pa.x + (pb.x - pa.x) * s,
            y: pa.y + (pb.y - pa.y) * s,
            z: pa.z + (pb.z - pa.z) * s,
            velocity: pa.velocity,
            t,
        };
        (pose, w)
    };

    for k in 0..samples_at(rate) {
        let t = t0 + k as f64 / rate;
        let (_, w) = interp(locate(t), t);
        out.raw.push(sensor.raw_from_wrench(&w));
    }
    seg = 0;
    let mut locate = |t: f64| {
        while seg + 1 < trajectory.len() - 1 && trajectory[seg + 1].0.t <= t {
            seg += 1;
        }
        seg
    };
    for k in 0..samples_at(frame_rate) {
        let t = t0 + k as f64 / frame_rate;
        let (pose, _) = interp(locate(t), t);
        let mut frame = render(sensor, &pose)?;
        frame.t = t;
        out.frames.push(frame);
    }
    Ok(out)
}

/// Writes `t,c0..c{C-1}` rows.
pub fn write_raw_csv<W: std::io::Write>(out: W, raw: &[RawChannels]) -> Result<(), SensorError> {
    let mut wtr = csv::Writer::from_writer(out);
    let width = raw.first().map_or(CHANNELS, |r| r.values.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..width).map(|i| format!("c{i}")));
    wtr.write_record(&header)?;
    for r in raw {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{indentation_field, DomeGeometry};
    use crate::phantom::{preset, Phantom, PhantomSpec, Preset};

    fn sensor(noise: SensorNoiseModel) -> ForceTorqueSensor {
        ForceTorqueSensor::new(MixingModel::generate(7).unwrap(), noise)
    }

    #[test]
    fn zero_wrench_gives_offsets() {
        let mut s = sensor(SensorNoiseModel::noiseless());
        let raw = s.raw_from_wrench(&Wrench::zero());
        assert_eq!(raw.values, s.mixing().offsets());
        assert_eq!(raw.values.len(), CHANNELS);
    }

    #[test]
    fn linear_regime_difference_is_matrix_times_delta() {
        let mixing = MixingModel::generate(3).unwrap().linear();
        assert!(!mixing.has_quadratic());
        let mut s = ForceTorqueSensor::new(mixing, SensorNoiseModel::noiseless());
        let a = Wrench::from_array([1.0, -2.0, 20.0, 30.0, -40.0, 100.0], 0.0);
        let b = Wrench::from_array([1.0, -2.0, 20.0, 30.0, -40.0, 250.0], 0.0);
        let ra = s.raw_from_wrench(&a);
        let rb = s.raw_from_wrench(&b);
        for (i, row) in s.mixing().matrix().iter().enumerate() {
            let expected = row[5] * 150.0;
            assert!((rb.values[i] - ra.values[i] - expected).abs() < 1e-9 * (1.0 + expected.abs()));
        }
    }

    #[test]
    fn soft_clip_is_continuous_and_bounded() {
        assert_eq!(soft_clip(400.0, 500.0), 400.0);
        assert_eq!(soft_clip(-500.0, 500.0), -500.0);
        assert!((soft_clip(500.0 + 1e-9, 500.0) - 500.0).abs() < 1e-8);
        assert!(soft_clip(1e6, 500.0) <= 1000.0);
        assert!(soft_clip(1000.0, 500.0) < 1000.0);
    }

    #[test]
    fn mixing_is_seeded_and_full_rank() {
        let a = MixingModel::generate(11).unwrap();
        assert_eq!(a, MixingModel::generate(11).unwrap());
        assert_ne!(a, MixingModel::generate(12).unwrap());
        assert!(a.has_quadratic());
    }

    #[test]
    fn empty_patch_renders_background() {
        let renderer = TactileRenderer::default();
        let mut s = sensor(SensorNoiseModel::default());
        let img = s.render(&renderer, &ContactPatch::empty([0.0, 0.0], 0.25), 0.0).unwrap();
        let bg = renderer.background_image();
        let n = (img.width * img.height) as f64;
        let sd = s.noise().image_noise_sd;
        assert!((img.mean() - bg.mean()).abs() <= 3.0 * sd / n.sqrt());

        let mut quiet = sensor(SensorNoiseModel::noiseless());
        let img = quiet.render(&renderer, &ContactPatch::empty([0.0, 0.0], 0.25), 0.0).unwrap();
        assert_eq!(img.pixels, bg.pixels);
    }

    #[test]
    fn small_resolution_rejected() {
        let renderer = TactileRenderer::default().with_resolution(8, 64);
        let mut s = sensor(SensorNoiseModel::noiseless());
        assert!(matches!(
            s.render(&renderer, &ContactPatch::empty([0.0, 0.0], 0.25), 0.0),
            Err(SensorError::Resolution(8, 64))
        ));
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        let p = Phantom::build(preset::<f64>(Preset::Exp4)).unwrap();
        let patch = indentation_field(&DomeGeometry::default(), &ToolPose::at(50.0, 60.0, -3.0), &p, 0.25).unwrap();
        let renderer = TactileRenderer::default();
        let a = sensor(SensorNoiseModel::default()).render(&renderer, &patch, 0.0).unwrap();
        let b = sensor(SensorNoiseModel::default()).render(&renderer, &patch, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_intensity_grows_with_depth() {
        let p = Phantom::build(preset::<f64>(Preset::Exp1)).unwrap();
        let renderer = TactileRenderer::default();
        let mut s = sensor(SensorNoiseModel::noiseless());
        let mut prev = -1.0;
        for i in 0..25 {
            let z = -0.1 - 0.19 * i as f64;
            let patch = indentation_field(&DomeGeometry::default(), &ToolPose::at(50.0, 60.0, z), &p, 0.25).unwrap();
            let m = s.render(&renderer, &patch, 0.0).unwrap().mean();
            assert!(m > prev, "depth {z}: {m} <= {prev}");
            prev = m;
        }
    }

    /// Local maxima of the column profile averaged over the central rows.
    fn profile_maxima(img: &TactileImage) -> usize {
        let rows = img.height / 3..2 * img.height / 3;
        let prof: Vec<f64> = (0..img.width)
            .map(|c| rows.clone().map(|r| img.get(c, r) as f64).sum::<f64>())
            .collect();
        (1..prof.len() - 1).filter(|&i| prof[i] > prof[i - 1] && prof[i] >= prof[i + 1]).count()
    }

    #[test]
    fn exp4_double_and_single_ridge_profiles() {
        let p = Phantom::build(preset::<f64>(Preset::Exp4)).unwrap();
        let renderer = TactileRenderer::default();
        let mut s = sensor(SensorNoiseModel::noiseless());
        let dome = DomeGeometry::default();
        let two = indentation_field(&dome, &ToolPose::at(50.0, 60.0, -3.2), &p, 0.25).unwrap();
        let one = indentation_field(&dome, &ToolPose::at(50.0, 150.0, -3.2), &p, 0.25).unwrap();
        assert_eq!(profile_maxima(&s.render(&renderer, &two, 0.0).unwrap()), 2);
        assert_eq!(profile_maxima(&s.render(&renderer, &one, 0.0).unwrap()), 1);
    }

    #[test]
    fn pgm_round_trip() {
        let p = Phantom::build(PhantomSpec::<f64>::block()).unwrap();
        let patch = indentation_field(&DomeGeometry::default(), &ToolPose::at(50.0, 60.0, -3.0), &p, 0.25).unwrap();
        let img = sensor(SensorNoiseModel::noiseless()).render(&TactileRenderer::default(), &patch, 0.0).unwrap();
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(bytes.len(), 13 + 64 * 64);
        let back = TactileImage::from_pgm(&bytes).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(TactileImage::from_pgm(b"P2\n1 1\n255\n\0").is_err());
    }

    fn ramp(n: usize, dt: f64) -> Vec<(ToolPose<f64>, Wrench<f64>)> {
        (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                let mut pose = ToolPose::at(50.0, 60.0, -1.0);
                pose.t = t;
                (pose, Wrench::from_array([0.0, 0.0, 10.0 * t, 0.0, 0.0, 0.0], t))
            })
            .collect()
    }

    fn blank(_: &mut ForceTorqueSensor, _: &ToolPose<f64>) -> Result<TactileImage, SensorError> {
        Ok(TactileImage::filled(16, 16, 0.0))
    }

    #[test]
    fn stream_counts_are_inclusive() {
        let mut s = sensor(SensorNoiseModel::noiseless());
        let out = stream(&mut s, &ramp(301, 1.0 / 300.0), RAW_RATE, FRAME_RATE, blank).unwrap();
        assert_eq!(out.raw.len(), 301);
        assert_eq!(out.frames.len(), 31);
        // coarser control ticks still give 301 samples
        let out = stream(&mut s, &ramp(11, 0.1), RAW_RATE, FRAME_RATE, blank).unwrap();
        assert_eq!(out.raw.len(), 301);
    }

    #[test]
    fn stream_interpolates_linearly() {
        let mixing = MixingModel::generate(5).unwrap().linear();
        let mut s = ForceTorqueSensor::new(mixing.clone(), SensorNoiseModel::noiseless());
        // control ticks at 150 Hz: every other raw sample is a midpoint
        let out = stream(&mut s, &ramp(151, 1.0 / 150.0), RAW_RATE, FRAME_RATE, blank).unwrap();
        for k in (1..out.raw.len() - 1).step_by(2) {
            for c in 0..CHANNELS {
                let mid = 0.5 * (out.raw[k - 1].values[c] + out.raw[k + 1].values[c]);
                assert!((out.raw[k].values[c] - mid).abs() < 1e-9 * (1.0 + mid.abs()));
            }
        }
    }

    #[test]
    fn constant_wrench_gives_constant_channels() {
        let mut s = sensor(SensorNoiseModel { drift_rate: 0.0, ..SensorNoiseModel::default() });
        let traj: Vec<_> = ramp(301, 1.0 / 300.0)
            .into_iter()
            .map(|(p, mut w)| {
                w.fz = 12.0;
                (p, w)
            })
            .collect();
        let out = stream(&mut s, &traj, RAW_RATE, FRAME_RATE, blank).unwrap();
        let sd = s.noise().channel_noise_sd;
        for r in &out.raw {
            for (a, b) in r.values.iter().zip(&out.raw[0].values) {
                assert!((a - b).abs() < 10.0 * sd);
            }
        }
    }

    #[test]
    fn stream_rejects_non_monotonic_time() {
        let mut traj = ramp(5, 0.01);
        traj[3].0.t = traj[1].0.t;
        let mut s = sensor(SensorNoiseModel::noiseless());
        assert!(matches!(stream(&mut s, &traj, RAW_RATE, FRAME_RATE, blank), Err(SensorError::NonMonotonic(3))));
    }

    #[test]
    fn raw_csv_layout() {
        let mut s = sensor(SensorNoiseModel::noiseless());
        let raw = vec![s.raw_from_wrench(&Wrench::zero())];
        let mut buf = Vec::new();
        write_raw_csv(&mut buf, &raw).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,c0,c1,c2,c3,c4,c5,c6,c7,c8,c9,c10,c11\n"));
    }
}
