//! Five-step palpation protocol and admittance-style force tracking.
//!
//! The loop runs at a fixed control tick. Every tick evaluates the contact,
//! streams one raw-channel sample through the sensor and records the truth and
//! the measured wrench. Tactile frames are rendered every `frame_every` ticks.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, CalibrationModel};
use crate::contact::{contact_wrench, indentation_field, ContactError, ContactParams, DomeGeometry, ToolPose, Wrench};
use crate::metrics::ForceTrace;
use crate::phantom::Phantom;
use crate::sensors::{ForceTorqueSensor, SensorError, TactileImage, TactileRenderer};

/// Protocol step. Numbers match the labels used in exports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StepLabel {
    Descend = 1,
    Dwell = 2,
    Plough = 3,
    Hold = 4,
    Retract = 5,
}

impl StepLabel {
    pub const ALL: [StepLabel; 5] = [Self::Descend, Self::Dwell, Self::Plough, Self::Hold, Self::Retract];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Self> {
        Self::ALL.get((n as usize).checked_sub(1)?).copied()
    }
}

impl fmt::Display for StepLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl FromStr for StepLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse::<u8>().ok().and_then(Self::from_number).ok_or_else(|| format!("invalid step label {s:?}"))
    }
}

/// True when labels start at step 1 and only ever advance by one.
pub fn valid_step_sequence(steps: &[StepLabel]) -> bool {
    match steps.first() {
        None => true,
        Some(&first) if first != StepLabel::Descend => false,
        Some(_) => steps.windows(2).all(|w| {
            let (a, b) = (w[0].number(), w[1].number());
            b == a || b == a + 1
        }),
    }
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid protocol config: {0}")]
    Config(String),
    #[error("target force unreachable: reached {max_force:.3} N at the {depth:.3} mm indentation limit")]
    ForceUnreachable { max_force: f64, depth: f64 },
    #[error("force {force:.2} N exceeded the {limit:.2} N instability limit at t = {t:.3} s")]
    Unstable { force: f64, limit: f64, t: f64, partial: Box<ProtocolTrace> },
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Normal force that ends the descent (N).
    pub target_force: f64,
    /// Each hold phase (s).
    pub dwell: f64,
    /// Sweep length along +Y (mm).
    pub travel: f64,
    pub descent_speed: f64,
    pub sweep_speed: f64,
    pub retract_speed: f64,
    /// Control period (s).
    pub tick: f64,
    /// Dome axis at the start of the run (mm).
    pub start: [f64; 2],
    /// Start and retract height above the surface (mm).
    pub start_height: f64,
    /// Contact grid pitch (mm).
    pub pitch: f64,
    /// Render a tactile frame every this many ticks.
    pub frame_every: usize,
    /// Fraction of the dome's maximum indentation the descent may use.
    pub depth_limit_fraction: f64,
}

/// Target forces of the bench protocol.
pub const FORCE_LEVELS: [f64; 3] = [25.0, 35.0, 45.0];

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            target_force: 25.0,
            dwell: 1.0,
            travel: 120.0,
            descent_speed: 2.0,
            sweep_speed: 20.0,
            retract_speed: 5.0,
            tick: 1.0 / 300.0,
            start: [50.0, 40.0],
            start_height: 1.0,
            pitch: 0.25,
            frame_every: 10,
            depth_limit_fraction: 0.98,
        }
    }
}

impl ProtocolConfig {
    pub fn with_force(mut self, force: f64) -> Self {
        self.target_force = force;
        self
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = [
            ("target_force", self.target_force),
            ("dwell", self.dwell),
            ("travel", self.travel),
            ("descent_speed", self.descent_speed),
            ("sweep_speed", self.sweep_speed),
            ("retract_speed", self.retract_speed),
            ("tick", self.tick),
            ("pitch", self.pitch),
            ("depth_limit_fraction", self.depth_limit_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ControlError::Config(format!("{name} must be positive and finite (got {v})")));
            }
        }
        if self.start_height <= 0.0 {
            return Err(ControlError::Config("start_height must be above the surface".into()));
        }
        if self.frame_every == 0 {
            return Err(ControlError::Config("frame_every must be at least 1".into()));
        }
        if self.depth_limit_fraction > 1.0 {
            return Err(ControlError::Config("depth_limit_fraction must not exceed 1".into()));
        }
        Ok(())
    }

    pub fn dwell_ticks(&self) -> usize {
        (self.dwell / self.tick).round() as usize
    }

    pub fn sweep_ticks(&self) -> usize {
        ((self.travel / self.sweep_speed) / self.tick).round().max(1.0) as usize
    }

    /// Frame rate implied by the tick and `frame_every` (Hz).
    pub fn frame_rate(&self) -> f64 {
        1.0 / (self.tick * self.frame_every as f64)
    }
}

/// Admittance gains: `dz = (F - target + I * int(F - target) - D * zdot) / K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceParams {
    /// N per mm. Zero disables the correction entirely.
    pub stiffness: f64,
    /// N·s per mm.
    pub damping: f64,
    /// Integral gain (1/s).
    pub integral: f64,
}

impl Default for ImpedanceParams {
    fn default() -> Self {
        Self { stiffness: 100.0, damping: 0.05, integral: 0.0 }
    }
}

impl ImpedanceParams {
    pub fn zero() -> Self {
        Self { stiffness: 0.0, damping: 0.0, integral: 0.0 }
    }
}

/// One control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub pose: ToolPose<f64>,
    pub truth: Wrench<f64>,
    pub measured: Wrench<f64>,
    pub raw: Vec<f64>,
    /// Most recent tactile frame.
    pub frame: usize,
    pub step: StepLabel,
}

impl TraceRow {
    pub fn t(&self) -> f64 {
        self.pose.t
    }
}

/// Which wrench column a force trace is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceSource {
    Truth,
    Measured,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProtocolTrace {
    pub tick: f64,
    pub rows: Vec<TraceRow>,
    pub frames: Vec<TactileImage>,
}

impl ProtocolTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn steps(&self) -> Vec<StepLabel> {
        self.rows.iter().map(|r| r.step).collect()
    }

    /// Row indices carrying `step` (contiguous in a valid trace).
    pub fn step_range(&self, step: StepLabel) -> Range<usize> {
        let start = self.rows.iter().position(|r| r.step == step).unwrap_or(self.rows.len());
        let end = self.rows[start..].iter().position(|r| r.step != step).map_or(self.rows.len(), |n| start + n);
        start..end
    }

    /// Time from the last tick before `step` to its last tick (s).
    pub fn step_duration(&self, step: StepLabel) -> Option<f64> {
        let r = self.step_range(step);
        if r.is_empty() || r.start == 0 {
            return None;
        }
        Some(self.rows[r.end - 1].t() - self.rows[r.start - 1].t())
    }

    pub fn force_trace(&self, source: ForceSource) -> ForceTrace<f64> {
        let fz = self
            .rows
            .iter()
            .map(|r| match source {
                ForceSource::Truth => r.truth.fz,
                ForceSource::Measured => r.measured.fz,
            })
            .collect();
        ForceTrace { t: self.rows.iter().map(TraceRow::t).collect(), fz, steps: self.steps() }
    }

    /// Duration covered by the rows (s).
    pub fn duration(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.t() - a.t(),
            _ => 0.0,
        }
    }
}

/// Everything one run needs besides its configuration.
#[derive(Debug, Clone)]
pub struct Rig<'a> {
    pub phantom: &'a Phantom<f64>,
    pub dome: DomeGeometry<f64>,
    pub contact: ContactParams<f64>,
    pub renderer: TactileRenderer,
    pub sensor: ForceTorqueSensor,
    /// Without a model the measured wrench equals the truth.
    pub model: Option<&'a CalibrationModel>,
}

impl<'a> Rig<'a> {
    pub fn new(phantom: &'a Phantom<f64>, sensor: ForceTorqueSensor) -> Self {
        Self {
            phantom,
            dome: DomeGeometry::default(),
            contact: ContactParams::default(),
            renderer: TactileRenderer::default(),
            sensor,
            model: None,
        }
    }

    pub fn with_model(mut self, model: &'a CalibrationModel) -> Self {
        self.model = Some(model);
        self
    }
}

struct Recorder<'r, 'a> {
    rig: &'r mut Rig<'a>,
    cfg: ProtocolConfig,
    trace: ProtocolTrace,
}

impl<'r, 'a> Recorder<'r, 'a> {
    fn new(rig: &'r mut Rig<'a>, cfg: ProtocolConfig) -> Self {
        Self { rig, cfg, trace: ProtocolTrace { tick: cfg.tick, ..Default::default() } }
    }

    fn record(&mut self, mut pose: ToolPose<f64>, step: StepLabel) -> Result<&TraceRow, ControlError> {
        let k = self.trace.rows.len();
        pose.t = k as f64 * self.cfg.tick;
        let rig = &mut *self.rig;
        let patch = indentation_field(&rig.dome, &pose, rig.phantom, self.cfg.pitch)?;
        let truth = contact_wrench(&patch, rig.phantom, &pose, &rig.dome, &rig.contact);
        let raw = rig.sensor.raw_from_wrench(&truth);
        let measured = match rig.model {
            Some(m) => m.predict(&raw)?,
            None => truth,
        };
        if k.is_multiple_of(self.cfg.frame_every) {
            let frame = rig.sensor.render(&rig.renderer, &patch, pose.t)?;
            self.trace.frames.push(frame);
        }
        self.trace.rows.push(TraceRow {
            pose,
            truth,
            measured,
            raw: raw.values,
            frame: self.trace.frames.len() - 1,
            step,
        });
        Ok(self.trace.rows.last().expect("row just pushed"))
    }

    /// Step 1. Returns the trigger height.
    fn descend(&mut self) -> Result<f64, ControlError> {
        let [x, y] = self.cfg.start;
        let limit = self.cfg.depth_limit_fraction * self.rig.dome.max_indentation();
        let mut z = self.cfg.start_height;
        let mut max_force: f64 = 0.0;
        loop {
            let target = self.cfg.target_force;
            let row = self.record(ToolPose::at(x, y, z), StepLabel::Descend)?;
            if row.measured.fz.abs() >= target {
                return Ok(z);
            }
            max_force = max_force.max(row.truth.fz);
            z -= self.cfg.descent_speed * self.cfg.tick;
            if -z > limit {
                return Err(ControlError::ForceUnreachable { max_force, depth: limit });
            }
        }
    }

    fn retract(&mut self, x: f64, y: f64, mut z: f64) -> Result<(), ControlError> {
        while z < self.cfg.start_height {
            z = (z + self.cfg.retract_speed * self.cfg.tick).min(self.cfg.start_height);
            self.record(ToolPose::at(x, y, z), StepLabel::Retract)?;
        }
        Ok(())
    }

    fn sweep_pose(&self, i: usize, n: usize, z: f64) -> ToolPose<f64> {
        let [x, y0] = self.cfg.start;
        let mut pose = ToolPose::at(x, y0 + self.cfg.travel * i as f64 / n as f64, z);
        pose.velocity = [0.0, self.cfg.sweep_speed];
        pose
    }
}

/// Position-controlled protocol: descend to the force target, hold, sweep
/// `travel` along +Y at constant height, hold, retract.
pub fn run_protocol(rig: &mut Rig<'_>, cfg: &ProtocolConfig) -> Result<ProtocolTrace, ControlError> {
    cfg.validate()?;
    let mut rec = Recorder::new(rig, *cfg);
    let z = rec.descend()?;
    let [x, y0] = cfg.start;
    for _ in 0..cfg.dwell_ticks() {
        rec.record(ToolPose::at(x, y0, z), StepLabel::Dwell)?;
    }
    let n = cfg.sweep_ticks();
    for i in 1..=n {
        let pose = rec.sweep_pose(i, n, z);
        rec.record(pose, StepLabel::Plough)?;
    }
    let y1 = y0 + cfg.travel;
    for _ in 0..cfg.dwell_ticks() {
        rec.record(ToolPose::at(x, y1, z), StepLabel::Hold)?;
    }
    rec.retract(x, y1, z)?;
    Ok(rec.trace)
}

/// Closed-loop variant: after the descent, steps 2 to 4 adjust `z` every tick
/// from the measured force. The instability guard watches the true force.
pub fn impedance_force_track(
    rig: &mut Rig<'_>,
    cfg: &ProtocolConfig,
    gains: &ImpedanceParams,
) -> Result<ProtocolTrace, ControlError> {
    cfg.validate()?;
    if [gains.stiffness, gains.damping, gains.integral].iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(ControlError::Config("impedance gains must be non-negative and finite".into()));
    }
    let target = cfg.target_force;
    let abort_at = 3.0 * target;
    let limit = cfg.depth_limit_fraction * rig.dome.max_indentation();
    let mut rec = Recorder::new(rig, *cfg);
    let mut z = rec.descend()?;
    let mut z_prev = z;
    let mut integral = 0.0;
    let [x, y0] = cfg.start;
    let n_dwell = cfg.dwell_ticks();
    let n_sweep = cfg.sweep_ticks();

    let phases = [(StepLabel::Dwell, n_dwell), (StepLabel::Plough, n_sweep), (StepLabel::Hold, n_dwell)];
    let mut y = y0;
    for (step, n) in phases {
        for i in 1..=n {
            let pose = match step {
                StepLabel::Plough => rec.sweep_pose(i, n, z),
                _ => ToolPose::at(x, y, z),
            };
            y = pose.y;
            let row = rec.record(pose, step)?;
            let (force, measured, t) = (row.truth.fz, row.measured.fz, row.t());
            if force.abs() > abort_at {
                return Err(ControlError::Unstable { force, limit: abort_at, t, partial: Box::new(rec.trace) });
            }
            if gains.stiffness > 0.0 {
                let error = measured - target;
                integral += error * cfg.tick;
                let zdot = (z - z_prev) / cfg.tick;
                let dz = (error + gains.integral * integral - gains.damping * zdot) / gains.stiffness;
                z_prev = z;
                z = (z + dz).max(-limit);
            }
        }
    }
    rec.retract(x, y, z)?;
    Ok(rec.trace)
}
