//! Phantom geometry, materials and the effective foundation-stiffness field.
//!
//! Coordinates are millimetres in the phantom's top plane: `x` spans the block
//! width, `y` spans the block length (the sweep direction). Depths are measured
//! downward from the undeformed top surface.
//!
//! The local stiffness seen by the dome is
//!
//! ```text
//! k(x, y) = k_sub * (1 + A * mean_{o in disc} max_{tendon covering (x,y)+o} exp(-top_depth / lambda))
//! ```
//!
//! where the disc is a fixed lattice of lateral offsets of radius `footprint_radius`.
//! For a single tendon depth this reduces to `k_sub * (1 + A exp(-d/lambda) coverage)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("{field} must be positive (got {value})")]
    NonPositive { field: String, value: f64 },
    #[error("{field} must be non-negative (got {value})")]
    Negative { field: String, value: f64 },
    #[error("{field} lies outside the block footprint")]
    OutOfFootprint { field: String },
    #[error("tendons[{index}]: start and end coincide")]
    DegenerateTendon { index: usize },
    #[error("tendons[{index}]: top_depth + diameter = {bottom} mm exceeds block.thickness = {thickness} mm")]
    TendonTooDeep { index: usize, bottom: f64, thickness: f64 },
    #[error("query point ({x}, {y}) lies outside the block footprint")]
    QueryOutOfFootprint { x: f64, y: f64 },
    #[error("invalid phantom config: {0}")]
    Config(String),
}

/// Elastic modulus (Pa) and the Winkler foundation stiffness (N/m^3) derived from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams<T> {
    pub elastic_modulus: T,
    pub foundation_stiffness: T,
}

impl<T: Scalar> MaterialParams<T> {
    /// Winkler stiffness of a layer with modulus `modulus` (Pa) acting over
    /// `foundation_depth` (mm): `k = E / h`.
    pub fn from_modulus(modulus: T, foundation_depth_mm: T) -> Self {
        Self {
            elastic_modulus: modulus,
            foundation_stiffness: modulus / (foundation_depth_mm * T::lit(1e-3)),
        }
    }

    /// Ecoflex 00-20 substrate: 60 kPa acting over an effective 2 mm foundation.
    pub fn ecoflex_00_20() -> Self {
        Self::from_modulus(T::lit(60e3), T::lit(2.0))
    }

    /// 3D-printed PLA tendon, E = 2.58 GPa.
    pub fn pla(diameter_mm: T) -> Self {
        Self::from_modulus(T::lit(2.58e9), diameter_mm)
    }
}

/// A straight cylindrical tendon projected onto the top plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TendonSegment<T> {
    pub start: [T; 2],
    pub end: [T; 2],
    pub diameter: T,
    pub top_depth: T,
    pub material: MaterialParams<T>,
}

impl<T: Scalar> TendonSegment<T> {
    pub fn pla(start: [T; 2], end: [T; 2], diameter: T, top_depth: T) -> Self {
        Self { start, end, diameter, top_depth, material: MaterialParams::pla(diameter) }
    }

    /// Whether `(x, y)` lies inside the rectangular projection of the cylinder.
    #[inline]
    pub fn covers(&self, x: T, y: T) -> bool {
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        let len2 = dx * dx + dy * dy;
        let px = x - self.start[0];
        let py = y - self.start[1];
        let u = (px * dx + py * dy) / len2;
        if u < T::zero() || u > T::one() {
            return false;
        }
        let cross = (px * dy - py * dx).abs();
        cross <= self.diameter * T::lit(0.5) * len2.sqrt()
    }

    /// Distance from `(x, y)` to the centreline segment.
    fn axis_distance(&self, x: T, y: T) -> T {
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        let u = (((x - self.start[0]) * dx + (y - self.start[1]) * dy) / (dx * dx + dy * dy))
            .max(T::zero())
            .min(T::one());
        let cx = self.start[0] + u * dx - x;
        let cy = self.start[1] + u * dy - y;
        (cx * cx + cy * cy).sqrt()
    }

    /// Axis-aligned bounds of the projection grown by `margin`.
    fn bounds(&self, margin: T) -> [T; 4] {
        let m = margin + self.diameter * T::lit(0.5);
        [
            self.start[0].min(self.end[0]) - m,
            self.start[0].max(self.end[0]) + m,
            self.start[1].min(self.end[1]) - m,
            self.start[1].max(self.end[1]) + m,
        ]
    }
}

/// Tuning of the stiffness field model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldParams<T> {
    /// Peak stiffness amplification `A` of a tendon at zero depth with full coverage.
    pub amplification: T,
    /// Depth decay length `lambda` (mm).
    pub depth_decay: T,
    /// Radius of the lateral coverage disc (mm).
    pub footprint_radius: T,
    /// Lattice spacing of the coverage disc samples (mm).
    pub sample_spacing: T,
    /// Node pitch of the cached stiffness map (mm).
    pub map_pitch: T,
}

impl<T: Scalar> Default for FieldParams<T> {
    fn default() -> Self {
        Self {
            amplification: T::lit(4.0),
            depth_decay: T::lit(5.0),
            footprint_radius: T::lit(6.0),
            sample_spacing: T::lit(0.5),
            map_pitch: T::lit(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec<T> {
    /// Extent along `y` (mm).
    pub length: T,
    /// Extent along `x` (mm).
    pub width: T,
    pub thickness: T,
    pub substrate: MaterialParams<T>,
    pub tendons: Vec<TendonSegment<T>>,
    /// Coulomb coefficient of the (oiled) top surface.
    pub surface_friction: T,
    pub field: FieldParams<T>,
}

impl<T: Scalar> PhantomSpec<T> {
    /// Bare 200 x 100 x 30 mm Ecoflex block with mineral-oil friction 0.1.
    pub fn block() -> Self {
        Self {
            length: T::lit(200.0),
            width: T::lit(100.0),
            thickness: T::lit(30.0),
            substrate: MaterialParams::ecoflex_00_20(),
            tendons: Vec::new(),
            surface_friction: T::lit(0.1),
            field: FieldParams::default(),
        }
    }

    pub fn with_tendons(mut self, tendons: Vec<TendonSegment<T>>) -> Self {
        self.tendons = tendons;
        self
    }

    /// Reflection `y -> length - y` (mirror about the block's x-axis).
    pub fn mirrored(&self) -> Self {
        let flip = |p: [T; 2]| [p[0], self.length - p[1]];
        let mut out = self.clone();
        for t in &mut out.tendons {
            t.start = flip(t.start);
            t.end = flip(t.end);
        }
        out
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let positive = |field: &str, v: T| {
            if v > T::zero() {
                Ok(())
            } else {
                Err(PhantomError::NonPositive { field: field.into(), value: v.as_f64() })
            }
        };
        positive("block.length", self.length)?;
        positive("block.width", self.width)?;
        positive("block.thickness", self.thickness)?;
        positive("substrate.modulus", self.substrate.elastic_modulus)?;
        positive("substrate.foundation_stiffness", self.substrate.foundation_stiffness)?;
        positive("field.amplification", self.field.amplification)?;
        positive("field.depth_decay", self.field.depth_decay)?;
        positive("field.footprint_radius", self.field.footprint_radius)?;
        positive("field.sample_spacing", self.field.sample_spacing)?;
        positive("field.map_pitch", self.field.map_pitch)?;
        if !(self.surface_friction >= T::zero()) {
            return Err(PhantomError::Negative {
                field: "friction".into(),
                value: self.surface_friction.as_f64(),
            });
        }
        for (i, t) in self.tendons.iter().enumerate() {
            positive(&format!("tendons[{i}].diameter"), t.diameter)?;
            positive(&format!("tendons[{i}].modulus"), t.material.elastic_modulus)?;
            if !(t.top_depth >= T::zero()) {
                return Err(PhantomError::Negative {
                    field: format!("tendons[{i}].top_depth"),
                    value: t.top_depth.as_f64(),
                });
            }
            if t.start == t.end {
                return Err(PhantomError::DegenerateTendon { index: i });
            }
            for (name, p) in [("start", t.start), ("end", t.end)] {
                if !self.in_footprint(p[0], p[1]) {
                    return Err(PhantomError::OutOfFootprint { field: format!("tendons[{i}].{name}") });
                }
            }
            let bottom = t.top_depth + t.diameter;
            if bottom > self.thickness {
                return Err(PhantomError::TendonTooDeep {
                    index: i,
                    bottom: bottom.as_f64(),
                    thickness: self.thickness.as_f64(),
                });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn in_footprint(&self, x: T, y: T) -> bool {
        x >= T::zero() && x <= self.width && y >= T::zero() && y <= self.length
    }

    pub fn cast<U: Scalar>(&self) -> PhantomSpec<U> {
        let c = |v: T| U::lit(v.as_f64());
        let mat = |m: MaterialParams<T>| MaterialParams {
            elastic_modulus: c(m.elastic_modulus),
            foundation_stiffness: c(m.foundation_stiffness),
        };
        PhantomSpec {
            length: c(self.length),
            width: c(self.width),
            thickness: c(self.thickness),
            substrate: mat(self.substrate),
            tendons: self
                .tendons
                .iter()
                .map(|t| TendonSegment {
                    start: [c(t.start[0]), c(t.start[1])],
                    end: [c(t.end[0]), c(t.end[1])],
                    diameter: c(t.diameter),
                    top_depth: c(t.top_depth),
                    material: mat(t.material),
                })
                .collect(),
            surface_friction: c(self.surface_friction),
            field: FieldParams {
                amplification: c(self.field.amplification),
                depth_decay: c(self.field.depth_decay),
                footprint_radius: c(self.field.footprint_radius),
                sample_spacing: c(self.field.sample_spacing),
                map_pitch: c(self.field.map_pitch),
            },
        }
    }
}

/// Lattice offsets `(i s, j s)` with `|(i, j)| s <= radius`.
fn disc_offsets<T: Scalar>(radius: T, spacing: T) -> Vec<[T; 2]> {
    let r = (radius / spacing).as_f64();
    let n = (r + 1e-9).floor() as i64;
    let r2 = r * r + 1e-9;
    let mut out = Vec::new();
    for j in -n..=n {
        for i in -n..=n {
            if ((i * i + j * j) as f64) <= r2 {
                out.push([T::lit(i as f64) * spacing, T::lit(j as f64) * spacing]);
            }
        }
    }
    out
}

/// Precomputed stiffness on a regular node grid, bilinearly interpolated.
#[derive(Debug, Clone)]
pub struct StiffnessMap<T> {
    pitch: T,
    nx: usize,
    ny: usize,
    values: Vec<T>,
}

impl<T: Scalar> StiffnessMap<T> {
    #[inline]
    fn node(&self, i: usize, j: usize) -> T {
        self.values[j * (self.nx + 1) + i]
    }

    /// Bilinear lookup; coordinates are clamped to the mapped area.
    #[inline]
    pub fn sample(&self, x: T, y: T) -> T {
        let fx = (x / self.pitch).max(T::zero());
        let fy = (y / self.pitch).max(T::zero());
        let i = fx.floor().to_usize().unwrap_or(0).min(self.nx - 1);
        let j = fy.floor().to_usize().unwrap_or(0).min(self.ny - 1);
        let tx = (fx - T::lit(i as f64)).min(T::one());
        let ty = (fy - T::lit(j as f64)).min(T::one());
        let a = self.node(i, j);
        let b = self.node(i + 1, j);
        let c = self.node(i, j + 1);
        let d = self.node(i + 1, j + 1);
        if a == b && a == c && a == d {
            return a;
        }
        let top = a + (b - a) * tx;
        let bot = c + (d - c) * tx;
        top + (bot - top) * ty
    }

    pub fn pitch(&self) -> T {
        self.pitch
    }
}

/// A validated phantom. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Phantom<T> {
    spec: PhantomSpec<T>,
    offsets: Vec<[T; 2]>,
    depth_factors: Vec<T>,
    map: StiffnessMap<T>,
}

impl<T: Scalar> Phantom<T> {
    pub fn build(spec: PhantomSpec<T>) -> Result<Self, PhantomError> {
        spec.validate()?;
        let offsets = disc_offsets(spec.field.footprint_radius, spec.field.sample_spacing);
        let depth_factors = spec
            .tendons
            .iter()
            .map(|t| (-t.top_depth / spec.field.depth_decay).exp())
            .collect();
        let pitch = spec.field.map_pitch;
        let nx = (spec.width / pitch).ceil().to_usize().unwrap_or(1).max(1);
        let ny = (spec.length / pitch).ceil().to_usize().unwrap_or(1).max(1);
        let mut phantom = Self {
            spec,
            offsets,
            depth_factors,
            map: StiffnessMap { pitch, nx, ny, values: Vec::new() },
        };
        phantom.map.values = phantom.compute_map(nx, ny, pitch);
        Ok(phantom)
    }

    fn compute_map(&self, nx: usize, ny: usize, pitch: T) -> Vec<T> {
        let k_sub = self.k_sub();
        let radius = self.spec.field.footprint_radius;
        let bounds: Vec<[T; 4]> = self.spec.tendons.iter().map(|t| t.bounds(radius)).collect();
        let reach: Vec<T> =
            self.spec.tendons.iter().map(|t| radius + t.diameter * T::lit(0.5) + T::lit(1e-6)).collect();
        let mut values = Vec::with_capacity((nx + 1) * (ny + 1));
        let mut near = Vec::with_capacity(self.spec.tendons.len());
        for j in 0..=ny {
            let y = T::lit(j as f64) * pitch;
            for i in 0..=nx {
                let x = T::lit(i as f64) * pitch;
                near.clear();
                near.extend(
                    bounds
                        .iter()
                        .enumerate()
                        .filter(|(idx, b)| {
                            x >= b[0]
                                && x <= b[1]
                                && y >= b[2]
                                && y <= b[3]
                                && self.spec.tendons[*idx].axis_distance(x, y) <= reach[*idx]
                        })
                        .map(|(idx, _)| idx),
                );
                if near.is_empty() {
                    values.push(k_sub);
                } else {
                    let amp = self.amplification_from(x, y, &near);
                    values.push(k_sub * (T::one() + amp));
                }
            }
        }
        values
    }

    fn amplification_from(&self, x: T, y: T, candidates: &[usize]) -> T {
        let mut acc = T::zero();
        for o in &self.offsets {
            let (px, py) = (x + o[0], y + o[1]);
            let mut best = T::zero();
            for &idx in candidates {
                let f = self.depth_factors[idx];
                if f > best && self.spec.tendons[idx].covers(px, py) {
                    best = f;
                }
            }
            acc += best;
        }
        self.spec.field.amplification * acc / T::lit(self.offsets.len() as f64)
    }

    pub fn spec(&self) -> &PhantomSpec<T> {
        &self.spec
    }

    /// Substrate foundation stiffness `k_sub` (N/m^3).
    #[inline]
    pub fn k_sub(&self) -> T {
        self.spec.substrate.foundation_stiffness
    }

    /// Upper bound `k_sub (1 + A)` of the field.
    pub fn k_max(&self) -> T {
        self.k_sub() * (T::one() + self.spec.field.amplification)
    }

    pub fn friction(&self) -> T {
        self.spec.surface_friction
    }

    /// Exact field evaluation at `(x, y)` in mm, in N/m^3.
    pub fn effective_stiffness(&self, x: T, y: T) -> Result<T, PhantomError> {
        if !self.spec.in_footprint(x, y) {
            return Err(PhantomError::QueryOutOfFootprint { x: x.as_f64(), y: y.as_f64() });
        }
        let all: Vec<usize> = (0..self.spec.tendons.len()).collect();
        Ok(self.k_sub() * (T::one() + self.amplification_from(x, y, &all)))
    }

    /// Cached field lookup used by the contact integrator. Agrees with
    /// [`effective_stiffness`](Self::effective_stiffness) on map nodes and
    /// interpolates bilinearly between them; clamps outside the footprint.
    #[inline]
    pub fn stiffness_at(&self, x: T, y: T) -> T {
        self.map.sample(x, y)
    }

    pub fn stiffness_map(&self) -> &StiffnessMap<T> {
        &self.map
    }

    /// Fraction of a lattice disc of `radius` mm around `(x, y)` lying over any
    /// tendon projection, regardless of depth.
    pub fn tendon_fraction(&self, x: T, y: T, radius: T) -> T {
        let offsets = disc_offsets(radius, self.spec.field.sample_spacing.min(radius));
        let hits = offsets
            .iter()
            .filter(|o| self.spec.tendons.iter().any(|t| t.covers(x + o[0], y + o[1])))
            .count();
        T::lit(hits as f64 / offsets.len() as f64)
    }
}

/// Canonical geometries of the palpation experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    /// Tendon under the first half of the sweep, bare silicone after.
    Exp1,
    /// Constant-width tendon whose top steps down 1.5 mm through a slope.
    Exp2,
    /// Crossed pair feeding one straight 3.5 mm tendon, 2.3 mm deep.
    Exp3,
    /// Two thin parallel tendons merging into one thick tendon, 1.8 mm deep.
    Exp4,
    /// One uniform tendon along the whole length.
    Uniform,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Exp1, Preset::Exp2, Preset::Exp3, Preset::Exp4, Preset::Uniform];
    pub const EXPERIMENTS: [Preset; 4] = [Preset::Exp1, Preset::Exp2, Preset::Exp3, Preset::Exp4];

    pub fn id(self) -> &'static str {
        match self {
            Preset::Exp1 => "exp1",
            Preset::Exp2 => "exp2",
            Preset::Exp3 => "exp3",
            Preset::Exp4 => "exp4",
            Preset::Uniform => "uniform",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::Exp1 => "tendon -> no-tendon transition at y = 100 mm",
            Preset::Exp2 => "2 mm tendon, top depth 6.0 mm stepping to 7.5 mm (slope 95..105 mm)",
            Preset::Exp3 => "crossed 3.5 mm pair (60 deg) -> straight 3.5 mm tendon, 2.3 mm deep",
            Preset::Exp4 => "two 3 mm tendons (14 mm apart) merging into one 6 mm tendon, 1.8 mm deep",
            Preset::Uniform => "single uniform 3.5 mm tendon along the whole length",
        }
    }

    pub fn spec<T: Scalar>(self) -> PhantomSpec<T> {
        preset(self)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown preset '{s}' (expected exp1|exp2|exp3|exp4|uniform)"))
    }
}

/// Sweep line of every preset: `x = 50 mm`.
pub const SWEEP_X: f64 = 50.0;

/// Geometry of each experiment on the default 200 x 100 x 30 mm block.
pub fn preset<T: Scalar>(id: Preset) -> PhantomSpec<T> {
    let l = T::lit;
    let seg = |sx: f64, sy: f64, ex: f64, ey: f64, dia: f64, depth: f64| {
        TendonSegment::pla([l(sx), l(sy)], [l(ex), l(ey)], l(dia), l(depth))
    };
    let cx = SWEEP_X;
    let tendons = match id {
        Preset::Exp1 => vec![seg(cx, 0.0, cx, 100.0, 3.5, 2.0)],
        Preset::Exp2 => {
            let (raised, step, dia) = (6.0, 1.5, 2.0);
            let mut v = vec![seg(cx, 0.0, cx, 95.0, dia, raised)];
            let pieces = 5;
            for i in 0..pieces {
                let y0 = 95.0 + 10.0 * i as f64 / pieces as f64;
                let y1 = 95.0 + 10.0 * (i + 1) as f64 / pieces as f64;
                let depth = raised + step * (i as f64 + 0.5) / pieces as f64;
                v.push(seg(cx, y0, cx, y1, dia, depth));
            }
            v.push(seg(cx, 105.0, cx, 200.0, dia, raised + step));
            v
        }
        Preset::Exp3 => {
            let half = 35.0 * (30f64).to_radians().tan();
            vec![
                seg(cx - half, 20.0, cx + half, 90.0, 3.5, 2.3),
                seg(cx + half, 20.0, cx - half, 90.0, 3.5, 2.3),
                seg(cx, 90.0, cx, 200.0, 3.5, 2.3),
            ]
        }
        Preset::Exp4 => vec![
            seg(cx - 7.0, 0.0, cx - 7.0, 90.0, 3.0, 1.8),
            seg(cx + 7.0, 0.0, cx + 7.0, 90.0, 3.0, 1.8),
            seg(cx - 7.0, 90.0, cx, 110.0, 3.0, 1.8),
            seg(cx + 7.0, 90.0, cx, 110.0, 3.0, 1.8),
            seg(cx, 110.0, cx, 200.0, 6.0, 1.8),
        ],
        Preset::Uniform => vec![seg(cx, 0.0, cx, 200.0, 3.5, 2.0)],
    };
    PhantomSpec::block().with_tendons(tendons)
}

// ---------------------------------------------------------------------------
// Structured-text config
// ---------------------------------------------------------------------------

const CONFIG_HEADER: &str = "\
# palp-bench phantom config
# units: lengths in millimetres, moduli in pascals, foundation_stiffness in N/m^3
# axes: x across block.width, y along block.length (sweep direction), depth downward from the top surface
";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    friction: f64,
    block: BlockSection,
    substrate: SubstrateSection,
    #[serde(default)]
    field: Option<FieldSection>,
    #[serde(default)]
    tendons: Vec<TendonSection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSection {
    length: f64,
    width: f64,
    thickness: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubstrateSection {
    modulus: f64,
    foundation_stiffness: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSection {
    amplification: f64,
    depth_decay: f64,
    footprint_radius: f64,
    sample_spacing: f64,
    map_pitch: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TendonSection {
    start: [f64; 2],
    end: [f64; 2],
    diameter: f64,
    top_depth: f64,
    modulus: f64,
}

impl PhantomSpec<f64> {
    pub fn to_config_string(&self) -> String {
        let file = ConfigFile {
            friction: self.surface_friction,
            block: BlockSection { length: self.length, width: self.width, thickness: self.thickness },
            substrate: SubstrateSection {
                modulus: self.substrate.elastic_modulus,
                foundation_stiffness: self.substrate.foundation_stiffness,
            },
            field: Some(FieldSection {
                amplification: self.field.amplification,
                depth_decay: self.field.depth_decay,
                footprint_radius: self.field.footprint_radius,
                sample_spacing: self.field.sample_spacing,
                map_pitch: self.field.map_pitch,
            }),
            tendons: self
                .tendons
                .iter()
                .map(|t| TendonSection {
                    start: t.start,
                    end: t.end,
                    diameter: t.diameter,
                    top_depth: t.top_depth,
                    modulus: t.material.elastic_modulus,
                })
                .collect(),
        };
        let body = toml::to_string(&file).expect("phantom config serializes");
        format!("{CONFIG_HEADER}{body}")
    }

    pub fn from_config_str(text: &str) -> Result<Self, PhantomError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| PhantomError::Config(e.to_string()))?;
        let field = file
            .field
            .map(|f| FieldParams {
                amplification: f.amplification,
                depth_decay: f.depth_decay,
                footprint_radius: f.footprint_radius,
                sample_spacing: f.sample_spacing,
                map_pitch: f.map_pitch,
            })
            .unwrap_or_default();
        let spec = PhantomSpec {
            length: file.block.length,
            width: file.block.width,
            thickness: file.block.thickness,
            substrate: MaterialParams {
                elastic_modulus: file.substrate.modulus,
                foundation_stiffness: file.substrate.foundation_stiffness,
            },
            tendons: file
                .tendons
                .into_iter()
                .map(|t| TendonSegment {
                    start: t.start,
                    end: t.end,
                    diameter: t.diameter,
                    top_depth: t.top_depth,
                    material: MaterialParams::from_modulus(t.modulus, t.diameter),
                })
                .collect(),
            surface_friction: file.friction,
            field,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform_tendon(depth: f64, diameter: f64) -> PhantomSpec<f64> {
        PhantomSpec::block().with_tendons(vec![TendonSegment::pla([50.0, 0.0], [50.0, 200.0], diameter, depth)])
    }

    #[test]
    fn no_tendons_is_constant() {
        let p = Phantom::build(PhantomSpec::<f64>::block()).unwrap();
        let k = p.k_sub();
        for &(x, y) in &[(0.0, 0.0), (50.0, 100.0), (100.0, 200.0), (13.3, 171.9)] {
            assert_eq!(p.effective_stiffness(x, y).unwrap(), k);
            assert_eq!(p.stiffness_at(x, y), k);
        }
    }

    #[test]
    fn tendon_protruding_through_bottom_is_rejected() {
        let spec = PhantomSpec::<f64>::block()
            .with_tendons(vec![TendonSegment::pla([10.0, 10.0], [10.0, 90.0], 2.0, 29.0)]);
        let err = Phantom::build(spec).unwrap_err();
        assert!(matches!(err, PhantomError::TendonTooDeep { index: 0, .. }), "{err}");
        assert!(err.to_string().contains("block.thickness"));
    }

    #[test]
    fn diagnostics_name_the_field() {
        let mut spec = PhantomSpec::<f64>::block();
        spec.width = 0.0;
        assert!(Phantom::build(spec).unwrap_err().to_string().contains("block.width"));

        let spec = PhantomSpec::<f64>::block()
            .with_tendons(vec![TendonSegment::pla([10.0, 10.0], [150.0, 90.0], 2.0, 1.0)]);
        assert_eq!(
            Phantom::build(spec).unwrap_err(),
            PhantomError::OutOfFootprint { field: "tendons[0].end".into() }
        );

        let mut spec = PhantomSpec::<f64>::block();
        spec.surface_friction = -0.1;
        assert!(Phantom::build(spec).unwrap_err().to_string().contains("friction"));
    }

    #[test]
    fn far_from_tendon_is_substrate() {
        let p = Phantom::build(uniform_tendon(2.0, 3.5)).unwrap();
        // > 5 footprint radii from the tendon axis
        assert_eq!(p.effective_stiffness(15.0, 100.0).unwrap(), p.k_sub());
        assert!(p.effective_stiffness(-1.0, 100.0).is_err());
    }

    #[test]
    fn full_coverage_at_surface_reaches_peak() {
        // 20 mm tendon: the 6 mm disc is fully covered over the axis.
        let p = Phantom::build(uniform_tendon(0.0, 20.0)).unwrap();
        let k = p.effective_stiffness(50.0, 100.0).unwrap();
        assert_eq!(k, p.k_sub() * 5.0);
        assert_eq!(k, p.k_max());
    }

    #[test]
    fn map_nodes_match_exact_field() {
        let p = Phantom::build(preset::<f64>(Preset::Exp3)).unwrap();
        for &(x, y) in &[(50.0, 55.0), (44.5, 30.0), (50.0, 120.5), (61.0, 88.0)] {
            assert_eq!(p.stiffness_at(x, y), p.effective_stiffness(x, y).unwrap());
        }
    }

    #[test]
    fn exp2_raised_section_is_stiffer() {
        let p = Phantom::build(preset::<f64>(Preset::Exp2)).unwrap();
        let raised = p.effective_stiffness(SWEEP_X, 60.0).unwrap();
        let lower = p.effective_stiffness(SWEEP_X, 140.0).unwrap();
        assert!(raised > lower, "{raised} vs {lower}");
        assert!(lower > p.k_sub());
    }

    #[test]
    fn exp2_step_is_one_and_a_half_mm() {
        let spec = preset::<f64>(Preset::Exp2);
        let first = spec.tendons.first().unwrap().top_depth;
        let last = spec.tendons.last().unwrap().top_depth;
        assert_eq!(last - first, 1.5);
        assert_eq!(spec.tendons.first().unwrap().diameter, spec.tendons.last().unwrap().diameter);
    }

    #[test]
    fn exp3_has_crossed_pair_then_straight_cylinder() {
        let spec = preset::<f64>(Preset::Exp3);
        assert_eq!(spec.tendons.len(), 3);
        let straight = spec.tendons[2];
        assert_eq!(straight.diameter, 3.5);
        assert_eq!(straight.top_depth, 2.3);
        assert_eq!(straight.start[0], straight.end[0]);
        // the two arms cross on the sweep line
        let (a, b) = (spec.tendons[0], spec.tendons[1]);
        assert!(a.covers(SWEEP_X, 55.0) && b.covers(SWEEP_X, 55.0));
        Phantom::build(spec).unwrap();
    }

    #[test]
    fn exp4_tendons_share_depth() {
        let spec = preset::<f64>(Preset::Exp4);
        assert!(spec.tendons.iter().all(|t| t.top_depth == 1.8));
        let thin = spec.tendons[0].diameter;
        let thick = spec.tendons.last().unwrap().diameter;
        assert!(thick > thin);
    }

    #[test]
    fn uniform_is_constant_along_sweep() {
        let p = Phantom::build(preset::<f64>(Preset::Uniform)).unwrap();
        let k0 = p.stiffness_at(SWEEP_X, 40.0);
        for i in 0..=240 {
            let y = 40.0 + 0.5 * i as f64;
            assert_eq!(p.stiffness_at(SWEEP_X, y), k0);
        }
        assert!(k0 > p.k_sub());
    }

    #[test]
    fn config_round_trip() {
        for id in Preset::ALL {
            let spec = preset::<f64>(id);
            let text = spec.to_config_string();
            assert!(text.starts_with("# palp-bench phantom config"));
            assert!(text.contains("millimetres"));
            let back = PhantomSpec::from_config_str(&text).unwrap();
            assert_eq!(back.tendons.len(), spec.tendons.len());
            assert_eq!(back.substrate, spec.substrate);
            assert_eq!(back.field, spec.field);
            for (a, b) in back.tendons.iter().zip(&spec.tendons) {
                assert_eq!((a.start, a.end, a.diameter, a.top_depth), (b.start, b.end, b.diameter, b.top_depth));
            }
        }
    }

    #[test]
    fn config_rejects_invalid_geometry() {
        let mut spec = preset::<f64>(Preset::Exp1);
        spec.tendons[0].top_depth = 29.0;
        let text = spec.to_config_string();
        assert!(matches!(PhantomSpec::from_config_str(&text), Err(PhantomError::TendonTooDeep { .. })));
    }

    #[test]
    fn f32_field_agrees_with_f64() {
        let spec64 = preset::<f64>(Preset::Exp4);
        let p64 = Phantom::build(spec64.clone()).unwrap();
        let p32 = Phantom::build(spec64.cast::<f32>()).unwrap();
        let a = p64.effective_stiffness(50.0, 60.0).unwrap();
        let b = p32.effective_stiffness(50.0, 60.0).unwrap() as f64;
        assert!((a - b).abs() / a < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn field_is_bounded(x in 0.0..100.0f64, y in 0.0..200.0f64) {
            static EXP4: std::sync::OnceLock<Phantom<f64>> = std::sync::OnceLock::new();
            let p = EXP4.get_or_init(|| Phantom::build(preset::<f64>(Preset::Exp4)).unwrap());
            let k = p.effective_stiffness(x, y).unwrap();
            prop_assert!(k >= p.k_sub() && k <= p.k_max());
            let kc = p.stiffness_at(x, y);
            prop_assert!(kc >= p.k_sub() && kc <= p.k_max() * (1.0 + 1e-12));
        }

        #[test]
        fn deeper_is_never_stiffer(x in 40.0..60.0f64, d0 in 0.0..10.0f64, extra in 0.0..10.0f64) {
            let shallow = Phantom::build(uniform_tendon(d0, 4.0)).unwrap();
            let deep = Phantom::build(uniform_tendon(d0 + extra, 4.0)).unwrap();
            prop_assert!(deep.effective_stiffness(x, 100.0).unwrap() <= shallow.effective_stiffness(x, 100.0).unwrap());
        }

        #[test]
        fn mirroring_mirrors_field(
            sx in 5.0..95.0f64, sy in 5.0..195.0f64, ex in 5.0..95.0f64, ey in 5.0..195.0f64,
            dia in 1.0..8.0f64, depth in 0.0..10.0f64,
            qx in 0.0..100.0f64, qy in 0.0..200.0f64,
        ) {
            prop_assume!((sx - ex).abs() + (sy - ey).abs() > 1.0);
            let spec = PhantomSpec::<f64>::block()
                .with_tendons(vec![TendonSegment::pla([sx, sy], [ex, ey], dia, depth)]);
            let a = Phantom::build(spec.clone()).unwrap();
            let b = Phantom::build(spec.mirrored()).unwrap();
            let ka = a.effective_stiffness(qx, qy).unwrap();
            let kb = b.effective_stiffness(qx, 200.0 - qy).unwrap();
            prop_assert!((ka - kb).abs() <= 1e-12 * ka, "{} vs {}", ka, kb);
        }
    }
}
