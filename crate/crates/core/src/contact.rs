//! Winkler-foundation contact between a rigid spherical dome and the phantom.
//!
//! Lengths are in mm at the interface; pressures are Pa, forces N and torques
//! N·mm. The dome cap is approximated by the paraboloid `z = r^2 / 2R`, valid
//! while the indentation stays below `R / 4`.
//!
//! Sign convention: `fz` is the compressive normal force on the tool and is
//! reported positive. Plots and exports negate it to the robot frame.

use thiserror::Error;

use crate::phantom::Phantom;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContactError {
    #[error("indentation {depth} mm exceeds the paraboloid validity limit R/4 = {limit} mm")]
    TooDeep { depth: f64, limit: f64 },
    #[error("dome axis ({x}, {y}) lies outside the phantom footprint")]
    OffPhantom { x: f64, y: f64 },
    #[error("grid pitch must be positive (got {0})")]
    BadPitch(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomeGeometry<T> {
    /// Radius of curvature (mm).
    pub radius: T,
}

impl<T: Scalar> Default for DomeGeometry<T> {
    fn default() -> Self {
        Self { radius: T::lit(20.0) }
    }
}

impl<T: Scalar> DomeGeometry<T> {
    /// Largest indentation accepted by [`indentation_field`].
    pub fn max_indentation(&self) -> T {
        self.radius / T::lit(4.0)
    }
}

/// Dome pose: `(x, y)` is the dome axis, `z` the lowest dome point relative to
/// the undeformed surface (negative means indented).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ToolPose<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    /// Planar velocity (mm/s).
    pub velocity: [T; 2],
    pub t: T,
}

impl<T: Scalar> ToolPose<T> {
    pub fn at(x: T, y: T, z: T) -> Self {
        Self { x, y, z, velocity: [T::zero(); 2], t: T::zero() }
    }

    pub fn indentation(&self) -> T {
        (-self.z).max(T::zero())
    }
}

/// Six-axis wrench: forces in N, torques in N·mm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wrench<T> {
    pub fx: T,
    pub fy: T,
    pub fz: T,
    pub tx: T,
    pub ty: T,
    pub tz: T,
    pub t: T,
}

impl<T: Scalar> Wrench<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); 6], T::zero())
    }

    pub fn from_array(v: [T; 6], t: T) -> Self {
        Self { fx: v[0], fy: v[1], fz: v[2], tx: v[3], ty: v[4], tz: v[5], t }
    }

    pub fn to_array(&self) -> [T; 6] {
        [self.fx, self.fy, self.fz, self.tx, self.ty, self.tz]
    }

    pub fn force_norm(&self) -> T {
        (self.fx * self.fx + self.fy * self.fy + self.fz * self.fz).sqrt()
    }

    pub fn lateral(&self) -> T {
        (self.fx * self.fx + self.fy * self.fy).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Componentwise linear interpolation, `s` in `[0, 1]`.
    pub fn lerp(&self, other: &Self, s: T) -> Self {
        let a = self.to_array();
        let b = other.to_array();
        let mut out = [T::zero(); 6];
        for i in 0..6 {
            out[i] = a[i] + (b[i] - a[i]) * s;
        }
        Self::from_array(out, self.t + (other.t - self.t) * s)
    }
}

/// One grid sample of the contact field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSample<T> {
    pub x: T,
    pub y: T,
    /// Indentation (mm).
    pub depth: T,
    /// Winkler pressure `k * depth` (Pa).
    pub pressure: T,
}

/// Square grid of samples centred on the dome axis, covering the contact disc.
/// Samples are stored row-major over `(2 half + 1)^2` cells with `y` outer.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactPatch<T> {
    pub center: [T; 2],
    pub pitch: T,
    pub half: usize,
    /// Geometric contact radius `sqrt(2 R d)` (mm).
    pub contact_radius: T,
    pub peak_depth: T,
    pub samples: Vec<PatchSample<T>>,
}

impl<T: Scalar> ContactPatch<T> {
    pub fn empty(center: [T; 2], pitch: T) -> Self {
        Self {
            center,
            pitch,
            half: 0,
            contact_radius: T::zero(),
            peak_depth: T::zero(),
            samples: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.iter().all(|s| s.depth <= T::zero())
    }

    pub fn side(&self) -> usize {
        2 * self.half + 1
    }

    /// Sample at grid offset `(i, j)` from the centre, if inside the grid.
    pub fn at_offset(&self, i: i64, j: i64) -> Option<&PatchSample<T>> {
        let h = self.half as i64;
        if self.samples.is_empty() || i.abs() > h || j.abs() > h {
            return None;
        }
        let side = self.side() as i64;
        self.samples.get(((j + h) * side + (i + h)) as usize)
    }

    /// Grid-counted contact area (mm^2).
    pub fn contact_area(&self) -> T {
        let n = self.samples.iter().filter(|s| s.depth > T::zero()).count();
        T::lit(n as f64) * self.pitch * self.pitch
    }

    /// Grid-integrated normal force `sum p dA` (N).
    pub fn normal_force(&self) -> T {
        let da = self.pitch * self.pitch * T::lit(1e-6);
        self.samples.iter().map(|s| s.pressure).sum::<T>() * da
    }
}

/// Paraboloidal sphere-cap indentation field sampled at `pitch` mm.
pub fn indentation_field<T: Scalar>(
    dome: &DomeGeometry<T>,
    pose: &ToolPose<T>,
    phantom: &Phantom<T>,
    pitch: T,
) -> Result<ContactPatch<T>, ContactError> {
    if !(pitch > T::zero()) {
        return Err(ContactError::BadPitch(pitch.as_f64()));
    }
    if !phantom.spec().in_footprint(pose.x, pose.y) {
        return Err(ContactError::OffPhantom { x: pose.x.as_f64(), y: pose.y.as_f64() });
    }
    let d = pose.indentation();
    if d <= T::zero() {
        return Ok(ContactPatch::empty([pose.x, pose.y], pitch));
    }
    if d >= dome.max_indentation() {
        return Err(ContactError::TooDeep { depth: d.as_f64(), limit: dome.max_indentation().as_f64() });
    }
    let two_r = T::lit(2.0) * dome.radius;
    let a = (two_r * d).sqrt();
    let half = (a / pitch).floor().to_usize().unwrap_or(0) + 1;
    let side = 2 * half + 1;
    let mut samples = Vec::with_capacity(side * side);
    let h = half as i64;
    for j in -h..=h {
        let oy = T::lit(j as f64) * pitch;
        for i in -h..=h {
            let ox = T::lit(i as f64) * pitch;
            let x = pose.x + ox;
            let y = pose.y + oy;
            let depth = (d - (ox * ox + oy * oy) / two_r).max(T::zero());
            let pressure = if depth > T::zero() {
                phantom.stiffness_at(x, y) * depth * T::lit(1e-3)
            } else {
                T::zero()
            };
            samples.push(PatchSample { x, y, depth, pressure });
        }
    }
    Ok(ContactPatch { center: [pose.x, pose.y], pitch, half, contact_radius: a, peak_depth: d, samples })
}

/// Lateral force coefficients. Friction comes from the phantom surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactParams<T> {
    /// Ploughing coefficient `c_p`.
    pub ploughing: T,
}

impl<T: Scalar> Default for ContactParams<T> {
    fn default() -> Self {
        Self { ploughing: T::lit(0.3) }
    }
}

/// Wrench on the tool about the dome's centre of curvature above `pose`.
pub fn contact_wrench<T: Scalar>(
    patch: &ContactPatch<T>,
    phantom: &Phantom<T>,
    pose: &ToolPose<T>,
    dome: &DomeGeometry<T>,
    params: &ContactParams<T>,
) -> Wrench<T> {
    contact_wrench_about(patch, phantom, pose, dome, params, [pose.x, pose.y])
}

/// Like [`contact_wrench`] but with the moment pivot (the sensor axis) at
/// `pivot`, `R` above the dome tip. Rolling contacts use an off-axis patch.
pub fn contact_wrench_about<T: Scalar>(
    patch: &ContactPatch<T>,
    phantom: &Phantom<T>,
    pose: &ToolPose<T>,
    dome: &DomeGeometry<T>,
    params: &ContactParams<T>,
    pivot: [T; 2],
) -> Wrench<T> {
    let mut w = Wrench::zero();
    w.t = pose.t;
    if patch.samples.is_empty() {
        return w;
    }
    let da = patch.pitch * patch.pitch * T::lit(1e-6);
    let r = dome.radius;
    let two_r = T::lit(2.0) * r;
    let speed = (pose.velocity[0] * pose.velocity[0] + pose.velocity[1] * pose.velocity[1]).sqrt();
    let dir = if speed > T::zero() {
        [pose.velocity[0] / speed, pose.velocity[1] / speed]
    } else {
        [T::zero(); 2]
    };
    let mu = phantom.friction();
    let moving = speed > T::zero();
    for s in &patch.samples {
        if s.pressure <= T::zero() {
            continue;
        }
        let fn_ = s.pressure * da;
        // offsets from the patch centre (dome axis) and from the pivot
        let ox = s.x - patch.center[0];
        let oy = s.y - patch.center[1];
        let along = ox * dir[0] + oy * dir[1];
        let mut lateral = T::zero();
        if moving {
            lateral = mu * fn_;
            if along > T::zero() {
                // |d delta / ds| = along / R on the leading half
                lateral += params.ploughing * fn_ * along / r;
            }
        }
        let fx = -lateral * dir[0];
        let fy = -lateral * dir[1];
        let rx = s.x - pivot[0];
        let ry = s.y - pivot[1];
        let rz = (ox * ox + oy * oy) / two_r - r;
        w.fx += fx;
        w.fy += fy;
        w.fz += fn_;
        w.tx += ry * fn_ - rz * fy;
        w.ty += rz * fx - rx * fn_;
        w.tz += rx * fy - ry * fx;
    }
    w
}

/// `pi k R d^2`: Winkler force of a paraboloid pressed `d` into a uniform
/// foundation. SI units (N/m^3, m, m -> N).
pub fn closed_form_sphere_force<T: Scalar>(k: T, radius: T, depth: T) -> T {
    T::PI() * k * radius * depth * depth
}

/// Indentation at which a uniform foundation reaches `force`: inverse of
/// [`closed_form_sphere_force`], returned in mm.
pub fn closed_form_trigger_depth<T: Scalar>(k: T, radius_mm: T, force: T) -> T {
    (force / (T::PI() * k * radius_mm * T::lit(1e-3))).sqrt() * T::lit(1e3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{preset, PhantomSpec, Preset, TendonSegment};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn uniform(k: f64) -> Phantom<f64> {
        let mut spec = PhantomSpec::<f64>::block();
        spec.substrate.foundation_stiffness = k;
        Phantom::build(spec).unwrap()
    }

    #[test]
    fn touching_is_empty() {
        let p = uniform(1e6);
        let patch = indentation_field(&DomeGeometry::default(), &ToolPose::at(50.0, 100.0, 0.0), &p, 0.25).unwrap();
        assert!(patch.is_empty());
        let w = contact_wrench(&patch, &p, &ToolPose::at(50.0, 100.0, 0.0), &DomeGeometry::default(), &ContactParams::default());
        assert_eq!(w, Wrench::zero());
    }

    #[test]
    fn contact_radius_follows_sqrt_2rd() {
        let p = uniform(1e6);
        let patch = indentation_field(&DomeGeometry { radius: 20.0 }, &ToolPose::at(50.0, 100.0, -5.0 + 1e-9), &p, 0.25);
        // 5 mm is exactly R/4 and is rejected; just below is accepted.
        let patch = patch.unwrap();
        assert_relative_eq!(patch.contact_radius, 200f64.sqrt(), max_relative = 1e-9);
        assert!(indentation_field(&DomeGeometry { radius: 20.0 }, &ToolPose::at(50.0, 100.0, -5.0), &p, 0.25).is_err());
    }

    #[test]
    fn patch_invariants() {
        let p = Phantom::build(preset::<f64>(Preset::Exp1)).unwrap();
        let dome = DomeGeometry::default();
        let pose = ToolPose::at(50.0, 98.0, -3.0);
        let patch = indentation_field(&dome, &pose, &p, 0.25).unwrap();
        for s in &patch.samples {
            let r2 = (s.x - pose.x).powi(2) + (s.y - pose.y).powi(2);
            if r2.sqrt() > patch.contact_radius {
                assert_eq!(s.depth, 0.0);
            }
            assert!(s.depth >= 0.0 && s.pressure >= 0.0);
            assert_eq!(s.pressure, p.stiffness_at(s.x, s.y) * s.depth * 1e-3);
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_relative_eq!(closed_form_sphere_force(1e6, 0.02, 0.005), std::f64::consts::FRAC_PI_2, max_relative = 1e-12);
        assert_eq!(closed_form_sphere_force(1e6, 0.02, 0.0), 0.0);
        assert_relative_eq!(
            closed_form_sphere_force(3e7, 0.02, 0.004),
            4.0 * closed_form_sphere_force(3e7, 0.02, 0.002),
            max_relative = 1e-12
        );
        let d = closed_form_trigger_depth(3e7, 20.0, 25.0);
        assert_relative_eq!(closed_form_sphere_force(3e7, 0.02, d * 1e-3), 25.0, max_relative = 1e-12);
    }

    #[test]
    fn grid_force_matches_closed_form() {
        let p = uniform(1e6);
        let pose = ToolPose::at(50.0, 100.0, -5.0 + 1e-6);
        let patch = indentation_field(&DomeGeometry { radius: 20.0 }, &pose, &p, 0.1).unwrap();
        let exact = closed_form_sphere_force(1e6, 0.02, 0.005);
        assert_relative_eq!(patch.normal_force(), exact, max_relative = 2.5e-3);
    }

    #[test]
    fn static_contact_has_no_lateral_force() {
        let p = Phantom::build(preset::<f64>(Preset::Uniform)).unwrap();
        let pose = ToolPose::at(50.0, 100.0, -3.0);
        let dome = DomeGeometry::default();
        let patch = indentation_field(&dome, &pose, &p, 0.25).unwrap();
        let w = contact_wrench(&patch, &p, &pose, &dome, &ContactParams::default());
        assert_eq!((w.fx, w.fy), (0.0, 0.0));
        assert!(w.fz > 0.0);
    }

    #[test]
    fn sliding_resists_motion() {
        let p = uniform(3e7);
        let mut pose = ToolPose::at(50.0, 100.0, -3.0);
        pose.velocity = [0.0, 20.0];
        let dome = DomeGeometry::default();
        let patch = indentation_field(&dome, &pose, &p, 0.25).unwrap();
        let w = contact_wrench(&patch, &p, &pose, &dome, &ContactParams::default());
        assert!(w.fy < -0.1 * w.fz, "friction plus ploughing exceed mu Fz");
        assert!(w.fx.abs() < 1e-12);
        // no ploughing: pure Coulomb
        let w0 = contact_wrench(&patch, &p, &pose, &dome, &ContactParams { ploughing: 0.0 });
        assert_relative_eq!(w0.fy, -0.1 * w0.fz, max_relative = 1e-12);
    }

    #[test]
    fn doubling_stiffness_doubles_fz() {
        let dome = DomeGeometry::default();
        let pose = ToolPose::at(50.0, 100.0, -3.0);
        let a = indentation_field(&dome, &pose, &uniform(1e7), 0.25).unwrap().normal_force();
        let b = indentation_field(&dome, &pose, &uniform(2e7), 0.25).unwrap().normal_force();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn tendon_raises_force_at_fixed_depth() {
        let p = Phantom::build(preset::<f64>(Preset::Exp1)).unwrap();
        let dome = DomeGeometry::default();
        let over = indentation_field(&dome, &ToolPose::at(50.0, 60.0, -3.0), &p, 0.25).unwrap().normal_force();
        let off = indentation_field(&dome, &ToolPose::at(50.0, 140.0, -3.0), &p, 0.25).unwrap().normal_force();
        assert!(over > 1.2 * off, "{over} vs {off}");
    }

    #[test]
    fn off_axis_pivot_produces_moment() {
        let p = uniform(3e7);
        let dome = DomeGeometry::default();
        let pose = ToolPose::at(50.0, 100.0, -3.0);
        let patch = indentation_field(&dome, &pose, &p, 0.25).unwrap();
        let centred = contact_wrench(&patch, &p, &pose, &dome, &ContactParams::default());
        assert!(centred.tx.abs() < 1e-9 && centred.ty.abs() < 1e-9);
        let rolled = contact_wrench_about(&patch, &p, &pose, &dome, &ContactParams::default(), [50.0, 97.0]);
        // contact 3 mm ahead in +y of the pivot: Tx = 3 mm * Fz
        assert_relative_eq!(rolled.tx, 3.0 * rolled.fz, max_relative = 1e-9);
    }

    fn shared(which: Preset) -> &'static Phantom<f64> {
        static CACHE: std::sync::OnceLock<Vec<Phantom<f64>>> = std::sync::OnceLock::new();
        let all = CACHE.get_or_init(|| Preset::ALL.iter().map(|&q| Phantom::build(preset(q)).unwrap()).collect());
        &all[Preset::ALL.iter().position(|&q| q == which).unwrap()]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fz_nonnegative_and_zero_iff_empty(z in -4.9..1.0f64, y in 20.0..180.0f64) {
            let p = shared(Preset::Exp3);
            let dome = DomeGeometry::default();
            let pose = ToolPose::at(50.0, y, z);
            let patch = indentation_field(&dome, &pose, p, 0.5).unwrap();
            let w = contact_wrench(&patch, p, &pose, &dome, &ContactParams::default());
            prop_assert!(w.fz >= 0.0);
            prop_assert_eq!(w.fz == 0.0, patch.is_empty());
        }

        #[test]
        fn lateral_force_bound(z in -4.9..-0.1f64, y in 20.0..180.0f64, vx in -30.0..30.0f64, vy in -30.0..30.0f64, cp in 0.0..1.0f64) {
            let p = shared(Preset::Exp4);
            let dome = DomeGeometry::default();
            let mut pose = ToolPose::at(50.0, y, z);
            pose.velocity = [vx, vy];
            let patch = indentation_field(&dome, &pose, p, 0.5).unwrap();
            let w = contact_wrench(&patch, p, &pose, &dome, &ContactParams { ploughing: cp });
            let max_slope = patch.contact_radius / dome.radius;
            let bound = p.friction() * w.fz + cp * w.fz * max_slope;
            prop_assert!(w.lateral() <= bound * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn rigid_translation_invariance(shift_i in -40i32..40, shift_j in -60i32..60, z in -4.5..-0.5f64, vy in 0.0..30.0f64) {
            // shifts are multiples of the stiffness-map pitch
            let (dx, dy) = (0.5 * shift_i as f64, 0.5 * shift_j as f64);
            let tendon = |ox: f64, oy: f64| TendonSegment::pla([30.0 + ox, 60.0 + oy], [45.0 + ox, 130.0 + oy], 4.0, 1.5);
            let a = Phantom::build(PhantomSpec::<f64>::block().with_tendons(vec![tendon(0.0, 0.0)])).unwrap();
            let b = Phantom::build(PhantomSpec::<f64>::block().with_tendons(vec![tendon(dx, dy)])).unwrap();
            let dome = DomeGeometry::default();
            let mut pa = ToolPose::at(38.0, 95.0, z);
            pa.velocity = [0.0, vy];
            let mut pb = pa;
            pb.x += dx;
            pb.y += dy;
            let wa = contact_wrench(&indentation_field(&dome, &pa, &a, 0.5).unwrap(), &a, &pa, &dome, &ContactParams::default());
            let wb = contact_wrench(&indentation_field(&dome, &pb, &b, 0.5).unwrap(), &b, &pb, &dome, &ContactParams::default());
            for (u, v) in wa.to_array().iter().zip(wb.to_array()) {
                prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()), "{:?} vs {:?}", wa, wb);
            }
        }
    }
}
