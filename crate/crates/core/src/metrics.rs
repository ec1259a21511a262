//! Force-deviation analysis of palpation traces.
//!
//! All functions work on compression-positive `Fz`; the display sign is the
//! exporter's business.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::control::StepLabel;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trace has no step-2 (first dwell) samples")]
    NoDwellSamples,
    #[error("benchmark force is zero")]
    ZeroBenchmark,
    #[error("commanded force is zero")]
    ZeroCommanded,
    #[error("evaluation window selects no samples")]
    EmptyWindow,
    #[error("trace columns differ in length: t={t}, fz={fz}, steps={steps}")]
    LengthMismatch { t: usize, fz: usize, steps: usize },
    #[error("timestamps not strictly increasing at index {0}")]
    NonIncreasing(usize),
}

/// Normal force over time with protocol step labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceTrace<T> {
    pub t: Vec<T>,
    pub fz: Vec<T>,
    pub steps: Vec<StepLabel>,
}

impl<T: Scalar> ForceTrace<T> {
    pub fn new(t: Vec<T>, fz: Vec<T>, steps: Vec<StepLabel>) -> Result<Self, MetricsError> {
        if t.len() != fz.len() || t.len() != steps.len() {
            return Err(MetricsError::LengthMismatch { t: t.len(), fz: fz.len(), steps: steps.len() });
        }
        if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(MetricsError::NonIncreasing(i + 1));
        }
        Ok(Self { t, fz, steps })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Same trace with every timestamp shifted by `dt`.
    pub fn shifted(&self, dt: T) -> Self {
        Self { t: self.t.iter().map(|&t| t + dt).collect(), fz: self.fz.clone(), steps: self.steps.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Rel,
    Abs,
    NegAbs,
}

impl MetricKind {
    pub fn id(self) -> &'static str {
        match self {
            MetricKind::Rel => "rel",
            MetricKind::Abs => "abs",
            MetricKind::NegAbs => "neg_abs",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rel" => Ok(MetricKind::Rel),
            "abs" => Ok(MetricKind::Abs),
            "neg_abs" => Ok(MetricKind::NegAbs),
            other => Err(format!("unknown metric kind '{other}'")),
        }
    }
}

/// A derived series aligned with the source trace's timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries<T> {
    pub kind: MetricKind,
    pub t: Vec<T>,
    pub values: Vec<T>,
}

impl<T: Scalar> MetricSeries<T> {
    fn map(kind: MetricKind, trace: &ForceTrace<T>, f: impl Fn(T) -> T) -> Self {
        Self { kind, t: trace.t.clone(), values: trace.fz.iter().map(|&v| f(v)).collect() }
    }

    /// Mean of the values whose sample index satisfies `keep`.
    pub fn mean_where(&self, keep: impl Fn(usize) -> bool) -> Option<T> {
        let (mut sum, mut n) = (T::zero(), 0usize);
        for (i, &v) in self.values.iter().enumerate() {
            if keep(i) {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / T::lit(n as f64))
    }
}

/// Benchmark force: mean `Fz` over all step-2 samples.
pub fn f_bench<T: Scalar>(trace: &ForceTrace<T>) -> Result<T, MetricsError> {
    let (mut sum, mut n) = (T::zero(), 0usize);
    for (&fz, &step) in trace.fz.iter().zip(&trace.steps) {
        if step == StepLabel::Dwell {
            sum += fz;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoDwellSamples);
    }
    Ok(sum / T::lit(n as f64))
}

/// Relative change `(Fz(t) - F_bench) / F_bench`.
pub fn rel_change<T: Scalar>(trace: &ForceTrace<T>, f_bench: T) -> Result<MetricSeries<T>, MetricsError> {
    if f_bench == T::zero() {
        return Err(MetricsError::ZeroBenchmark);
    }
    Ok(MetricSeries::map(MetricKind::Rel, trace, |fz| (fz - f_bench) / f_bench))
}

/// Absolute deviation `|Fz(t) - F_bench|` and its negated display series.
pub fn abs_dev<T: Scalar>(trace: &ForceTrace<T>, f_bench: T) -> (MetricSeries<T>, MetricSeries<T>) {
    let abs = MetricSeries::map(MetricKind::Abs, trace, |fz| (fz - f_bench).abs());
    let neg = MetricSeries { kind: MetricKind::NegAbs, t: abs.t.clone(), values: abs.values.iter().map(|&v| -v).collect() };
    (abs, neg)
}

/// Percentage-error RMSE of `Fz` against `commanded` over samples whose step
/// is in `window`.
pub fn pct_rmse<T: Scalar>(trace: &ForceTrace<T>, commanded: T, window: &[StepLabel]) -> Result<T, MetricsError> {
    if commanded == T::zero() {
        return Err(MetricsError::ZeroCommanded);
    }
    let (mut acc, mut n) = (T::zero(), 0usize);
    for (&fz, step) in trace.fz.iter().zip(&trace.steps) {
        if window.contains(step) {
            let e = (fz - commanded) / commanded;
            acc += e * e;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::EmptyWindow);
    }
    Ok(T::lit(100.0) * (acc / T::lit(n as f64)).sqrt())
}

/// Contact phases used for force-tracking evaluation.
pub const TRACKING_WINDOW: [StepLabel; 3] = [StepLabel::Dwell, StepLabel::Plough, StepLabel::Hold];

/// Benchmark, relative, absolute and negated series of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceMetrics<T> {
    pub f_bench: T,
    pub rel: MetricSeries<T>,
    pub abs: MetricSeries<T>,
    pub neg_abs: MetricSeries<T>,
}

pub fn analyze<T: Scalar>(trace: &ForceTrace<T>) -> Result<ForceMetrics<T>, MetricsError> {
    let f_bench = f_bench(trace)?;
    let rel = rel_change(trace, f_bench)?;
    let (abs, neg_abs) = abs_dev(trace, f_bench);
    Ok(ForceMetrics { f_bench, rel, abs, neg_abs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use StepLabel::*;

    fn trace(fz: &[f64], steps: &[StepLabel]) -> ForceTrace<f64> {
        let t = (0..fz.len()).map(|i| i as f64 / 300.0).collect();
        ForceTrace::new(t, fz.to_vec(), steps.to_vec()).unwrap()
    }

    #[test]
    fn bench_is_mean_of_dwell() {
        let tr = trace(&[1.0, 24.0, 25.0, 26.0, 40.0], &[Descend, Dwell, Dwell, Dwell, Plough]);
        assert_eq!(f_bench(&tr).unwrap(), 25.0);
        let flat = trace(&[25.0; 4], &[Dwell; 4]);
        assert_eq!(f_bench(&flat).unwrap(), 25.0);
        let none = trace(&[1.0, 2.0], &[Descend, Descend]);
        assert_eq!(f_bench(&none), Err(MetricsError::NoDwellSamples));
    }

    #[test]
    fn relative_change_substitution() {
        let tr = trace(&[20.0, 25.0], &[Plough, Plough]);
        let rel = rel_change(&tr, 25.0).unwrap();
        assert_eq!(rel.values, vec![-0.2, 0.0]);
        assert_eq!(rel_change(&tr, 0.0), Err(MetricsError::ZeroBenchmark));
    }

    #[test]
    fn absolute_deviation_examples() {
        let tr = trace(&[30.0, 25.0], &[Plough, Plough]);
        let (abs, neg) = abs_dev(&tr, 25.0);
        assert_eq!(abs.values, vec![5.0, 0.0]);
        assert_eq!(neg.values, vec![-5.0, -0.0]);
        assert_eq!(abs.kind, MetricKind::Abs);
        assert_eq!(neg.kind, MetricKind::NegAbs);
    }

    #[test]
    fn pct_rmse_examples() {
        let tr = trace(&[26.76; 10], &[Dwell; 10]);
        let v = pct_rmse(&tr, 25.0, &TRACKING_WINDOW).unwrap();
        assert!((v - 7.04).abs() < 1e-9, "{v}");
        let exact = trace(&[25.0; 5], &[Plough; 5]);
        assert_eq!(pct_rmse(&exact, 25.0, &TRACKING_WINDOW).unwrap(), 0.0);
        assert_eq!(pct_rmse(&exact, 25.0, &[Retract]), Err(MetricsError::EmptyWindow));
        assert_eq!(pct_rmse(&exact, 0.0, &TRACKING_WINDOW), Err(MetricsError::ZeroCommanded));
    }

    #[test]
    fn trace_validation() {
        assert!(matches!(
            ForceTrace::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![Dwell, Dwell]),
            Err(MetricsError::NonIncreasing(1))
        ));
        assert!(matches!(
            ForceTrace::new(vec![0.0], vec![1.0, 1.0], vec![Dwell]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn works_in_f32() {
        let tr = ForceTrace::new(vec![0.0f32, 1.0], vec![20.0, 25.0], vec![Dwell, Plough]).unwrap();
        assert_eq!(rel_change(&tr, 25.0f32).unwrap().values[0], -0.2f32);
    }

    fn arb_trace() -> impl Strategy<Value = ForceTrace<f64>> {
        prop::collection::vec((0.1..80.0f64, 0usize..5), 2..60).prop_map(|rows| {
            let mut steps: Vec<StepLabel> = rows.iter().map(|r| StepLabel::ALL[r.1]).collect();
            steps[0] = Dwell;
            ForceTrace::new(
                (0..rows.len()).map(|i| 0.01 * i as f64).collect(),
                rows.iter().map(|r| r.0).collect(),
                steps,
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn abs_equals_scaled_rel(tr in arb_trace()) {
            let fb = f_bench(&tr).unwrap();
            let rel = rel_change(&tr, fb).unwrap();
            let (abs, neg) = abs_dev(&tr, fb);
            for i in 0..tr.len() {
                let lhs = abs.values[i];
                let rhs = rel.values[i].abs() * fb.abs();
                prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(rhs).max(f64::MIN_POSITIVE));
                prop_assert!(abs.values[i] >= 0.0 && neg.values[i] <= 0.0);
                prop_assert_eq!(neg.values[i], -abs.values[i]);
            }
        }

        #[test]
        fn invariant_under_time_shift(tr in arb_trace(), dt in -100.0..100.0f64) {
            let shifted = tr.shifted(dt);
            let a = analyze(&tr).unwrap();
            let b = analyze(&shifted).unwrap();
            prop_assert_eq!(a.f_bench, b.f_bench);
            prop_assert_eq!(a.rel.values, b.rel.values);
            prop_assert_eq!(a.abs.values, b.abs.values);
            prop_assert_eq!(pct_rmse(&tr, 25.0, &TRACKING_WINDOW).ok(), pct_rmse(&shifted, 25.0, &TRACKING_WINDOW).ok());
        }

        #[test]
        fn pct_rmse_scale_invariant(tr in arb_trace(), c in 0.01..100.0f64, cmd in 1.0..60.0f64) {
            let scaled = ForceTrace { fz: tr.fz.iter().map(|v| v * c).collect(), ..tr.clone() };
            let all = StepLabel::ALL;
            let a = pct_rmse(&tr, cmd, &all).unwrap();
            let b = pct_rmse(&scaled, cmd * c, &all).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
        }
    }
}
