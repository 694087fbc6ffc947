//! Server-side class-change monitor.
//!
//! The aggregation server never sees client data. What it does see is how
//! each class's output row moved during a round. Under the premise that
//! samples of one class induce nearly identical output-layer gradients, the
//! aggregated movement of row `p` is proportional to the global number of
//! class-`p` samples divided by the number of participating clients. Comparing
//! two consecutive rounds therefore yields the per-class change ratio
//!
//! ```text
//! R_p = (K_curr / K_prev) * r_p,   r_p = <d_curr, d_prev> / <d_prev, d_prev>
//! ```
//!
//! where `d` is the row-`p` parameter delta and `r_p` is the least-squares
//! scale that best maps the previous delta onto the current one. Learning
//! rate and batch normalisation appear in both deltas and cancel.
//!
//! Under softmax cross-entropy a class that is absent from a round still
//! moves: every sample pushes its logit down by `p_l(x) * h(x)`. Hidden
//! activations are ReLU outputs and never negative, so that push is
//! entrywise nonpositive. The class-attributable part of a row delta is
//! therefore read from its positive part, which is exactly zero for a class
//! with no samples. [`DeltaSignal::Raw`] keeps the plain row delta.
//!
//! From `R` the monitor derives a [`ClassCase`] per class, `R_min` over the
//! classes that are still present, and the pseudo-label subset ratios
//! `mu_p = R_min / R_p`.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::ModelParams;

/// Which part of a row delta the ratio is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSignal {
    /// `max(delta, 0)` entrywise.
    #[default]
    PositivePart,
    /// The row delta as is.
    Raw,
}

impl DeltaSignal {
    pub fn extract(self, delta: &Array1<f64>) -> Array1<f64> {
        match self {
            DeltaSignal::PositivePart => delta.mapv(|v| v.max(0.0)),
            DeltaSignal::Raw => delta.clone(),
        }
    }
}

/// Classification thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorThresholds {
    /// Ratios below this are treated as zero (class vanished).
    pub eps_zero: f64,
    /// Ratios within this distance of 1 are treated as unchanged.
    pub eps_steady: f64,
    /// Relative floor on the previous delta's norm, scaled by
    /// `1 + max|theta|`. Below it the class counts as absent last round.
    pub eps_denominator: f64,
    /// Run the monitor every round from round 2 even when the client count
    /// did not change. Diagnostics only.
    pub every_round: bool,
    pub signal: DeltaSignal,
}

impl Default for MonitorThresholds {
    fn default() -> Self {
        Self {
            eps_zero: 0.05,
            eps_steady: 0.05,
            eps_denominator: 1e-9,
            every_round: false,
            signal: DeltaSignal::PositivePart,
        }
    }
}

impl MonitorThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_zero >= 0.0 && self.eps_steady >= 0.0 && self.eps_denominator >= 0.0) {
            return Err(contract("monitor thresholds must be nonnegative"));
        }
        if self.eps_zero >= 1.0 - self.eps_steady {
            return Err(contract("eps_zero must be below 1 - eps_steady"));
        }
        Ok(())
    }

    /// Absolute denominator floor for a given broadcast model.
    pub fn denominator_floor(&self, theta_before: &ModelParams) -> f64 {
        let max_abs = theta_before.values().fold(0.0f64, |m, v| m.max(v.abs()));
        self.eps_denominator * (1.0 + max_abs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassCase {
    Increase,
    Decrease,
    Steady,
    Vanished,
    New,
}

impl ClassCase {
    /// Cases that carry a positive ratio and take part in `R_min`.
    pub fn is_positive(self) -> bool {
        matches!(self, ClassCase::Increase | ClassCase::Decrease | ClassCase::Steady)
    }
}

/// Movement of one class's output row over a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDelta {
    pub class: usize,
    pub delta: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioScalar {
    /// `clamped` is set when the projection came out negative and was
    /// replaced by zero.
    Value { r: f64, clamped: bool },
    DegenerateDenominator,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioEstimate {
    Ratio { value: f64, clamped: bool },
    /// The class had no measurable movement in the previous round.
    New,
}

/// `output_row(after, l) - output_row(before, l)` for every class.
pub fn per_class_deltas(before: &ModelParams, after: &ModelParams) -> Result<Vec<ClassDelta>> {
    if !before.same_shape(after) {
        return Err(contract("parameter shapes differ"));
    }
    (0..before.classes())
        .map(|class| {
            Ok(ClassDelta {
                class,
                delta: after.output_row(class)? - before.output_row(class)?,
            })
        })
        .collect()
}

/// Least-squares scale `r` with `curr ~ r * prev`.
pub fn ratio_scalar(prev: &Array1<f64>, curr: &Array1<f64>, eps_denominator: f64) -> Result<RatioScalar> {
    if prev.len() != curr.len() {
        return Err(contract(format!("delta lengths differ: {} vs {}", prev.len(), curr.len())));
    }
    let denom = prev.dot(prev);
    if denom.sqrt() < eps_denominator || denom == 0.0 {
        return Ok(RatioScalar::DegenerateDenominator);
    }
    let r = curr.dot(prev) / denom;
    if r < 0.0 {
        Ok(RatioScalar::Value { r: 0.0, clamped: true })
    } else {
        Ok(RatioScalar::Value { r, clamped: false })
    }
}

/// Applies the client-count factor `K_curr / K_prev`.
pub fn estimate_ratio(scalar: RatioScalar, k_prev: usize, k_curr: usize) -> Result<RatioEstimate> {
    if k_prev == 0 || k_curr == 0 {
        return Err(contract("client counts must be >= 1"));
    }
    Ok(match scalar {
        RatioScalar::DegenerateDenominator => RatioEstimate::New,
        RatioScalar::Value { r, clamped } => RatioEstimate::Ratio {
            value: k_curr as f64 / k_prev as f64 * r,
            clamped,
        },
    })
}

pub fn classify_case(estimate: RatioEstimate, eps_zero: f64, eps_steady: f64) -> ClassCase {
    match estimate {
        RatioEstimate::New => ClassCase::New,
        RatioEstimate::Ratio { clamped: true, .. } => ClassCase::Vanished,
        RatioEstimate::Ratio { value, .. } if value < eps_zero => ClassCase::Vanished,
        RatioEstimate::Ratio { value, .. } if (value - 1.0).abs() <= eps_steady => ClassCase::Steady,
        RatioEstimate::Ratio { value, .. } if value > 1.0 => ClassCase::Increase,
        RatioEstimate::Ratio { .. } => ClassCase::Decrease,
    }
}

/// Outcome of one monitored round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRatioReport {
    /// Estimated change ratio per class; `None` for new classes.
    #[serde(rename = "R")]
    pub ratios: Vec<Option<f64>>,
    pub cases: Vec<ClassCase>,
    /// Minimum ratio over positive cases; `None` when the report is
    /// inconclusive.
    pub r_min: Option<f64>,
    pub mu: Vec<f64>,
    pub k_prev: usize,
    pub k_curr: usize,
    /// Classes whose projection was negative and clamped to zero.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub reversed: Vec<usize>,
}

impl ChangeRatioReport {
    /// Builds the report from per-class estimates.
    pub fn from_estimates(
        estimates: &[RatioEstimate],
        k_prev: usize,
        k_curr: usize,
        thresholds: &MonitorThresholds,
    ) -> Result<Self> {
        let report = Self::assemble(estimates, k_prev, k_curr, thresholds);
        if report.r_min.is_none() {
            return Err(Error::MonitorInconclusive);
        }
        Ok(report)
    }

    /// Like [`ChangeRatioReport::from_estimates`] but never fails: without a
    /// positive class, `r_min` is `None` and `mu` is all ones.
    pub fn assemble(estimates: &[RatioEstimate], k_prev: usize, k_curr: usize, thresholds: &MonitorThresholds) -> Self {
        let cases: Vec<ClassCase> = estimates
            .iter()
            .map(|&e| classify_case(e, thresholds.eps_zero, thresholds.eps_steady))
            .collect();
        let ratios: Vec<Option<f64>> = estimates
            .iter()
            .map(|e| match *e {
                RatioEstimate::Ratio { value, .. } => Some(value),
                RatioEstimate::New => None,
            })
            .collect();
        let reversed = estimates
            .iter()
            .enumerate()
            .filter(|(_, e)| matches!(e, RatioEstimate::Ratio { clamped: true, .. }))
            .map(|(l, _)| l)
            .collect();
        let r_min = cases
            .iter()
            .zip(&ratios)
            .filter(|(c, _)| c.is_positive())
            .filter_map(|(_, r)| *r)
            .reduce(f64::min);
        let mu = cases
            .iter()
            .zip(&ratios)
            .map(|(c, r)| match (r_min, c.is_positive(), r) {
                (Some(min), true, Some(r)) => min / r,
                _ => 1.0,
            })
            .collect();
        Self {
            ratios,
            cases,
            r_min,
            mu,
            k_prev,
            k_curr,
            reversed,
        }
    }

    /// Classes whose output rows are carried forward.
    pub fn vanished(&self) -> Vec<usize> {
        self.classes_with(ClassCase::Vanished)
    }

    pub fn classes_with(&self, case: ClassCase) -> Vec<usize> {
        self.cases
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == case)
            .map(|(l, _)| l)
            .collect()
    }
}

/// Per-class estimates from two rounds of deltas. A class with no
/// measurable signal in either round is reported as a zero ratio.
pub fn estimate_all(
    deltas_prev: &[ClassDelta],
    deltas_curr: &[ClassDelta],
    k_prev: usize,
    k_curr: usize,
    signal: DeltaSignal,
    eps_denominator: f64,
) -> Result<Vec<RatioEstimate>> {
    if deltas_prev.len() != deltas_curr.len() {
        return Err(contract("delta lists cover different class counts"));
    }
    deltas_prev
        .iter()
        .zip(deltas_curr)
        .map(|(p, c)| {
            if p.class != c.class {
                return Err(contract("delta lists are not aligned by class"));
            }
            let (prev, curr) = (signal.extract(&p.delta), signal.extract(&c.delta));
            let scalar = ratio_scalar(&prev, &curr, eps_denominator)?;
            if scalar == RatioScalar::DegenerateDenominator && curr.dot(&curr).sqrt() < eps_denominator {
                // absent in both rounds: still gone, not new
                return estimate_ratio(RatioScalar::Value { r: 0.0, clamped: false }, k_prev, k_curr);
            }
            estimate_ratio(scalar, k_prev, k_curr)
        })
        .collect()
}

/// Full monitor pass. `eps_denominator` is absolute; see
/// [`MonitorThresholds::denominator_floor`].
pub fn compute_report(
    deltas_prev: &[ClassDelta],
    deltas_curr: &[ClassDelta],
    k_prev: usize,
    k_curr: usize,
    thresholds: &MonitorThresholds,
    eps_denominator: f64,
) -> Result<ChangeRatioReport> {
    let estimates = estimate_all(deltas_prev, deltas_curr, k_prev, k_curr, thresholds.signal, eps_denominator)?;
    ChangeRatioReport::from_estimates(&estimates, k_prev, k_curr, thresholds)
}
