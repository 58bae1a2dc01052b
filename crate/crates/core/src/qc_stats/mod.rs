//! Quality-control statistics: sample-size planning, sample drawing,
//! precision/recall with Wald intervals, and relative change between a weak
//! and a strong classifier judged on the same test population.

mod render;

use std::path::Path;

use num_rational::Ratio;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::util;

pub use render::{format_percent, render_text};

#[derive(Debug, Error, PartialEq)]
pub enum QcError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("precision undefined: no judged detections (tp + fp = 0)")]
    PrecisionUndefined,
    #[error("recall unavailable: false negatives were not counted")]
    RecallUnavailable,
    #[error("recall undefined: tp + fn = 0")]
    RecallUndefined,
    #[error("relative change undefined: weak classifier {0} is zero")]
    RelativeChangeUndefined(&'static str),
    #[error("sample of {requested} requested but only {available} available")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("counts file: {0}")]
    CountsFile(String),
}

/// Standard normal quantile (inverse CDF).
///
/// Acklam's rational approximation with a tail/central split at 0.02425;
/// relative error below 1.2e-9 over (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p.is_nan() || p <= 0.0 {
        return if p == 0.0 { f64::NEG_INFINITY } else { f64::NAN };
    }
    if p >= 1.0 {
        return if p == 1.0 { f64::INFINITY } else { f64::NAN };
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Two-sided critical value `z_{α/2}` for a confidence level.
pub fn z_for_confidence(confidence: f64) -> Result<f64, QcError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(QcError::InvalidParameter(format!("confidence {confidence} must lie in (0, 1)")));
    }
    Ok(normal_quantile((1.0 + confidence) / 2.0))
}

/// The conventional two-decimal critical value at 95% confidence.
pub const Z_95_ROUNDED: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcPlan {
    pub pilot_p_hat: f64,
    pub epsilon: f64,
    pub confidence: f64,
    pub z_value: f64,
    /// `z² · p̂(1 − p̂) / ε²` before rounding up.
    pub formula_value: f64,
    pub required_n: u64,
}

/// `n = ⌈z² · p̂(1 − p̂) / ε²⌉` with `z` from the normal quantile.
pub fn required_sample_size(pilot_p_hat: f64, epsilon: f64, confidence: f64) -> Result<QcPlan, QcError> {
    let z = z_for_confidence(confidence)?;
    plan_with_z(pilot_p_hat, epsilon, confidence, z)
}

/// As [`required_sample_size`] but with an explicit critical value, e.g.
/// [`Z_95_ROUNDED`] to reproduce hand calculations.
pub fn plan_with_z(pilot_p_hat: f64, epsilon: f64, confidence: f64, z: f64) -> Result<QcPlan, QcError> {
    if !(pilot_p_hat > 0.0 && pilot_p_hat < 1.0) {
        return Err(QcError::InvalidParameter(format!("pilot p̂ {pilot_p_hat} must lie in (0, 1)")));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(QcError::InvalidParameter(format!("epsilon {epsilon} must be > 0")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(QcError::InvalidParameter(format!("confidence {confidence} must lie in (0, 1)")));
    }
    if !(z.is_finite() && z > 0.0) {
        return Err(QcError::InvalidParameter(format!("z {z} must be > 0")));
    }
    let formula_value = z * z * pilot_p_hat * (1.0 - pilot_p_hat) / (epsilon * epsilon);
    Ok(QcPlan {
        pilot_p_hat,
        epsilon,
        confidence,
        z_value: z,
        formula_value,
        required_n: formula_value.ceil() as u64,
    })
}

/// Uniform sample of `n` ids without replacement, returned sorted by id.
pub fn draw_qc_sample(population: &[String], n: usize, seed: u64) -> Result<Vec<String>, QcError> {
    if n > population.len() {
        return Err(QcError::SampleTooLarge {
            requested: n,
            available: population.len(),
        });
    }
    let mut canonical: Vec<&String> = population.iter().collect();
    canonical.sort();
    let mut rng = util::rng(seed);
    let mut out: Vec<String> = index::sample(&mut rng, canonical.len(), n)
        .into_iter()
        .map(|i| canonical[i].clone())
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcCounts {
    pub detector_id: String,
    pub tp: u64,
    pub fp: u64,
    /// Absent when false negatives were not counted.
    #[serde(rename = "fn", default, skip_serializing_if = "Option::is_none")]
    pub fn_: Option<u64>,
}

impl QcCounts {
    pub fn new(detector_id: impl Into<String>, tp: u64, fp: u64, fn_: Option<u64>) -> Self {
        Self {
            detector_id: detector_id.into(),
            tp,
            fp,
            fn_,
        }
    }

    /// `TP + FN`, the number of objects the detector was judged against.
    pub fn population(&self) -> Option<u64> {
        self.fn_.map(|f| self.tp + f)
    }

    pub fn load(path: &Path) -> Result<Self, QcError> {
        let text = std::fs::read_to_string(path).map_err(|e| QcError::CountsFile(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| QcError::CountsFile(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("counts serialise")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionEstimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: u64,
    pub successes: u64,
    pub z: f64,
}

impl ProportionEstimate {
    /// Wald interval `p̂ ± z·sqrt(p̂(1 − p̂)/n)` clamped to `[0, 1]`.
    pub fn wald(successes: u64, n: u64, z: f64) -> Self {
        assert!(n > 0 && successes <= n, "wald needs 0 <= successes <= n, n > 0");
        let p = successes as f64 / n as f64;
        let half = z * (p * (1.0 - p) / n as f64).sqrt();
        Self {
            value: p,
            ci_low: (p - half).max(0.0),
            ci_high: (p + half).min(1.0),
            n,
            successes,
            z,
        }
    }

    pub fn half_width(&self) -> f64 {
        self.z * (self.value * (1.0 - self.value) / self.n as f64).sqrt()
    }

    /// The point value as an exact fraction.
    pub fn ratio(&self) -> Ratio<i128> {
        Ratio::new(self.successes as i128, self.n as i128)
    }

    pub fn covers(&self, p: f64) -> bool {
        self.ci_low <= p && p <= self.ci_high
    }
}

/// `TP / (TP + FP)` with `n = TP + FP`.
pub fn precision_estimate(counts: &QcCounts, confidence: f64) -> Result<ProportionEstimate, QcError> {
    let z = z_for_confidence(confidence)?;
    let n = counts.tp + counts.fp;
    if n == 0 {
        return Err(QcError::PrecisionUndefined);
    }
    Ok(ProportionEstimate::wald(counts.tp, n, z))
}

/// `TP / (TP + FN)` with `n = TP + FN`.
pub fn recall_estimate(counts: &QcCounts, confidence: f64) -> Result<ProportionEstimate, QcError> {
    let z = z_for_confidence(confidence)?;
    let f = counts.fn_.ok_or(QcError::RecallUnavailable)?;
    let n = counts.tp + f;
    if n == 0 {
        return Err(QcError::RecallUndefined);
    }
    Ok(ProportionEstimate::wald(counts.tp, n, z))
}

/// Whether both detectors were judged against the same number of objects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PopulationCheck {
    Equal { population: u64 },
    Unequal { wc: u64, sc: u64 },
    /// At least one side has no FN count.
    Unverified,
}

impl PopulationCheck {
    pub fn of(wc: &QcCounts, sc: &QcCounts) -> Self {
        match (wc.population(), sc.population()) {
            (Some(a), Some(b)) if a == b => Self::Equal { population: a },
            (Some(a), Some(b)) => Self::Unequal { wc: a, sc: b },
            _ => Self::Unverified,
        }
    }

    /// Set when the populations are known to differ.
    pub fn flagged(&self) -> bool {
        matches!(self, Self::Unequal { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallChange {
    pub value: f64,
    pub population: PopulationCheck,
}

/// `(TP_SC − TP_WC) / TP_WC`. This equals the relative change of recall only
/// when `TP_WC + FN_WC = TP_SC + FN_SC`; the check result is returned and a
/// warning is logged when it fails or cannot be made.
pub fn relative_change_recall(wc: &QcCounts, sc: &QcCounts) -> Result<RecallChange, QcError> {
    let exact = relative_change_recall_exact(wc, sc)?;
    let population = PopulationCheck::of(wc, sc);
    match &population {
        PopulationCheck::Unequal { wc: a, sc: b } => {
            warn!(wc = a, sc = b, "TP+FN differs between detectors; relative change of recall is not a recall ratio")
        }
        PopulationCheck::Unverified => warn!("FN not counted on both sides; equal-population assumption unverified"),
        PopulationCheck::Equal { .. } => {}
    }
    Ok(RecallChange {
        value: ratio_to_f64(exact),
        population,
    })
}

/// [`relative_change_recall`] as an exact fraction.
pub fn relative_change_recall_exact(wc: &QcCounts, sc: &QcCounts) -> Result<Ratio<i128>, QcError> {
    if wc.tp == 0 {
        return Err(QcError::RelativeChangeUndefined("TP"));
    }
    Ok(Ratio::new(sc.tp as i128 - wc.tp as i128, wc.tp as i128))
}

/// `(p_SC − p_WC) / p_WC` for two proportions.
pub fn relative_change_precision(wc: &ProportionEstimate, sc: &ProportionEstimate) -> Result<f64, QcError> {
    if wc.value <= 0.0 {
        return Err(QcError::RelativeChangeUndefined("precision"));
    }
    Ok((sc.value - wc.value) / wc.value)
}

/// `(b − a) / a` on exact fractions.
pub fn relative_change_exact(a: Ratio<i128>, b: Ratio<i128>) -> Option<Ratio<i128>> {
    (a != Ratio::from_integer(0)).then(|| (b - a) / a)
}

pub fn ratio_to_f64(r: Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Externally reported figures to print next to the computed ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFigures {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rc_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rc_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub confidence: f64,
    pub wc: QcCounts,
    pub sc: QcCounts,
    pub precision_wc: ProportionEstimate,
    pub precision_sc: ProportionEstimate,
    pub recall_wc: Option<ProportionEstimate>,
    pub recall_sc: Option<ProportionEstimate>,
    pub rc_recall: f64,
    pub rc_precision: f64,
    pub population: PopulationCheck,
    /// True when TP+FN differs between the two detectors.
    pub population_flag: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceFigures>,
}

/// Assembles both detectors' estimates and the relative changes.
pub fn build_report(wc: &QcCounts, sc: &QcCounts, confidence: f64) -> Result<QcReport, QcError> {
    let precision_wc = precision_estimate(wc, confidence)?;
    let precision_sc = precision_estimate(sc, confidence)?;
    let optional = |c: &QcCounts| match recall_estimate(c, confidence) {
        Ok(r) => Ok(Some(r)),
        Err(QcError::RecallUnavailable) => Ok(None),
        Err(e) => Err(e),
    };
    let recall_wc = optional(wc)?;
    let recall_sc = optional(sc)?;
    let rc = relative_change_recall(wc, sc)?;
    let rc_precision = relative_change_precision(&precision_wc, &precision_sc)?;
    Ok(QcReport {
        confidence,
        wc: wc.clone(),
        sc: sc.clone(),
        precision_wc,
        precision_sc,
        recall_wc,
        recall_sc,
        rc_recall: rc.value,
        rc_precision,
        population_flag: rc.population.flagged(),
        population: rc.population,
        reference: None,
    })
}

impl QcReport {
    pub fn with_reference(mut self, reference: ReferenceFigures) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        render_text(self)
    }
}
