//! Thresholds, weighting coefficients and the generalized indicator function
//!
//! ```text
//! f(r) = ( sqrt( Σ a_i g_i² / Σ b_i g_i² ) )^α
//! ```
//!
//! Two coefficient families are provided: MUSICAL (`a_i + b_i = 1`) and
//! eigenvalue-weighted EV (`a_i + b_i = 1/λ_i`). Each comes with a hard split
//! at a threshold `σ₀` and a soft log-linear ramp between `σ_min` and
//! `σ_max`, giving MUSICAL A/B/S and EV A/B/S.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::{ProjectionSet, SubspaceDecomposition};

pub const DEFAULT_ALPHA: f64 = 4.0;
pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// `a_i + b_i = 1`
    Musical,
    /// `a_i + b_i = 1 / λ_i`
    Ev,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "musical" => Ok(Family::Musical),
            "ev" => Ok(Family::Ev),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Musical => "MUSICAL",
            Family::Ev => "EV",
        })
    }
}

/// How the threshold is chosen before any weights are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `σ₀ = min σ₂` over all windows.
    RuleA,
    /// `σ₀ = (min σ₂ + max σ₂) / 2`.
    RuleB,
    /// User-supplied `log10 σ₀`.
    Manual { log10_sigma0: f64 },
    /// Log-linear ramp with `σ_min`, `σ_max` = extremes of `σ₂`.
    Soft,
}

impl ThresholdMode {
    pub fn is_soft(&self) -> bool {
        matches!(self, ThresholdMode::Soft)
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ThresholdMode::RuleA),
            "b" => Ok(ThresholdMode::RuleB),
            "soft" | "s" => Ok(ThresholdMode::Soft),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(|log10_sigma0| ThresholdMode::Manual { log10_sigma0 })
                .ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "threshold must be A, B, soft or a log10 value, got '{s}'"
                    ))
                }),
        }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::RuleA => f.write_str("A"),
            ThresholdMode::RuleB => f.write_str("B"),
            ThresholdMode::Soft => f.write_str("S"),
            ThresholdMode::Manual { log10_sigma0 } => write!(f, "log10σ₀={log10_sigma0}"),
        }
    }
}

/// One of the six named indicator functions (or a manual-threshold one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVariant {
    pub family: Family,
    pub threshold: ThresholdMode,
}

impl IndicatorVariant {
    pub const fn new(family: Family, threshold: ThresholdMode) -> Self {
        Self { family, threshold }
    }

    pub const MUSICAL_A: Self = Self::new(Family::Musical, ThresholdMode::RuleA);
    pub const MUSICAL_B: Self = Self::new(Family::Musical, ThresholdMode::RuleB);
    pub const MUSICAL_S: Self = Self::new(Family::Musical, ThresholdMode::Soft);
    pub const EV_A: Self = Self::new(Family::Ev, ThresholdMode::RuleA);
    pub const EV_B: Self = Self::new(Family::Ev, ThresholdMode::RuleB);
    pub const EV_S: Self = Self::new(Family::Ev, ThresholdMode::Soft);

    pub const ALL: [Self; 6] = [
        Self::MUSICAL_A,
        Self::MUSICAL_B,
        Self::MUSICAL_S,
        Self::EV_A,
        Self::EV_B,
        Self::EV_S,
    ];
}

impl fmt::Display for IndicatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.threshold {
            ThresholdMode::Soft => write!(f, "{}-S", self.family),
            t => write!(f, "{} {}", self.family, t),
        }
    }
}

/// A fully resolved threshold, ready to generate weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdSpec {
    Hard {
        family: Family,
        sigma0: f64,
    },
    Soft {
        family: Family,
        sigma_min: f64,
        sigma_max: f64,
    },
}

impl ThresholdSpec {
    /// `sigma0 = 0` is accepted: every eigenimage is then signal.
    pub fn hard(family: Family, sigma0: f64) -> Result<Self> {
        if !(sigma0.is_finite() && sigma0 >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "hard threshold must be a nonnegative finite value, got {sigma0}"
            )));
        }
        Ok(ThresholdSpec::Hard { family, sigma0 })
    }

    pub fn soft(family: Family, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max.is_finite() && sigma_min < sigma_max) {
            return Err(Error::DegenerateSoftBounds {
                sigma_min,
                sigma_max,
            });
        }
        Ok(ThresholdSpec::Soft {
            family,
            sigma_min,
            sigma_max,
        })
    }

    pub fn family(&self) -> Family {
        match *self {
            ThresholdSpec::Hard { family, .. } | ThresholdSpec::Soft { family, .. } => family,
        }
    }

    pub fn is_soft(&self) -> bool {
        matches!(self, ThresholdSpec::Soft { .. })
    }
}

/// Per-eigenimage numerator (`a`) and denominator (`b`) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorConfig {
    pub alpha: f64,
    /// Relative floor on the denominator.
    pub epsilon_floor: f64,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }
}

impl IndicatorConfig {
    pub fn new(alpha: f64, epsilon_floor: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        if !(epsilon_floor.is_finite() && epsilon_floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon floor must be positive, got {epsilon_floor}"
            )));
        }
        Ok(Self {
            alpha,
            epsilon_floor,
        })
    }
}

/// `σ₂` of each decomposition, in input order.
pub fn second_singular_values<'a>(
    decompositions: impl IntoIterator<Item = &'a SubspaceDecomposition>,
) -> Result<Vec<f64>> {
    decompositions
        .into_iter()
        .map(|d| {
            d.singular_values
                .get(1)
                .copied()
                .ok_or(Error::TooFewSingularValues)
        })
        .collect()
}

fn min_max(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }))
}

/// Smallest second singular value.
pub fn rule_a(sigma2: &[f64]) -> Result<f64> {
    min_max(sigma2).map(|(lo, _)| lo)
}

/// Centre of the span of second singular values.
pub fn rule_b(sigma2: &[f64]) -> Result<f64> {
    min_max(sigma2).map(|(lo, hi)| (lo + hi) / 2.0)
}

/// `(min σ₂, max σ₂)`; fails when the span is empty.
pub fn auto_soft_bounds(sigma2: &[f64]) -> Result<(f64, f64)> {
    let (lo, hi) = min_max(sigma2)?;
    if !(hi > lo) {
        return Err(Error::DegenerateSoftBounds {
            sigma_min: lo,
            sigma_max: hi,
        });
    }
    Ok((lo, hi))
}

/// Resolves a variant against the global `σ₂` statistics.
pub fn resolve_threshold(variant: IndicatorVariant, sigma2: &[f64]) -> Result<ThresholdSpec> {
    let family = variant.family;
    match variant.threshold {
        ThresholdMode::RuleA => ThresholdSpec::hard(family, rule_a(sigma2)?),
        ThresholdMode::RuleB => ThresholdSpec::hard(family, rule_b(sigma2)?),
        ThresholdMode::Manual { log10_sigma0 } => {
            ThresholdSpec::hard(family, 10f64.powf(log10_sigma0))
        }
        ThresholdMode::Soft => {
            let (lo, hi) = auto_soft_bounds(sigma2)?;
            ThresholdSpec::soft(family, lo, hi)
        }
    }
}

/// Log-linear ramp: 0 at or below `sigma_min`, 1 at or above `sigma_max`.
pub fn soft_ramp(sigma: f64, sigma_min: f64, sigma_max: f64) -> f64 {
    if sigma >= sigma_max {
        1.0
    } else if sigma <= sigma_min {
        0.0
    } else {
        let span = sigma_max.log10() - sigma_min.log10();
        ((sigma.log10() - sigma_min.log10()) / span).clamp(0.0, 1.0)
    }
}

pub fn weights(dec: &SubspaceDecomposition, spec: &ThresholdSpec) -> WeightVector {
    weights_for_spectrum(&dec.singular_values, &dec.eigenvalues, spec)
}

/// Weights from a spectrum given as singular values and eigenvalues
/// (`λ_i = σ_i²`). Zero eigenvalues get `a_i = b_i = 0` in the EV family.
pub fn weights_for_spectrum(
    singular_values: &[f64],
    eigenvalues: &[f64],
    spec: &ThresholdSpec,
) -> WeightVector {
    let m = singular_values.len();
    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for (&sigma, &lambda) in singular_values.iter().zip(eigenvalues) {
        let signal = match *spec {
            ThresholdSpec::Hard { sigma0, .. } => {
                if sigma >= sigma0 {
                    1.0
                } else {
                    0.0
                }
            }
            ThresholdSpec::Soft {
                sigma_min,
                sigma_max,
                ..
            } => soft_ramp(sigma, sigma_min, sigma_max),
        };
        match spec.family() {
            Family::Musical => {
                a.push(signal);
                b.push(1.0 - signal);
            }
            Family::Ev => {
                if lambda > 0.0 {
                    let inv = lambda.recip();
                    a.push(inv * signal);
                    b.push(inv * (1.0 - signal));
                } else {
                    a.push(0.0);
                    b.push(0.0);
                }
            }
        }
    }
    WeightVector { a, b }
}

/// Indicator value from already-squared projections `g_i²`.
pub fn indicator_from_squared<I>(squared: I, w: &WeightVector, cfg: &IndicatorConfig) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let mut num = 0.0;
    let mut den = 0.0;
    for ((g2, a), b) in squared.into_iter().zip(&w.a).zip(&w.b) {
        num += a * g2;
        den += b * g2;
    }
    let den = den.max(cfg.epsilon_floor * num + f64::MIN_POSITIVE);
    (num / den).powf(cfg.alpha / 2.0)
}

pub fn indicator_value(proj: &ProjectionSet, w: &WeightVector, cfg: &IndicatorConfig) -> f64 {
    indicator_from_squared(proj.values.iter().map(|g| g * g), w, cfg)
}
