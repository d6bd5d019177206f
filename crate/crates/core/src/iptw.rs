//! Propensity scores, stabilized IPT weights with percentile truncation, and the weighted
//! marginal structural model `logit P(Y^a = 1) = alpha0 + alpha1 a`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{fit_logistic, predict_prob, DesignMatrix, GlmError, LogisticFit};
use crate::panel::{Panel, PanelError};
use crate::stats::{expit, histogram, quantile_sorted, HistBin};

#[derive(Debug, Error)]
pub enum IptwError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("propensity model: {0}")]
    Propensity(#[source] GlmError),
    #[error("positivity violation: covariates separate the arms ({0}); restrict the sample or coarsen covariates")]
    PositivityViolation(#[source] GlmError),
    #[error("marginal structural model: {0}")]
    Msm(#[source] GlmError),
    #[error("propensity score {value} at row {row} is not strictly inside (0, 1)")]
    ScoreOutOfRange { row: usize, value: f64 },
    #[error("{what} has {got} entries but the panel has {expected} rows")]
    Misaligned { what: &'static str, expected: usize, got: usize },
    #[error("truncation percentile {0} is outside (50, 100]")]
    InvalidPercentile(f64),
}

/// P(A = 1 | L) per row, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityScores {
    scores: Vec<f64>,
    pub model: Option<LogisticFit>,
    pub range: (f64, f64),
}

impl PropensityScores {
    pub fn new(scores: Vec<f64>, model: Option<LogisticFit>) -> Result<Self, IptwError> {
        if let Some((row, &value)) = scores.iter().enumerate().find(|(_, s)| !(**s > 0.0 && **s < 1.0)) {
            return Err(IptwError::ScoreOutOfRange { row, value });
        }
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(PropensityScores { scores, model, range: (lo, hi) })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Logistic regression of treatment on intercept plus every schema covariate.
pub fn fit_propensity(panel: &Panel) -> Result<PropensityScores, IptwError> {
    panel.require_both_arms()?;
    let x = covariate_design(panel).map_err(IptwError::Propensity)?;
    let fit = fit_logistic(&x, &panel.treatment(), None).map_err(|e| match e {
        GlmError::Separation { .. } => IptwError::PositivityViolation(e),
        e => IptwError::Propensity(e),
    })?;
    let scores = predict_prob(&fit, &x).map_err(IptwError::Propensity)?;
    PropensityScores::new(scores, Some(fit))
}

fn covariate_design(panel: &Panel) -> Result<DesignMatrix, GlmError> {
    let mut columns = vec!["intercept".to_string()];
    columns.extend(panel.schema().iter().cloned());
    let mut values = Vec::with_capacity(panel.len() * columns.len());
    for r in panel.rows() {
        values.push(1.0);
        values.extend_from_slice(&r.covariates);
    }
    DesignMatrix::new(columns, values, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    #[default]
    Upper,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub percentile: Option<f64>,
    pub tails: TailMode,
    pub upper_cap: Option<f64>,
    pub lower_cap: Option<f64>,
    pub n_capped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p99: f64,
    /// (sum w)^2 / sum w^2
    pub ess: f64,
}

impl WeightStats {
    pub fn of(w: &[f64]) -> Self {
        let mut sorted = w.to_vec();
        sorted.sort_by(f64::total_cmp);
        let sum: f64 = w.iter().sum();
        let sum_sq: f64 = w.iter().map(|v| v * v).sum();
        WeightStats {
            n: w.len(),
            mean: sum / w.len() as f64,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            p99: quantile_sorted(&sorted, 0.99),
            ess: sum * sum / sum_sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    weights: Vec<f64>,
    pub truncation: Truncation,
    pub stats: WeightStats,
    /// mean weight falls outside [0.95, 1.05]
    pub mean_flag: bool,
}

impl WeightSet {
    fn build(weights: Vec<f64>, truncation: Truncation) -> Self {
        let stats = WeightStats::of(&weights);
        WeightSet { mean_flag: (stats.mean - 1.0).abs() > 0.05, weights, truncation, stats }
    }

    /// Caller-supplied weights (non-negative, finite, not all zero is left to the fit).
    pub fn from_weights(weights: Vec<f64>) -> Self {
        WeightSet::build(weights, no_truncation())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn histogram(&self, bins: usize) -> Vec<HistBin> {
        histogram(&self.weights, bins).unwrap_or_else(|| {
            let v = self.weights[0];
            vec![HistBin { bin_lo: v, bin_hi: v, count: self.weights.len() }]
        })
    }
}

fn no_truncation() -> Truncation {
    Truncation { percentile: None, tails: TailMode::Upper, upper_cap: None, lower_cap: None, n_capped: 0 }
}

/// `p_bar / e` for treated rows and `(1 - p_bar) / (1 - e)` for controls, with `p_bar` the
/// sample treated fraction.
pub fn stabilized_weights(scores: &PropensityScores, panel: &Panel) -> Result<WeightSet, IptwError> {
    if scores.scores.len() != panel.len() {
        return Err(IptwError::Misaligned { what: "propensity scores", expected: panel.len(), got: scores.scores.len() });
    }
    panel.require_both_arms()?;
    let p_bar = panel.n_treated() as f64 / panel.len() as f64;
    let weights = panel
        .rows()
        .iter()
        .zip(&scores.scores)
        .map(|(r, &e)| if r.treatment { p_bar / e } else { (1.0 - p_bar) / (1.0 - e) })
        .collect();
    Ok(WeightSet::build(weights, no_truncation()))
}

/// Caps weights at the `percentile` quantile (type 7 interpolation); with [`TailMode::Both`]
/// also floors them at the `100 - percentile` quantile.
pub fn truncate_weights(w: &WeightSet, percentile: f64, tails: TailMode) -> Result<WeightSet, IptwError> {
    if !(percentile > 50.0 && percentile <= 100.0) {
        return Err(IptwError::InvalidPercentile(percentile));
    }
    let mut sorted = w.weights.clone();
    sorted.sort_by(f64::total_cmp);
    let q = percentile / 100.0;
    let upper = quantile_sorted(&sorted, q);
    let lower = match tails {
        TailMode::Upper => None,
        TailMode::Both => Some(quantile_sorted(&sorted, 1.0 - q)),
    };
    let mut n_capped = 0;
    let weights = w
        .weights
        .iter()
        .map(|&v| {
            let c = v.min(upper).max(lower.unwrap_or(f64::NEG_INFINITY));
            n_capped += (c != v) as usize;
            c
        })
        .collect();
    let truncation = Truncation { percentile: Some(percentile), tails, upper_cap: Some(upper), lower_cap: lower, n_capped };
    Ok(WeightSet::build(weights, truncation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmResult {
    pub alpha0: f64,
    pub alpha1: f64,
    /// HC0 sandwich SE of alpha1
    pub alpha1_se: f64,
    /// model-based SE of alpha1
    pub alpha1_se_model: f64,
    pub risk_p0: f64,
    pub risk_p1: f64,
    pub risk_difference: f64,
    pub risk_difference_pp: f64,
    pub odds_ratio: f64,
    pub n_iter: usize,
}

impl MsmResult {
    /// Derives the risk contrasts from the two coefficients.
    pub fn from_coefficients(alpha0: f64, alpha1: f64, alpha1_se: f64, alpha1_se_model: f64) -> Self {
        let risk_p0 = expit(alpha0);
        let risk_p1 = expit(alpha0 + alpha1);
        let rd = risk_p1 - risk_p0;
        MsmResult {
            alpha0,
            alpha1,
            alpha1_se,
            alpha1_se_model,
            risk_p0,
            risk_p1,
            risk_difference: rd,
            risk_difference_pp: rd * 100.0,
            odds_ratio: alpha1.exp(),
            n_iter: 0,
        }
    }

    pub fn risk_ratio(&self) -> f64 {
        self.risk_p1 / self.risk_p0
    }
}

/// Weighted logistic fit of outcome on intercept + treatment.
pub fn fit_msm(panel: &Panel, w: &WeightSet) -> Result<MsmResult, IptwError> {
    if w.weights.len() != panel.len() {
        return Err(IptwError::Misaligned { what: "weights", expected: panel.len(), got: w.weights.len() });
    }
    panel.require_both_arms()?;
    let a: Vec<f64> = panel.rows().iter().map(|r| r.a()).collect();
    let x = DesignMatrix::from_columns(&["treatment"], &[&a], true).map_err(IptwError::Msm)?;
    let fit = fit_logistic(&x, &panel.outcome(), Some(&w.weights)).map_err(IptwError::Msm)?;
    let mut msm = MsmResult::from_coefficients(fit.coefficients[0], fit.coefficients[1], fit.se_sandwich(1), fit.se_model(1));
    msm.n_iter = fit.n_iter;
    Ok(msm)
}
