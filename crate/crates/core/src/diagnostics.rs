//! Balance and identification checks: SMD before and after weighting, positivity,
//! missingness and E-values.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iptw::{MsmResult, PropensityScores, WeightSet, WeightStats};
use crate::panel::{GroupSummary, Panel, PanelError};

pub const SMD_TARGET: f64 = 0.10;
pub const ADVISORY_LOW: f64 = 0.01;
pub const ADVISORY_HIGH: f64 = 0.99;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("contract violation: propensity score {value} at row {row} is not strictly inside (0, 1)")]
    ContractViolation { row: usize, value: f64 },
    #[error("risk ratio must be positive and finite, got {0}")]
    NonPositiveRR(f64),
    #[error("weights have {got} entries but the panel has {expected} rows")]
    Misaligned { expected: usize, got: usize },
}

/// Which variances enter the SMD denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmdVariance {
    /// unweighted arm variances even when the means are weighted
    #[default]
    Unweighted,
    /// reliability-weighted arm variances
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smd {
    pub value: f64,
    /// pooled variance was zero while the means differ; `value` is +inf
    pub zero_variance: bool,
}

/// `|m1 - m0| / sqrt((v1 + v0) / 2)`.
pub fn smd_from_moments(m1: f64, m0: f64, v1: f64, v0: f64) -> Smd {
    let diff = (m1 - m0).abs();
    let pooled = ((v1 + v0) / 2.0).sqrt();
    if pooled > 0.0 {
        Smd { value: diff / pooled, zero_variance: false }
    } else if diff == 0.0 {
        Smd { value: 0.0, zero_variance: false }
    } else {
        Smd { value: f64::INFINITY, zero_variance: true }
    }
}

fn arm_moments(x: &[f64], w: Option<&[f64]>, variance: SmdVariance) -> (f64, f64) {
    let n = x.len() as f64;
    let plain_mean = x.iter().sum::<f64>() / n;
    let mean = match w {
        Some(w) => x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>(),
        None => plain_mean,
    };
    let var = match (w, variance) {
        (Some(w), SmdVariance::Weighted) => {
            let v1: f64 = w.iter().sum();
            let v2: f64 = w.iter().map(|v| v * v).sum();
            let ss: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mean) * (a - mean)).sum();
            let denom = v1 - v2 / v1;
            if denom > 0.0 { ss / denom } else { 0.0 }
        }
        _ if x.len() > 1 => x.iter().map(|a| (a - plain_mean) * (a - plain_mean)).sum::<f64>() / (n - 1.0),
        _ => 0.0,
    };
    (mean, var)
}

/// Standardized mean difference of `covariate` between arms, weighted means when `weights` is given.
pub fn smd(panel: &Panel, covariate: &str, weights: Option<&WeightSet>, variance: SmdVariance) -> Result<Smd, DiagError> {
    panel.require_both_arms()?;
    let j = panel.covariate_index(covariate)?;
    if let Some(w) = weights {
        if w.weights().len() != panel.len() {
            return Err(DiagError::Misaligned { expected: panel.len(), got: w.weights().len() });
        }
    }
    let split = |treated: bool| {
        let mut x = Vec::new();
        let mut w = Vec::new();
        for (i, r) in panel.rows().iter().enumerate() {
            if r.treatment == treated {
                x.push(r.covariates[j]);
                w.push(weights.map_or(1.0, |ws| ws.weights()[i]));
            }
        }
        (x, w)
    };
    let (x1, w1) = split(true);
    let (x0, w0) = split(false);
    let (m1, v1) = arm_moments(&x1, weights.map(|_| w1.as_slice()), variance);
    let (m0, v0) = arm_moments(&x0, weights.map(|_| w0.as_slice()), variance);
    Ok(smd_from_moments(m1, m0, v1, v0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivitySection {
    pub score_min: f64,
    pub score_max: f64,
    pub pass: bool,
    pub n_below_advisory: usize,
    pub n_above_advisory: usize,
    pub advisory_thresholds: (f64, f64),
}

/// Positivity summary; scores are interior by type, so `pass` always holds here.
pub fn positivity_report(scores: &PropensityScores) -> PositivitySection {
    positivity_section(scores.scores())
}

/// Same as [`positivity_report`] for a bare vector, rejecting scores outside (0, 1).
pub fn positivity_from_scores(scores: &[f64]) -> Result<PositivitySection, DiagError> {
    if let Some((row, &value)) = scores.iter().enumerate().find(|(_, s)| !(**s > 0.0 && **s < 1.0)) {
        return Err(DiagError::ContractViolation { row, value });
    }
    Ok(positivity_section(scores))
}

fn positivity_section(scores: &[f64]) -> PositivitySection {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    PositivitySection {
        score_min: lo,
        score_max: hi,
        pass: lo > 0.0 && hi < 1.0,
        n_below_advisory: scores.iter().filter(|&&s| s < ADVISORY_LOW).count(),
        n_above_advisory: scores.iter().filter(|&&s| s > ADVISORY_HIGH).count(),
        advisory_thresholds: (ADVISORY_LOW, ADVISORY_HIGH),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalueResult {
    pub basis: String,
    pub rr_observed: f64,
    /// risk ratio actually used, >= 1
    pub rr_input: f64,
    pub inverted: bool,
    pub evalue_point: f64,
}

/// `rr + sqrt(rr (rr - 1))`, after inverting ratios below 1.
pub fn evalue(rr: f64) -> Result<EvalueResult, DiagError> {
    evalue_with_basis(rr, "caller-supplied risk ratio")
}

pub fn evalue_with_basis(rr: f64, basis: &str) -> Result<EvalueResult, DiagError> {
    if !(rr > 0.0 && rr.is_finite()) {
        return Err(DiagError::NonPositiveRR(rr));
    }
    let inverted = rr < 1.0;
    let r = if inverted { 1.0 / rr } else { rr };
    Ok(EvalueResult {
        basis: basis.to_string(),
        rr_observed: rr,
        rr_input: r,
        inverted,
        evalue_point: r + (r * (r - 1.0)).sqrt(),
    })
}

/// Covariate values that are missing or non-finite; zero for any validated panel.
pub fn missing_count(panel: &Panel) -> usize {
    panel.rows().iter().flat_map(|r| &r.covariates).filter(|v| !v.is_finite()).count() + panel.dropped_missing()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub name: String,
    pub smd_raw: f64,
    pub smd_weighted: Option<f64>,
    pub zero_variance: bool,
}

/// One row of the tabular diagnostic summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub check: String,
    pub value: String,
    pub threshold: String,
    pub assessment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub smd_variance: SmdVariance,
    pub covariates: Vec<CovariateBalance>,
    pub positivity: PositivitySection,
    pub missing_count: usize,
    pub weights_raw: Option<WeightStats>,
    pub weights_truncated: Option<WeightStats>,
    pub evalues: Vec<EvalueResult>,
    pub rows: Vec<DiagnosticRow>,
}

/// Inputs for [`balance_report`]; weights and effect estimates are optional so the report can
/// be produced before estimation.
#[derive(Debug, Clone, Copy, Default)]
pub struct BalanceInputs<'a> {
    pub raw_weights: Option<&'a WeightSet>,
    /// weights used for the post-weighting SMD
    pub weights: Option<&'a WeightSet>,
    pub groups: Option<&'a GroupSummary>,
    pub msm: Option<&'a MsmResult>,
}

pub fn balance_report(
    panel: &Panel,
    scores: &PropensityScores,
    inputs: BalanceInputs<'_>,
    variance: SmdVariance,
) -> Result<BalanceReport, DiagError> {
    let mut covariates = Vec::new();
    for name in panel.schema() {
        let raw = smd(panel, name, None, variance)?;
        let weighted = inputs.weights.map(|w| smd(panel, name, Some(w), variance)).transpose()?;
        covariates.push(CovariateBalance {
            name: name.clone(),
            smd_raw: raw.value,
            smd_weighted: weighted.map(|s| s.value),
            zero_variance: raw.zero_variance || weighted.is_some_and(|s| s.zero_variance),
        });
    }
    let positivity = positivity_report(scores);
    let missing = missing_count(panel);

    let mut evalues = Vec::new();
    if let Some(rr) = inputs.groups.and_then(|g| g.risk_ratio) {
        evalues.push(evalue_with_basis(rr, "raw arm outcome-rate ratio (treated / control)")?);
    }
    if let Some(m) = inputs.msm {
        evalues.push(evalue_with_basis(m.risk_ratio(), "marginal risk ratio p1 / p0 from the weighted MSM")?);
    }

    let mut rows = vec![DiagnosticRow {
        check: "Positivity: PS range".into(),
        value: format!("[{:.3}, {:.3}]", positivity.score_min, positivity.score_max),
        threshold: "(0, 1)".into(),
        assessment: if positivity.pass { "PASSED" } else { "FAILED" }.into(),
    }];
    if positivity.n_below_advisory + positivity.n_above_advisory > 0 {
        rows.push(DiagnosticRow {
            check: "Positivity: practical advisory".into(),
            value: format!("{} below 0.01, {} above 0.99", positivity.n_below_advisory, positivity.n_above_advisory),
            threshold: "[0.01, 0.99]".into(),
            assessment: "ADVISORY".into(),
        });
    }
    for c in &covariates {
        rows.push(DiagnosticRow {
            check: format!("SMD: {}", c.name),
            value: format!("{:.3}", c.smd_raw),
            threshold: format!("< {SMD_TARGET:.2} (post-weight target)"),
            assessment: if c.smd_raw >= SMD_TARGET { "Justifies IPTW" } else { "Balanced before weighting" }.into(),
        });
    }
    for c in &covariates {
        if let Some(s) = c.smd_weighted {
            rows.push(DiagnosticRow {
                check: format!("SMD after weighting: {}", c.name),
                value: format!("{s:.3}"),
                threshold: format!("< {SMD_TARGET:.2}"),
                assessment: if s < SMD_TARGET { "PASSED" } else { "FAILED" }.into(),
            });
        }
    }
    let raw_stats = inputs.raw_weights.map(|w| w.stats);
    let trunc_stats = inputs.weights.map(|w| w.stats);
    if let Some(s) = raw_stats {
        rows.push(DiagnosticRow {
            check: "IPTW weights: raw maximum".into(),
            value: format!("{:.3}", s.max),
            threshold: "n/a".into(),
            assessment: format!("mean {:.3}, ESS {:.1}", s.mean, s.ess),
        });
    }
    if let (Some(s), Some(w)) = (trunc_stats, inputs.weights) {
        let pct = w.truncation.percentile.map_or("none".to_string(), |p| format!("{p} pct"));
        rows.push(DiagnosticRow {
            check: "IPTW weights: truncated maximum".into(),
            value: format!("{:.3}", s.max),
            threshold: pct,
            assessment: format!("mean {:.3}, ESS {:.1}", s.mean, s.ess),
        });
    }
    rows.push(DiagnosticRow {
        check: "Missing data (key covariates)".into(),
        value: missing.to_string(),
        threshold: "0".into(),
        assessment: if missing == 0 { "PASSED" } else { "FAILED" }.into(),
    });
    for e in &evalues {
        rows.push(DiagnosticRow {
            check: format!("E-value: {}", e.basis),
            value: format!("{:.3}", e.evalue_point),
            threshold: format!("RR {:.3}{}", e.rr_input, if e.inverted { " (inverted)" } else { "" }),
            assessment: "Sensitivity reference".into(),
        });
    }

    Ok(BalanceReport {
        smd_variance: variance,
        covariates,
        positivity,
        missing_count: missing,
        weights_raw: raw_stats,
        weights_truncated: trunc_stats,
        evalues,
        rows,
    })
}
