//! Confounded synthetic panels with a known additive effect.
//!
//! Covariates come from a two-class mixture: a latent class `Z ~ Bernoulli(class_share)` picks
//! per-covariate count laws, and `Z` is then discarded. Treatment is drawn from
//! `expit(treat_coefs . [1, L])`, which for the preset equals `P(Z = 1 | L)` exactly, so the
//! propensity model is correctly specified. Potential outcomes share one uniform draw `U`:
//! `Y(0) = [U < p0(L)]`, `Y(1) = [U < p0(L) + psi_true]`, with `p0 = min(expit(base . [1, L]), risk_cap)`.
//!
//! The facet preset is calibrated by [`calibrate_facet`] against the arm moments of a 16,868-unit
//! cohort (treated share 0.66; arm means 4.67/2.41 and 1.69/1.09; arm dropout 0.504/0.150).

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::panel::{sample_flow_labeled, Panel, PanelError, PanelRow, RowFilter, SampleFlow};
use crate::stats::{expit, logit};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("risk_cap {risk_cap} + psi_true {psi_true} exceeds 1")]
    InvalidRisk { risk_cap: f64, psi_true: f64 },
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Per-covariate law. Class-specific parameters are given as `[class 1, class 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// Negative-binomial-shaped counts on `{0, ..., max}`: pmf proportional to
    /// `C(l + size - 1, l) ratio^l`.
    TruncatedNegBinomial { size: f64, max: u32, ratio: [f64; 2] },
    /// Continuous noise, identical in both classes.
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(flatten)]
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub covariates: Vec<CovariateSpec>,
    /// P(Z = 1) of the latent covariate class
    pub class_share: f64,
    /// `[intercept, one per covariate]`
    pub treat_coefs: Vec<f64>,
    /// `[intercept, one per covariate]`, logit of the untreated risk
    pub base_coefs: Vec<f64>,
    pub psi_true: f64,
    pub risk_cap: f64,
    pub seed: u64,
    pub retain_potential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PotentialOutcome {
    pub y0: bool,
    pub y1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub psi_true: f64,
    pub n: usize,
    pub treated_fraction: f64,
    pub treated_covariate_means: IndexMap<String, f64>,
    pub control_covariate_means: IndexMap<String, f64>,
    pub treated_outcome_rate: f64,
    pub control_outcome_rate: f64,
    pub naive_risk_difference: f64,
    /// number of rows whose untreated risk hit `risk_cap`
    pub n_capped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub potential_outcomes: Option<Vec<PotentialOutcome>>,
}

fn tnb_log_weight(size: f64, l: u32, ratio: f64) -> f64 {
    let l = l as f64;
    ln_gamma(l + size) - ln_gamma(size) - ln_gamma(l + 1.0) + l * ratio.ln()
}

/// Probability mass of the truncated law on `0..=max`.
pub fn tnb_pmf(size: f64, max: u32, ratio: f64) -> Vec<f64> {
    let lw: Vec<f64> = (0..=max).map(|l| tnb_log_weight(size, l, ratio)).collect();
    let top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

pub fn tnb_mean(size: f64, max: u32, ratio: f64) -> f64 {
    tnb_pmf(size, max, ratio).iter().enumerate().map(|(l, p)| l as f64 * p).sum()
}

fn validate(cfg: &SynthConfig) -> Result<(), SynthError> {
    let bad = |m: String| Err(SynthError::InvalidConfig(m));
    let p = cfg.covariates.len() + 1;
    if cfg.n == 0 {
        return bad("n must be positive".into());
    }
    if cfg.treat_coefs.len() != p || cfg.base_coefs.len() != p {
        return bad(format!("coefficient vectors need {p} entries (intercept + covariates)"));
    }
    if cfg.treat_coefs.iter().chain(&cfg.base_coefs).any(|c| !c.is_finite()) {
        return bad("coefficients must be finite".into());
    }
    if !(cfg.class_share > 0.0 && cfg.class_share < 1.0) {
        return bad(format!("class_share {} must be in (0, 1)", cfg.class_share));
    }
    if !(0.0..=0.5).contains(&cfg.psi_true) {
        return bad(format!("psi_true {} must be in [0, 0.5]", cfg.psi_true));
    }
    if !(cfg.risk_cap > 0.0 && cfg.risk_cap < 1.0) {
        return bad(format!("risk_cap {} must be in (0, 1)", cfg.risk_cap));
    }
    if cfg.risk_cap + cfg.psi_true > 1.0 {
        return Err(SynthError::InvalidRisk { risk_cap: cfg.risk_cap, psi_true: cfg.psi_true });
    }
    for c in &cfg.covariates {
        match c.family {
            Family::TruncatedNegBinomial { size, max, ratio } => {
                if !(size > 0.0) || max == 0 || ratio.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return bad(format!("covariate {}: size and ratios must be positive, max >= 1", c.name));
                }
            }
            Family::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd > 0.0 && sd.is_finite()) {
                    return bad(format!("covariate {}: need finite mean and sd > 0", c.name));
                }
            }
        }
    }
    Ok(())
}

enum Sampler {
    // cumulative pmf per class, index 0 = class 1
    Discrete([Vec<f64>; 2]),
    Normal(Normal<f64>),
}

impl Sampler {
    fn new(f: &Family) -> Self {
        match *f {
            Family::TruncatedNegBinomial { size, max, ratio } => {
                let cdf = |r: f64| {
                    let mut acc = 0.0;
                    tnb_pmf(size, max, r).into_iter().map(|p| { acc += p; acc }).collect::<Vec<f64>>()
                };
                Sampler::Discrete([cdf(ratio[0]), cdf(ratio[1])])
            }
            Family::Normal { mean, sd } => Sampler::Normal(Normal::new(mean, sd).expect("validated sd")),
        }
    }

    fn draw(&self, class1: bool, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Sampler::Discrete(cdfs) => {
                let cdf = &cdfs[if class1 { 0 } else { 1 }];
                let u: f64 = rng.random();
                cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1) as f64
            }
            Sampler::Normal(d) => d.sample(rng),
        }
    }
}

fn dot(coefs: &[f64], l: &[f64]) -> f64 {
    coefs[0] + coefs[1..].iter().zip(l).map(|(a, b)| a * b).sum::<f64>()
}

struct Unit {
    l: Vec<f64>,
    a: bool,
    y0: bool,
    y1: bool,
    capped: bool,
}

fn draw_unit(cfg: &SynthConfig, samplers: &[Sampler], rng: &mut ChaCha8Rng) -> Unit {
    let class1 = rng.random::<f64>() < cfg.class_share;
    let l: Vec<f64> = samplers.iter().map(|s| s.draw(class1, rng)).collect();
    let a = rng.random::<f64>() < expit(dot(&cfg.treat_coefs, &l));
    let raw = expit(dot(&cfg.base_coefs, &l));
    let p0 = raw.min(cfg.risk_cap);
    let u: f64 = rng.random();
    Unit { y0: u < p0, y1: u < p0 + cfg.psi_true, capped: raw > cfg.risk_cap, l, a }
}

/// Draws a panel and its ground truth; the same config always yields the same panel.
pub fn generate(cfg: &SynthConfig) -> Result<(Panel, GroundTruth), SynthError> {
    validate(cfg)?;
    let samplers: Vec<Sampler> = cfg.covariates.iter().map(|c| Sampler::new(&c.family)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.n);
    let mut po = Vec::with_capacity(if cfg.retain_potential { cfg.n } else { 0 });
    let mut n_capped = 0;
    for i in 0..cfg.n {
        let u = draw_unit(cfg, &samplers, &mut rng);
        n_capped += u.capped as usize;
        if cfg.retain_potential {
            po.push(PotentialOutcome { y0: u.y0, y1: u.y1 });
        }
        rows.push(PanelRow { unit_id: format!("u{i}"), treatment: u.a, outcome: if u.a { u.y1 } else { u.y0 }, covariates: u.l });
    }
    let schema: Vec<String> = cfg.covariates.iter().map(|c| c.name.clone()).collect();
    let panel = Panel::new(schema, rows, format!("synth:seed={},n={},psi_true={}", cfg.seed, cfg.n, cfg.psi_true))?;
    let truth = ground_truth(cfg, &panel, n_capped, cfg.retain_potential.then_some(po));
    Ok((panel, truth))
}

fn ground_truth(cfg: &SynthConfig, panel: &Panel, n_capped: usize, po: Option<Vec<PotentialOutcome>>) -> GroundTruth {
    let arm = |treated: bool| {
        let rows: Vec<&PanelRow> = panel.rows().iter().filter(|r| r.treatment == treated).collect();
        let k = rows.len().max(1) as f64;
        let means = panel
            .schema()
            .iter()
            .enumerate()
            .map(|(j, s)| (s.clone(), rows.iter().map(|r| r.covariates[j]).sum::<f64>() / k))
            .collect::<IndexMap<_, _>>();
        let rate = rows.iter().filter(|r| r.outcome).count() as f64 / k;
        (rows.len(), means, rate)
    };
    let (n1, m1, r1) = arm(true);
    let (_, m0, r0) = arm(false);
    GroundTruth {
        psi_true: cfg.psi_true,
        n: panel.len(),
        treated_fraction: n1 as f64 / panel.len() as f64,
        treated_covariate_means: m1,
        control_covariate_means: m0,
        treated_outcome_rate: r1,
        control_outcome_rate: r0,
        naive_risk_difference: r1 - r0,
        n_capped,
        potential_outcomes: po,
    }
}

/// Exact population moments of a config whose covariates are all discrete, by summing over
/// the joint support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationMoments {
    pub treated_fraction: f64,
    pub treated_covariate_means: Vec<f64>,
    pub control_covariate_means: Vec<f64>,
    /// E[Y | A = 1] and E[Y | A = 0]
    pub treated_outcome_rate: f64,
    pub control_outcome_rate: f64,
    pub naive_risk_difference: f64,
    /// E[p0(L) | A = a]
    pub treated_baseline_risk: f64,
    pub control_baseline_risk: f64,
    pub max_baseline_risk: f64,
}

pub fn population_moments(cfg: &SynthConfig) -> Result<PopulationMoments, SynthError> {
    validate(cfg)?;
    let mut pmfs: Vec<[Vec<f64>; 2]> = Vec::new();
    for c in &cfg.covariates {
        match c.family {
            Family::TruncatedNegBinomial { size, max, ratio } => {
                pmfs.push([tnb_pmf(size, max, ratio[0]), tnb_pmf(size, max, ratio[1])]);
            }
            Family::Normal { .. } => {
                return Err(SynthError::InvalidConfig("population moments need discrete covariates".into()));
            }
        }
    }
    let k = pmfs.len();
    let mut idx = vec![0usize; k];
    let (mut pa1, mut y1, mut y0, mut b1, mut b0) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut l1 = vec![0.0; k];
    let mut l0 = vec![0.0; k];
    let mut max_risk = 0.0f64;
    loop {
        let l: Vec<f64> = idx.iter().map(|&v| v as f64).collect();
        let p1: f64 = idx.iter().zip(&pmfs).map(|(&v, p)| p[0][v]).product();
        let p0: f64 = idx.iter().zip(&pmfs).map(|(&v, p)| p[1][v]).product();
        let mass = cfg.class_share * p1 + (1.0 - cfg.class_share) * p0;
        let e = expit(dot(&cfg.treat_coefs, &l));
        let r = expit(dot(&cfg.base_coefs, &l)).min(cfg.risk_cap);
        max_risk = max_risk.max(r);
        let (m1, m0) = (mass * e, mass * (1.0 - e));
        pa1 += m1;
        y1 += m1 * (r + cfg.psi_true);
        y0 += m0 * r;
        b1 += m1 * r;
        b0 += m0 * r;
        for j in 0..k {
            l1[j] += m1 * l[j];
            l0[j] += m0 * l[j];
        }
        // odometer over the joint support
        let mut j = 0;
        loop {
            if j == k {
                let pa0 = 1.0 - pa1;
                return Ok(PopulationMoments {
                    treated_fraction: pa1,
                    treated_covariate_means: l1.iter().map(|v| v / pa1).collect(),
                    control_covariate_means: l0.iter().map(|v| v / pa0).collect(),
                    treated_outcome_rate: y1 / pa1,
                    control_outcome_rate: y0 / pa0,
                    naive_risk_difference: y1 / pa1 - y0 / pa0,
                    treated_baseline_risk: b1 / pa1,
                    control_baseline_risk: b0 / pa0,
                    max_baseline_risk: max_risk,
                });
            }
            idx[j] += 1;
            if idx[j] < pmfs[j][0].len() {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Calibration targets for the facet preset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FacetTargets {
    pub names: [&'static str; 2],
    pub treated_share: f64,
    pub treated_means: [f64; 2],
    pub control_means: [f64; 2],
    /// pre-weighting SMDs; only used to put outcome slopes on a per-pooled-SD scale
    pub smd: [f64; 2],
    pub treated_dropout: f64,
    pub control_dropout: f64,
    pub psi_true: f64,
    /// family shape: `size` and support maximum per covariate
    pub size: [f64; 2],
    pub max: [u32; 2],
    /// relative outcome loading per pooled SD
    pub outcome_loading: [f64; 2],
    pub risk_cap: f64,
}

pub const FACET_TARGETS: FacetTargets = FacetTargets {
    names: ["cum_subjects_enrolled", "current_term_load"],
    treated_share: 0.660,
    treated_means: [4.67, 1.69],
    control_means: [2.41, 1.09],
    smd: [1.114, 0.438],
    treated_dropout: 0.504,
    control_dropout: 0.150,
    psi_true: 0.25,
    size: [1.0, 4.0],
    max: [6, 6],
    outcome_loading: [1.0, 0.3],
    risk_cap: 0.5,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetCalibration {
    /// `[class 1, class 0]` ratio per covariate
    pub ratios: [[f64; 2]; 2],
    pub treat_coefs: [f64; 3],
    pub base_coefs: [f64; 3],
    pub achieved: PopulationMoments,
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f increasing with a root in [lo, hi]
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 { lo = mid } else { hi = mid }
    }
    0.5 * (lo + hi)
}

/// Moment-matching search for the facet preset: class ratios by bisection on each arm mean,
/// treatment coefficients from the exact class posterior, and `(c0, scale)` of the baseline
/// risk by nested bisection on the two arm baseline rates.
pub fn calibrate_facet(t: &FacetTargets) -> FacetCalibration {
    let solve_ratio = |j: usize, target: f64| bisect(-30.0, 30.0, |lr| tnb_mean(t.size[j], t.max[j], lr.exp()) - target).exp();
    let ratios = [
        [solve_ratio(0, t.treated_means[0]), solve_ratio(0, t.control_means[0])],
        [solve_ratio(1, t.treated_means[1]), solve_ratio(1, t.control_means[1])],
    ];
    // log posterior odds of class 1 are linear in L for this family
    let mut treat = [logit(t.treated_share), 0.0, 0.0];
    for j in 0..2 {
        let p1 = tnb_pmf(t.size[j], t.max[j], ratios[j][0]);
        let p0 = tnb_pmf(t.size[j], t.max[j], ratios[j][1]);
        treat[0] += (p1[0] / p0[0]).ln();
        treat[j + 1] = (ratios[j][0] / ratios[j][1]).ln();
    }

    let pooled_sd = [0, 1].map(|j| (t.treated_means[j] - t.control_means[j]) / t.smd[j]);
    let dir = [0, 1].map(|j| t.outcome_loading[j] / pooled_sd[j]);
    let cfg_for = |base: [f64; 3]| SynthConfig {
        n: 1,
        covariates: facet_covariates(&ratios, t),
        class_share: t.treated_share,
        treat_coefs: treat.to_vec(),
        base_coefs: base.to_vec(),
        psi_true: 0.0,
        risk_cap: 1.0 - 1e-12,
        seed: 0,
        retain_potential: false,
    };
    let risks = |c0: f64, s: f64| {
        let m = population_moments(&cfg_for([c0, s * dir[0], s * dir[1]])).expect("discrete config");
        (m.treated_baseline_risk, m.control_baseline_risk)
    };
    let target1 = t.treated_dropout - t.psi_true;
    let c0_for = |s: f64| bisect(-20.0, 20.0, |c0| risks(c0, s).1 - t.control_dropout);
    let scale = bisect(0.0, 5.0, |s| risks(c0_for(s), s).0 - target1);
    let c0 = c0_for(scale);
    let base = [c0, scale * dir[0], scale * dir[1]];

    let mut achieved_cfg = cfg_for(base);
    achieved_cfg.psi_true = t.psi_true;
    achieved_cfg.risk_cap = t.risk_cap;
    let achieved = population_moments(&achieved_cfg).expect("discrete config");
    FacetCalibration { ratios, treat_coefs: treat, base_coefs: base, achieved }
}

fn facet_covariates(ratios: &[[f64; 2]; 2], t: &FacetTargets) -> Vec<CovariateSpec> {
    (0..2)
        .map(|j| CovariateSpec {
            name: t.names[j].to_string(),
            family: Family::TruncatedNegBinomial { size: t.size[j], max: t.max[j], ratio: ratios[j] },
        })
        .collect()
}

// Output of `cargo run --example calibrate_facet`. Achieved population moments:
// treated share 0.660000, arm means (4.670000, 2.410000) and (1.690000, 1.090000),
// arm dropout 0.504000 / 0.150000, naive RD 0.354000, max untreated risk 0.447.
pub const FACET_RATIOS: [[f64; 2]; 2] = [[1.6441892967289164, 0.8604890841706242], [0.30566928509742164, 0.21549628217389594]];
pub const FACET_TREAT_COEFS: [f64; 3] = [-2.1639417156927356, 0.6475017828617166, 0.34956009254469894];
pub const FACET_BASE_COEFS: [f64; 3] = [-2.66817637113126, 0.283440654289838, 0.12593008746338638];

/// Preset calibrated to the facet cohort: n = 16,868, psi_true = 0.25, seed 42.
pub fn facet_preset() -> SynthConfig {
    SynthConfig {
        n: 16_868,
        covariates: facet_covariates(&FACET_RATIOS, &FACET_TARGETS),
        class_share: FACET_TARGETS.treated_share,
        treat_coefs: FACET_TREAT_COEFS.to_vec(),
        base_coefs: FACET_BASE_COEFS.to_vec(),
        psi_true: FACET_TARGETS.psi_true,
        risk_cap: FACET_TARGETS.risk_cap,
        seed: 42,
        retain_potential: false,
    }
}

/// Stage names of the cohort flow.
pub const COHORT_STAGES: [&str; 4] = ["Full Engineering Cohort", "Valid 3-Year Labels", "Analysis Sample (T = 2)", "Modelling Dataset"];

/// Bookkeeping columns appended to the raw cohort.
pub const OUTCOME_OBSERVED: &str = "outcome_observed";
pub const REACHED_TERM2: &str = "reached_term2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortCounts {
    pub full: usize,
    pub no_label: usize,
    pub no_term2: usize,
    pub modelling: usize,
}

/// Raw cohort around a generated panel: the `cfg.n` modelling units plus units without an
/// outcome label and units that never reached term 2, in the proportions 1,596 and 5,669 per
/// 16,868. Excluded units carry placeholder treatment/outcome values and are flagged through
/// the bookkeeping columns.
pub fn facet_cohort(cfg: &SynthConfig) -> Result<(Panel, GroundTruth, CohortCounts), SynthError> {
    let (panel, truth) = generate(cfg)?;
    let scale = |k: f64| (cfg.n as f64 * k / 16_868.0).round() as usize;
    let counts = CohortCounts {
        full: 0,
        no_label: scale(1596.0),
        no_term2: scale(5669.0),
        modelling: cfg.n,
    };
    let counts = CohortCounts { full: counts.no_label + counts.no_term2 + counts.modelling, ..counts };

    let samplers: Vec<Sampler> = cfg.covariates.iter().map(|c| Sampler::new(&c.family)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut schema = panel.schema().to_vec();
    schema.push(OUTCOME_OBSERVED.into());
    schema.push(REACHED_TERM2.into());
    let mut rows: Vec<PanelRow> = panel
        .rows()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.covariates.extend([1.0, 1.0]);
            r
        })
        .collect();
    for i in 0..counts.no_label + counts.no_term2 {
        let u = draw_unit(cfg, &samplers, &mut rng);
        let observed = if i < counts.no_label { 0.0 } else { 1.0 };
        let mut l = u.l;
        l.extend([observed, 0.0]);
        rows.push(PanelRow { unit_id: format!("x{i}"), treatment: false, outcome: false, covariates: l });
    }
    let cohort = Panel::new(schema, rows, format!("synth-cohort:seed={},n={}", cfg.seed, cfg.n))?;
    Ok((cohort, truth, counts))
}

/// Filters reproducing the cohort flow on a [`facet_cohort`] panel.
pub fn cohort_filters(schema: &[String]) -> Result<Vec<RowFilter>, PanelError> {
    Ok(vec![
        RowFilter::from_condition(COHORT_STAGES[1], "Insufficient follow-up", &format!("{OUTCOME_OBSERVED} == 1"), schema)?,
        RowFilter::from_condition(COHORT_STAGES[2], "No survival to Term 2", &format!("{REACHED_TERM2} == 1"), schema)?,
        RowFilter::new(COHORT_STAGES[3], "None", |_| true),
    ])
}

/// Runs the cohort flow and projects onto the model covariates.
pub fn cohort_flow(cohort: Panel, model_covariates: &[String]) -> Result<(Panel, SampleFlow), PanelError> {
    let filters = cohort_filters(cohort.schema())?;
    let (panel, flow) = sample_flow_labeled(cohort, COHORT_STAGES[0], &filters)?;
    Ok((panel.select_covariates(model_covariates)?, flow))
}
