//! BCa bootstrap for scalar panel estimators.
//!
//! Resamples are drawn within arms so every resample keeps the observed arm sizes. Resample
//! `b` draws from `ChaCha8Rng::seed_from_u64(seed)` on stream `b`, so the result does not depend
//! on scheduling. Acceleration comes from a grouped jackknife whose groups are balanced by arm.

use std::fmt::Display;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{Panel, PanelError, PanelRow};
use crate::stats::{histogram, phi, phi_inv, quantile_sorted, sample_sd, HistBin};

pub const MAX_FAILURE_RATE: f64 = 0.01;
const JACKKNIFE_STREAM: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("invalid bootstrap configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("estimator failed on the full panel: {0}")]
    FullPanel(String),
    #[error("{failures} of {attempted} resamples failed (limit 1%); first failure: {first}")]
    EstimatorFailure { failures: usize, attempted: usize, first: String },
    #[error("estimator failed on jackknife group {group}: {message}")]
    JackknifeFailure { group: usize, message: String },
    #[error("all resample estimates are identical")]
    DegenerateDistribution,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// How resamples are scheduled. Results are identical either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    Serial,
    Threads(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcaConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
    pub jack_groups: usize,
    pub execution: Execution,
}

impl Default for BcaConfig {
    fn default() -> Self {
        BcaConfig { n_resamples: 1000, level: 0.95, seed: 42, jack_groups: 1000, execution: Execution::Serial }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcaResult {
    pub estimate: f64,
    pub n_resamples: usize,
    /// successful resample estimates, in resample-index order
    pub resample_estimates: Vec<f64>,
    pub z0: f64,
    pub accel: f64,
    pub ci: (f64, f64),
    /// adjusted percentile levels used for the endpoints
    pub ci_percentiles: (f64, f64),
    pub level: f64,
    pub boot_se: f64,
    pub seed: u64,
    pub jack_groups: usize,
    pub failures: usize,
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

/// [`BcaResult`] without the resample vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcaSummary {
    pub estimate: f64,
    pub n_resamples: usize,
    pub z0: f64,
    pub accel: f64,
    pub ci: (f64, f64),
    pub ci_percentiles: (f64, f64),
    pub level: f64,
    pub boot_se: f64,
    pub seed: u64,
    pub jack_groups: usize,
    pub failures: usize,
    pub degenerate: bool,
    pub warnings: Vec<String>,
}

impl BcaResult {
    pub fn summary(&self) -> BcaSummary {
        BcaSummary {
            estimate: self.estimate,
            n_resamples: self.n_resamples,
            z0: self.z0,
            accel: self.accel,
            ci: self.ci,
            ci_percentiles: self.ci_percentiles,
            level: self.level,
            boot_se: self.boot_se,
            seed: self.seed,
            jack_groups: self.jack_groups,
            failures: self.failures,
            degenerate: self.degenerate,
            warnings: self.warnings.clone(),
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci.0 <= value && value <= self.ci.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcaInterval {
    pub z0: f64,
    pub accel: f64,
    pub ci: (f64, f64),
    pub percentiles: (f64, f64),
}

/// Acceleration `sum d^3 / (6 (sum d^2)^1.5)` with `d = mean(jack) - jack_i`; 0 if all equal.
pub fn acceleration(jackknife: &[f64]) -> f64 {
    let m = jackknife.iter().sum::<f64>() / jackknife.len() as f64;
    let (s2, s3) = jackknife.iter().fold((0.0, 0.0), |(s2, s3), j| {
        let d = m - j;
        (s2 + d * d, s3 + d * d * d)
    });
    if s2 > 0.0 { s3 / (6.0 * s2.powf(1.5)) } else { 0.0 }
}

/// BCa endpoints from resample estimates and jackknife estimates.
pub fn bca_interval(estimate: f64, resamples: &[f64], jackknife: &[f64], level: f64) -> BcaInterval {
    let mut sorted = resamples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len() as f64;
    let below = sorted.iter().filter(|&&v| v < estimate).count() as f64;
    let prop = (below / b).clamp(1.0 / (b + 1.0), b / (b + 1.0));
    let z0 = phi_inv(prop);
    let accel = acceleration(jackknife);
    let alpha = (1.0 - level) / 2.0;
    let adjust = |z: f64| {
        let denom = 1.0 - accel * (z0 + z);
        if denom <= 0.0 {
            if z > 0.0 { 1.0 } else { 0.0 }
        } else {
            phi(z0 + (z0 + z) / denom)
        }
    };
    let lo_p = adjust(phi_inv(alpha));
    let hi_p = adjust(phi_inv(1.0 - alpha));
    BcaInterval {
        z0,
        accel,
        ci: (quantile_sorted(&sorted, lo_p), quantile_sorted(&sorted, hi_p)),
        percentiles: (lo_p, hi_p),
    }
}

/// Plain percentile interval, for comparison.
pub fn percentile_interval(resamples: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = resamples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    (quantile_sorted(&sorted, alpha), quantile_sorted(&sorted, 1.0 - alpha))
}

fn arm_indices(panel: &Panel) -> (Vec<usize>, Vec<usize>) {
    let mut t = Vec::new();
    let mut c = Vec::new();
    for (i, r) in panel.rows().iter().enumerate() {
        if r.treatment { t.push(i) } else { c.push(i) }
    }
    (t, c)
}

/// Row indices of resample `b`: treated draws followed by control draws.
pub fn resample_indices(treated: &[usize], control: &[usize], seed: u64, b: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    let mut out = Vec::with_capacity(treated.len() + control.len());
    for arm in [treated, control] {
        out.extend((0..arm.len()).map(|_| arm[rng.random_range(0..arm.len())]));
    }
    out
}

/// Jackknife group of each row; each arm is shuffled then dealt round-robin so groups keep
/// the arm mix.
pub fn jackknife_groups(panel: &Panel, groups: usize, seed: u64) -> Vec<usize> {
    let (mut t, mut c) = arm_indices(panel);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(JACKKNIFE_STREAM);
    t.shuffle(&mut rng);
    c.shuffle(&mut rng);
    let mut group = vec![0; panel.len()];
    for (k, &i) in t.iter().chain(&c).enumerate() {
        group[i] = k % groups;
    }
    group
}

fn subpanel(panel: &Panel, idx: impl Iterator<Item = usize>, tag: &str) -> Panel {
    let rows: Vec<PanelRow> = idx
        .enumerate()
        .map(|(pos, i)| {
            let r = &panel.rows()[i];
            PanelRow { unit_id: format!("{}~{pos}", r.unit_id), ..r.clone() }
        })
        .collect();
    // positions make the relabelled ids unique
    Panel::from_trusted(panel.schema().to_vec(), rows, format!("{} [{tag}]", panel.provenance()))
}

fn run_indexed<T, F>(n: usize, execution: Execution, f: F) -> Result<Vec<T>, BootstrapError>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match execution {
        Execution::Serial => Ok((0..n).map(f).collect()),
        Execution::Threads(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| BootstrapError::ThreadPool(e.to_string()))?;
            Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
        }
    }
}

/// BCa interval for `estimator` on `panel`.
pub fn bca<F, E>(panel: &Panel, estimator: F, cfg: &BcaConfig) -> Result<BcaResult, BootstrapError>
where
    F: Fn(&Panel) -> Result<f64, E> + Sync + Send,
    E: Display,
{
    if cfg.n_resamples < 100 {
        return Err(BootstrapError::InvalidConfig(format!("B = {} but at least 100 resamples are required", cfg.n_resamples)));
    }
    if cfg.jack_groups < 20 || cfg.jack_groups > panel.len() {
        return Err(BootstrapError::InvalidConfig(format!(
            "jack_groups = {} must lie in [20, n = {}]",
            cfg.jack_groups,
            panel.len()
        )));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(BootstrapError::InvalidConfig(format!("level {} is outside (0, 1)", cfg.level)));
    }
    panel.require_both_arms()?;
    let estimate = estimator(panel).map_err(|e| BootstrapError::FullPanel(e.to_string()))?;

    let (treated, control) = arm_indices(panel);
    let outcomes = run_indexed(cfg.n_resamples, cfg.execution, |b| {
        let idx = resample_indices(&treated, &control, cfg.seed, b as u64);
        estimator(&subpanel(panel, idx.into_iter(), "resample")).map_err(|e| e.to_string())
    })?;
    let mut estimates = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    let mut first = None;
    for o in outcomes {
        match o {
            Ok(v) if v.is_finite() => estimates.push(v),
            Ok(v) => {
                failures += 1;
                first.get_or_insert(format!("non-finite estimate {v}"));
            }
            Err(e) => {
                failures += 1;
                first.get_or_insert(e);
            }
        }
    }
    if failures as f64 >= MAX_FAILURE_RATE * cfg.n_resamples as f64 {
        return Err(BootstrapError::EstimatorFailure {
            failures,
            attempted: cfg.n_resamples,
            first: first.unwrap_or_default(),
        });
    }
    let mut warnings = Vec::new();
    if failures > 0 {
        warnings.push(format!("{failures} resamples failed and were dropped"));
    }

    let c = estimates[0];
    if estimates.iter().all(|&v| v == c) {
        warnings.push("degenerate bootstrap distribution; interval collapsed to a point".into());
        return Ok(BcaResult {
            estimate,
            n_resamples: cfg.n_resamples,
            resample_estimates: estimates,
            z0: 0.0,
            accel: 0.0,
            ci: (c, c),
            ci_percentiles: (0.5, 0.5),
            level: cfg.level,
            boot_se: 0.0,
            seed: cfg.seed,
            jack_groups: cfg.jack_groups,
            failures,
            degenerate: true,
            warnings,
        });
    }

    let group = jackknife_groups(panel, cfg.jack_groups, cfg.seed);
    let jack = run_indexed(cfg.jack_groups, cfg.execution, |g| {
        let keep = group.iter().enumerate().filter(|(_, &k)| k != g).map(|(i, _)| i);
        estimator(&subpanel(panel, keep, "jackknife")).map_err(|e| (g, e.to_string()))
    })?
    .into_iter()
    .collect::<Result<Vec<f64>, _>>()
    .map_err(|(group, message)| BootstrapError::JackknifeFailure { group, message })?;

    let iv = bca_interval(estimate, &estimates, &jack, cfg.level);
    if !(iv.ci.0 <= estimate && estimate <= iv.ci.1) {
        warnings.push(format!("estimate {estimate} lies outside the BCa interval"));
    }
    Ok(BcaResult {
        estimate,
        n_resamples: cfg.n_resamples,
        boot_se: sample_sd(&estimates),
        resample_estimates: estimates,
        z0: iv.z0,
        accel: iv.accel,
        ci: iv.ci,
        ci_percentiles: iv.percentiles,
        level: cfg.level,
        seed: cfg.seed,
        jack_groups: cfg.jack_groups,
        failures,
        degenerate: false,
        warnings,
    })
}

/// Equal-width histogram of the resample estimates; counts sum to `B - failures`.
pub fn bootstrap_histogram(result: &BcaResult, bins: usize) -> Result<Vec<HistBin>, BootstrapError> {
    if result.degenerate {
        return Err(BootstrapError::DegenerateDistribution);
    }
    histogram(&result.resample_estimates, bins).ok_or(BootstrapError::DegenerateDistribution)
}
