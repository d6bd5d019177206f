//! Run configuration, pipeline orchestration and report assembly behind the command-line tool.
//!
//! Configuration is layered: built-in defaults, then an optional flat `key = value` file, then
//! command-line flags. Every effective setting except the output directory and thread count is
//! echoed into the report, so two runs that differ only in where or how fast they ran produce
//! identical reports.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::{bca, bootstrap_histogram, BcaConfig, BcaResult, BcaSummary, BootstrapError, Execution};
use crate::diagnostics::{balance_report, BalanceInputs, BalanceReport, DiagError, SmdVariance};
use crate::gest::{g_estimate, GestCurvePoint, GestError, GestResult, GridSpec};
use crate::iptw::{
    fit_msm, fit_propensity, stabilized_weights, truncate_weights, IptwError, MsmResult, TailMode, Truncation,
    WeightSet, WeightStats,
};
use crate::output::{write_csv_rows, write_histogram, write_json};
use crate::panel::{
    load_panel, sample_flow, summarize_groups, write_csv, ColumnMapping, GroupSummary, Panel, PanelError, RowFilter,
    SampleFlow,
};
use crate::stats::HistBin;
use crate::synth::{cohort_filters, facet_cohort, facet_preset, GroundTruth, SynthError, COHORT_STAGES};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Estimation,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Estimation => 4,
        }
    }
}

/// A module error with the stage that raised it.
#[derive(Debug, Error)]
#[error("{module}::{operation}: {message}")]
pub struct PipelineError {
    pub kind: ErrorKind,
    pub module: &'static str,
    pub operation: &'static str,
    pub message: String,
}

impl PipelineError {
    pub fn config(operation: &'static str, message: impl fmt::Display) -> Self {
        PipelineError { kind: ErrorKind::Config, module: "cli", operation, message: message.to_string() }
    }

    fn new(kind: ErrorKind, module: &'static str, operation: &'static str, e: impl fmt::Display) -> Self {
        PipelineError { kind, module, operation, message: e.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

fn panel_err(operation: &'static str) -> impl Fn(PanelError) -> PipelineError {
    move |e| PipelineError::new(ErrorKind::Data, "panel", operation, e)
}

fn synth_err(e: SynthError) -> PipelineError {
    let kind = match e {
        SynthError::Panel(_) => ErrorKind::Data,
        _ => ErrorKind::Config,
    };
    PipelineError::new(kind, "synth", "generate", e)
}

fn iptw_err(operation: &'static str) -> impl Fn(IptwError) -> PipelineError {
    move |e| PipelineError::new(ErrorKind::Estimation, "iptw", operation, e)
}

fn gest_err(e: GestError) -> PipelineError {
    let kind = match e {
        GestError::InvalidGrid(_) => ErrorKind::Config,
        _ => ErrorKind::Estimation,
    };
    PipelineError::new(kind, "gest", "g_estimate", e)
}

fn diag_err(e: DiagError) -> PipelineError {
    PipelineError::new(ErrorKind::Estimation, "diagnostics", "balance_report", e)
}

fn boot_err(e: BootstrapError) -> PipelineError {
    let kind = match e {
        BootstrapError::InvalidConfig(_) => ErrorKind::Config,
        _ => ErrorKind::Estimation,
    };
    PipelineError::new(kind, "bootstrap", "bca", e)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::new(ErrorKind::Data, "cli", "write_outputs", format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Csv(PathBuf),
    Preset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub name: String,
    pub condition: String,
    pub reason: String,
}

impl FilterSpec {
    /// `name | condition | reason`
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        let parts: Vec<&str> = s.split('|').map(str::trim).collect();
        match parts[..] {
            [name, condition, reason] if !name.is_empty() && !condition.is_empty() => Ok(FilterSpec {
                name: name.into(),
                condition: condition.into(),
                reason: reason.into(),
            }),
            _ => Err(PipelineError::config("parse_filter", format!("expected `name | condition | reason`, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Option<InputSource>,
    pub unit: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Option<Vec<String>>,
    pub drop_missing: bool,
    pub filters: Vec<FilterSpec>,
    pub grid: GridSpec,
    pub truncate_pct: f64,
    pub two_sided: bool,
    pub smd_variance: SmdVariance,
    pub bootstrap: usize,
    pub jack_groups: usize,
    pub level: f64,
    pub seed: u64,
    pub boot_half_width: f64,
    pub boot_step: f64,
    pub bins: usize,
    /// preset overrides
    pub n: Option<usize>,
    pub psi_true: Option<f64>,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            unit: "unit_id".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariates: None,
            drop_missing: false,
            filters: Vec::new(),
            grid: GridSpec::default(),
            truncate_pct: 99.0,
            two_sided: false,
            smd_variance: SmdVariance::Unweighted,
            bootstrap: 0,
            jack_groups: 1000,
            level: 0.95,
            seed: 42,
            boot_half_width: 0.1,
            boot_step: 0.01,
            bins: 50,
            n: None,
            psi_true: None,
            out: None,
            threads: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
    v.trim().parse().map_err(|_| PipelineError::config("parse_config", format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, PipelineError> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(PipelineError::config("parse_config", format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// Parses `LO,HI,STEP`.
pub fn parse_grid(v: &str) -> Result<GridSpec, PipelineError> {
    let parts: Vec<&str> = v.split(',').collect();
    let [lo, hi, step] = parts[..] else {
        return Err(PipelineError::config("parse_grid", format!("expected LO,HI,STEP, got {v:?}")));
    };
    GridSpec::new(parse_num("grid", lo)?, parse_num("grid", hi)?, parse_num("grid", step)?)
        .map_err(|e| PipelineError::config("parse_grid", e))
}

/// Splits a flat config file into `(key, value)` pairs; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PipelineError::config("parse_config", format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one setting; keys match the long flag names.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        match key.as_str() {
            "input" => self.input = Some(InputSource::Csv(PathBuf::from(value))),
            "preset" => self.input = Some(InputSource::Preset(value.trim().to_string())),
            "unit" => self.unit = value.trim().into(),
            "treatment" => self.treatment = value.trim().into(),
            "outcome" => self.outcome = value.trim().into(),
            "covariates" => {
                self.covariates =
                    Some(value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
            }
            "drop-missing" => self.drop_missing = parse_bool(&key, value)?,
            "filter" => self.filters.push(FilterSpec::parse(value)?),
            "grid" => self.grid = parse_grid(value)?,
            "truncate-pct" => self.truncate_pct = parse_num(&key, value)?,
            "two-sided" => self.two_sided = parse_bool(&key, value)?,
            "smd-variance" => {
                self.smd_variance = match value.trim() {
                    "unweighted" => SmdVariance::Unweighted,
                    "weighted" => SmdVariance::Weighted,
                    v => return Err(PipelineError::config("parse_config", format!("smd-variance: unknown {v:?}"))),
                }
            }
            "bootstrap" => self.bootstrap = parse_num(&key, value)?,
            "jack-groups" => self.jack_groups = parse_num(&key, value)?,
            "level" => self.level = parse_num(&key, value)?,
            "seed" => self.seed = parse_num(&key, value)?,
            "boot-half-width" => self.boot_half_width = parse_num(&key, value)?,
            "boot-step" => self.boot_step = parse_num(&key, value)?,
            "bins" => self.bins = parse_num(&key, value)?,
            "n" => self.n = Some(parse_num(&key, value)?),
            "psi-true" => self.psi_true = Some(parse_num(&key, value)?),
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "threads" => self.threads = parse_num(&key, value)?,
            _ => return Err(PipelineError::config("parse_config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::config("read_config", format!("{}: {e}", path.display())))?;
        for (k, v) in parse_config_text(&text)? {
            self.apply(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::config("validate", m));
        if self.input.is_none() {
            return bad("no input: give --input PATH or --preset facet".into());
        }
        if let Some(InputSource::Preset(p)) = &self.input {
            if p != "facet" {
                return bad(format!("unknown preset {p:?} (available: facet)"));
            }
        }
        if !(self.truncate_pct > 50.0 && self.truncate_pct <= 100.0) {
            return bad(format!("truncate-pct {} must be in (50, 100]", self.truncate_pct));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} must be in (0, 1)", self.level));
        }
        if self.bootstrap != 0 && self.bootstrap < 100 {
            return bad(format!("bootstrap {} must be 0 (off) or at least 100", self.bootstrap));
        }
        if self.bootstrap != 0 && self.jack_groups < 20 {
            return bad(format!("jack-groups {} must be at least 20", self.jack_groups));
        }
        if !(self.boot_half_width > 0.0 && self.boot_step > 0.0 && self.boot_step <= 2.0 * self.boot_half_width) {
            return bad("boot-half-width and boot-step must be positive with step <= 2 * half-width".into());
        }
        if self.bins == 0 {
            return bad("bins must be positive".into());
        }
        Ok(())
    }

    fn execution(&self) -> Execution {
        if self.threads == 0 { Execution::Serial } else { Execution::Threads(self.threads) }
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            input: self.input.clone(),
            unit: self.unit.clone(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
            covariates: self.covariates.clone(),
            drop_missing: self.drop_missing,
            filters: self.filters.clone(),
            grid: GridEcho::of(&self.grid),
            truncate_pct: self.truncate_pct,
            two_sided: self.two_sided,
            smd_variance: self.smd_variance,
            bootstrap: self.bootstrap,
            jack_groups: self.jack_groups,
            level: self.level,
            seed: self.seed,
            boot_half_width: self.boot_half_width,
            boot_step: self.boot_step,
            bins: self.bins,
            n: self.n,
            psi_true: self.psi_true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEcho {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
    pub n_points: usize,
}

impl GridEcho {
    fn of(g: &GridSpec) -> Self {
        GridEcho { lo: g.lo, hi: g.hi, step: g.step, n_points: g.len() }
    }
}

/// Effective settings as echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub input: Option<InputSource>,
    pub unit: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Option<Vec<String>>,
    pub drop_missing: bool,
    pub filters: Vec<FilterSpec>,
    pub grid: GridEcho,
    pub truncate_pct: f64,
    pub two_sided: bool,
    pub smd_variance: SmdVariance,
    pub bootstrap: usize,
    pub jack_groups: usize,
    pub level: f64,
    pub seed: u64,
    pub boot_half_width: f64,
    pub boot_step: f64,
    pub bins: usize,
    pub n: Option<usize>,
    pub psi_true: Option<f64>,
}

/// The analysis panel plus how it was obtained.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    pub panel: Panel,
    pub flow: SampleFlow,
    pub truth: Option<GroundTruth>,
}

/// Loads or generates the panel and applies the sample flow.
pub fn prepare_input(cfg: &RunConfig) -> Result<PreparedInput, PipelineError> {
    cfg.validate()?;
    let (raw, mut filters, initial, truth, model_covs) = match cfg.input.as_ref().expect("validated") {
        InputSource::Preset(_) => {
            let mut synth = facet_preset();
            synth.seed = cfg.seed;
            if let Some(n) = cfg.n {
                synth.n = n;
            }
            if let Some(psi) = cfg.psi_true {
                synth.psi_true = psi;
            }
            let covs = cfg.covariates.clone().unwrap_or_else(|| synth.covariates.iter().map(|c| c.name.clone()).collect());
            let (cohort, truth, _) = facet_cohort(&synth).map_err(synth_err)?;
            let filters = cohort_filters(cohort.schema()).map_err(panel_err("sample_flow"))?;
            (cohort, filters, COHORT_STAGES[0], Some(truth), covs)
        }
        InputSource::Csv(path) => {
            let covs = match &cfg.covariates {
                Some(c) => c.clone(),
                None => header_covariates(path, cfg)?,
            };
            let mapping = ColumnMapping {
                unit: cfg.unit.clone(),
                treatment: cfg.treatment.clone(),
                outcome: cfg.outcome.clone(),
                covariates: covs.clone(),
                drop_missing: cfg.drop_missing,
            };
            let raw = load_panel(path, &mapping).map_err(panel_err("load_panel"))?;
            (raw, Vec::new(), crate::panel::INITIAL_STAGE, None, covs)
        }
    };
    for f in &cfg.filters {
        filters.push(
            RowFilter::from_condition(f.name.clone(), f.reason.clone(), &f.condition, raw.schema())
                .map_err(|e| PipelineError::config("parse_filter", e))?,
        );
    }
    let (panel, flow) = crate::panel::sample_flow_labeled(raw, initial, &filters).map_err(panel_err("sample_flow"))?;
    let panel = panel.select_covariates(&model_covs).map_err(panel_err("select_covariates"))?;
    panel.require_both_arms().map_err(panel_err("sample_flow"))?;
    Ok(PreparedInput { panel, flow, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsSection {
    pub raw: WeightStats,
    pub raw_mean_flag: bool,
    pub truncated: WeightStats,
    pub truncation: Truncation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestSection {
    pub psi_hat: f64,
    pub psi_hat_pp: f64,
    pub indep_coef_at_hat: f64,
    pub crossing_bracket: (f64, f64),
    pub refined: bool,
    pub refine_evals: usize,
    pub crossings: usize,
    pub warnings: Vec<String>,
    pub treatment_model_terms: Vec<String>,
    pub grid: GridEcho,
}

impl GestSection {
    fn of(g: &GestResult) -> Self {
        GestSection {
            psi_hat: g.psi_hat,
            psi_hat_pp: g.psi_hat * 100.0,
            indep_coef_at_hat: g.indep_coef_at_hat,
            crossing_bracket: g.crossing_bracket,
            refined: g.refined,
            refine_evals: g.refine_evals,
            crossings: g.crossings,
            warnings: g.warnings.clone(),
            treatment_model_terms: g.treatment_model_terms.clone(),
            grid: GridEcho::of(&g.grid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triangulation {
    pub gest_rd: f64,
    pub iptw_rd: f64,
    pub discrepancy_pp: f64,
    /// discrepancy relative to the IPTW estimate, in percent
    pub discrepancy_pct: f64,
}

impl Triangulation {
    pub fn new(gest_rd: f64, iptw_rd: f64) -> Self {
        let d = (gest_rd - iptw_rd).abs();
        Triangulation { gest_rd, iptw_rd, discrepancy_pp: d * 100.0, discrepancy_pct: d / iptw_rd.abs() * 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSection {
    #[serde(flatten)]
    pub summary: BcaSummary,
    /// grid re-solved on every resample
    pub resample_grid: GridEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: ToolInfo,
    pub input_provenance: String,
    pub seed: u64,
    pub config: ConfigEcho,
    pub sample_flow: SampleFlow,
    pub group_summary: GroupSummary,
    pub balance: BalanceReport,
    pub weights: WeightsSection,
    pub gest: GestSection,
    pub msm: MsmResult,
    pub triangulation: Triangulation,
    pub bootstrap: Option<BootstrapSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_truth: Option<GroundTruth>,
}

/// Everything a run produces, before anything is written.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: RunReport,
    pub panel: Panel,
    pub curve: Vec<GestCurvePoint>,
    pub raw_weights: WeightSet,
    pub truncated_weights: WeightSet,
    pub bca: Option<BcaResult>,
}

/// Intermediate results of the diagnose stage.
pub struct Diagnosed {
    pub input: PreparedInput,
    pub groups: GroupSummary,
    pub raw: WeightSet,
    pub truncated: WeightSet,
    pub balance: BalanceReport,
    pub msm: Option<MsmResult>,
}

fn diagnose_stage(cfg: &RunConfig, with_msm: bool) -> Result<Diagnosed, PipelineError> {
    let input = prepare_input(cfg)?;
    let panel = &input.panel;
    let groups = summarize_groups(panel).map_err(panel_err("summarize_groups"))?;
    let scores = fit_propensity(panel).map_err(iptw_err("fit_propensity"))?;
    let raw = stabilized_weights(&scores, panel).map_err(iptw_err("stabilized_weights"))?;
    let tails = if cfg.two_sided { TailMode::Both } else { TailMode::Upper };
    let truncated = truncate_weights(&raw, cfg.truncate_pct, tails).map_err(iptw_err("truncate_weights"))?;
    let msm = if with_msm { Some(fit_msm(panel, &truncated).map_err(iptw_err("fit_msm"))?) } else { None };
    let balance = balance_report(
        panel,
        &scores,
        BalanceInputs { raw_weights: Some(&raw), weights: Some(&truncated), groups: Some(&groups), msm: msm.as_ref() },
        cfg.smd_variance,
    )
    .map_err(diag_err)?;
    Ok(Diagnosed { input, groups, raw, truncated, balance, msm })
}

/// Resample estimator: solves on the narrowed `grid`, falling back to `full` when the crossing
/// lies outside it.
pub fn gest_estimator(grid: GridSpec, full: GridSpec) -> impl Fn(&Panel) -> Result<f64, GestError> + Sync + Send {
    move |p: &Panel| match g_estimate(p, &grid) {
        Err(GestError::NoCrossing { .. }) => g_estimate(p, &full).map(|r| r.psi_hat),
        r => r.map(|r| r.psi_hat),
    }
}

fn bootstrap_stage(cfg: &RunConfig, panel: &Panel, psi_hat: f64) -> Result<(BcaResult, GridSpec), PipelineError> {
    let grid = GridSpec::around(psi_hat, cfg.boot_half_width, cfg.boot_step).map_err(gest_err)?;
    let bcfg = BcaConfig {
        n_resamples: cfg.bootstrap,
        level: cfg.level,
        seed: cfg.seed,
        jack_groups: cfg.jack_groups,
        execution: cfg.execution(),
    };
    let result = bca(panel, gest_estimator(grid, cfg.grid), &bcfg).map_err(boot_err)?;
    Ok((result, grid))
}

/// Full pipeline without writing anything.
pub fn execute(cfg: &RunConfig) -> Result<PipelineRun, PipelineError> {
    let d = diagnose_stage(cfg, true)?;
    let panel = d.input.panel;
    let gest = g_estimate(&panel, &cfg.grid).map_err(gest_err)?;
    let msm = d.msm.expect("requested");
    let bootstrap = if cfg.bootstrap > 0 { Some(bootstrap_stage(cfg, &panel, gest.psi_hat)?) } else { None };
    let report = RunReport {
        tool: ToolInfo { name: TOOL_NAME.into(), version: TOOL_VERSION.into() },
        input_provenance: panel.provenance().to_string(),
        seed: cfg.seed,
        config: cfg.echo(),
        sample_flow: d.input.flow,
        group_summary: d.groups,
        balance: d.balance,
        weights: WeightsSection {
            raw: d.raw.stats,
            raw_mean_flag: d.raw.mean_flag,
            truncated: d.truncated.stats,
            truncation: d.truncated.truncation.clone(),
        },
        gest: GestSection::of(&gest),
        triangulation: Triangulation::new(gest.psi_hat, msm.risk_difference),
        msm,
        bootstrap: bootstrap.as_ref().map(|(b, g)| BootstrapSection { summary: b.summary(), resample_grid: GridEcho::of(g) }),
        synthetic_truth: d.input.truth,
    };
    Ok(PipelineRun {
        report,
        panel,
        curve: gest.curve,
        raw_weights: d.raw,
        truncated_weights: d.truncated,
        bca: bootstrap.map(|(b, _)| b),
    })
}

/// Every header column other than the unit, treatment and outcome columns.
fn header_covariates(path: &Path, cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let unreadable = |e: csv::Error| PipelineError::new(ErrorKind::Data, "panel", "load_panel", format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(unreadable)?;
    let mapped = [&cfg.unit, &cfg.treatment, &cfg.outcome];
    Ok(reader.headers().map_err(unreadable)?.iter().filter(|h| !mapped.contains(&&h.to_string())).map(String::from).collect())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, PipelineError> {
    let dir = cfg.out.as_deref().ok_or_else(|| PipelineError::config("validate", "--out DIR is required"))?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(dir)
}

fn write_curve(path: &Path, curve: &[GestCurvePoint]) -> Result<(), PipelineError> {
    write_csv_rows(
        path,
        &["psi", "indep_coef", "se"],
        curve.iter().map(|c| vec![c.psi.to_string(), c.indep_coef.to_string(), c.se.to_string()]),
    )
    .map_err(io_err(path))
}

fn write_hist(path: &Path, bins: &[HistBin]) -> Result<(), PipelineError> {
    write_histogram(path, bins).map_err(io_err(path))
}

fn json(path: &Path, v: &impl Serialize) -> Result<(), PipelineError> {
    write_json(path, v).map_err(io_err(path))
}

/// Full pipeline; writes report.json, sample_flow.json, gest_curve.csv, weight and bootstrap
/// histograms into `cfg.out`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    let dir = out_dir(cfg)?.to_path_buf();
    let run = execute(cfg)?;
    json(&dir.join("sample_flow.json"), &run.report.sample_flow)?;
    write_curve(&dir.join("gest_curve.csv"), &run.curve)?;
    write_hist(&dir.join("weights_raw_hist.csv"), &run.raw_weights.histogram(cfg.bins))?;
    write_hist(&dir.join("weights_trunc_hist.csv"), &run.truncated_weights.histogram(cfg.bins))?;
    // header-only file when the bootstrap is off or degenerate
    let boot_bins = match &run.bca {
        Some(b) => bootstrap_histogram(b, cfg.bins).unwrap_or_default(),
        None => Vec::new(),
    };
    write_hist(&dir.join("bootstrap_hist.csv"), &boot_bins)?;
    json(&dir.join("report.json"), &run.report)?;
    Ok(run.report)
}

/// `simulate`: writes panel.csv and ground_truth.json (plus cohort.csv when `cohort` is set).
pub fn run_simulate(cfg: &RunConfig, cohort: bool) -> Result<GroundTruth, PipelineError> {
    let dir = out_dir(cfg)?.to_path_buf();
    let mut cfg = cfg.clone();
    if cfg.input.is_none() {
        cfg.input = Some(InputSource::Preset("facet".into()));
    }
    if matches!(cfg.input, Some(InputSource::Csv(_))) {
        return Err(PipelineError::config("simulate", "simulate takes --preset, not --input"));
    }
    let mut c = cfg.clone();
    c.filters.clear();
    let input = prepare_input(&c)?;
    if cohort {
        let mut synth = facet_preset();
        synth.seed = cfg.seed;
        if let Some(n) = cfg.n {
            synth.n = n;
        }
        if let Some(psi) = cfg.psi_true {
            synth.psi_true = psi;
        }
        let (raw, _, _) = facet_cohort(&synth).map_err(synth_err)?;
        let p = dir.join("cohort.csv");
        write_csv(&raw, &p).map_err(panel_err("write_csv"))?;
        json(&dir.join("sample_flow.json"), &input.flow)?;
    }
    write_csv(&input.panel, dir.join("panel.csv")).map_err(panel_err("write_csv"))?;
    let truth = input.truth.expect("preset input has ground truth");
    json(&dir.join("ground_truth.json"), &truth)?;
    Ok(truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub tool: ToolInfo,
    pub input_provenance: String,
    pub config: ConfigEcho,
    pub group_summary: GroupSummary,
    pub balance: BalanceReport,
    pub weights: WeightsSection,
}

/// `diagnose`: sample flow, group summary, balance and weight histograms.
pub fn run_diagnose(cfg: &RunConfig) -> Result<DiagnoseReport, PipelineError> {
    let dir = out_dir(cfg)?.to_path_buf();
    let d = diagnose_stage(cfg, false)?;
    let report = DiagnoseReport {
        tool: ToolInfo { name: TOOL_NAME.into(), version: TOOL_VERSION.into() },
        input_provenance: d.input.panel.provenance().to_string(),
        config: cfg.echo(),
        group_summary: d.groups,
        balance: d.balance,
        weights: WeightsSection {
            raw: d.raw.stats,
            raw_mean_flag: d.raw.mean_flag,
            truncated: d.truncated.stats,
            truncation: d.truncated.truncation.clone(),
        },
    };
    json(&dir.join("sample_flow.json"), &d.input.flow)?;
    write_hist(&dir.join("weights_raw_hist.csv"), &d.raw.histogram(cfg.bins))?;
    write_hist(&dir.join("weights_trunc_hist.csv"), &d.truncated.histogram(cfg.bins))?;
    json(&dir.join("diagnostics.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub tool: ToolInfo,
    pub input_provenance: String,
    pub config: ConfigEcho,
    pub gest: GestSection,
    pub msm: MsmResult,
    pub triangulation: Triangulation,
}

/// `estimate`: G-estimation and the weighted MSM, with the curve and weight histograms.
pub fn run_estimate(cfg: &RunConfig) -> Result<EstimateReport, PipelineError> {
    let dir = out_dir(cfg)?.to_path_buf();
    let d = diagnose_stage(cfg, true)?;
    let gest = g_estimate(&d.input.panel, &cfg.grid).map_err(gest_err)?;
    let msm = d.msm.expect("requested");
    let report = EstimateReport {
        tool: ToolInfo { name: TOOL_NAME.into(), version: TOOL_VERSION.into() },
        input_provenance: d.input.panel.provenance().to_string(),
        config: cfg.echo(),
        gest: GestSection::of(&gest),
        triangulation: Triangulation::new(gest.psi_hat, msm.risk_difference),
        msm,
    };
    write_curve(&dir.join("gest_curve.csv"), &gest.curve)?;
    write_hist(&dir.join("weights_raw_hist.csv"), &d.raw.histogram(cfg.bins))?;
    write_hist(&dir.join("weights_trunc_hist.csv"), &d.truncated.histogram(cfg.bins))?;
    json(&dir.join("estimate.json"), &report)?;
    Ok(report)
}

/// `bootstrap`: BCa interval for the G-estimate.
pub fn run_bootstrap(cfg: &RunConfig) -> Result<BcaResult, PipelineError> {
    if cfg.bootstrap == 0 {
        return Err(PipelineError::config("validate", "bootstrap needs --bootstrap B with B >= 100"));
    }
    let dir = out_dir(cfg)?.to_path_buf();
    let input = prepare_input(cfg)?;
    let gest = g_estimate(&input.panel, &cfg.grid).map_err(gest_err)?;
    let (result, _) = bootstrap_stage(cfg, &input.panel, gest.psi_hat)?;
    let bins = bootstrap_histogram(&result, cfg.bins).unwrap_or_default();
    write_hist(&dir.join("bootstrap_hist.csv"), &bins)?;
    json(&dir.join("bca.json"), &result)?;
    Ok(result)
}

/// Convenience for callers that only want the sample flow of a panel.
pub fn flow_only(panel: Panel, filters: &[RowFilter]) -> Result<(Panel, SampleFlow), PipelineError> {
    sample_flow(panel, filters).map_err(panel_err("sample_flow"))
}
