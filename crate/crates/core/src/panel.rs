//! One-row-per-unit panel: CSV ingestion, sample-flow accounting and arm summaries.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::output::write_atomic;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("cannot read {path}: {reason}")]
    FileUnreadable { path: String, reason: String },
    #[error("column {column:?} not found in header")]
    SchemaMismatch { column: String },
    #[error("row {row}: treatment value {value:?} is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: String },
    #[error("row {row}: outcome value {value:?} is not 0 or 1")]
    NonBinaryOutcome { row: usize, value: String },
    #[error("row {row}: missing value in column {column:?}")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: column {column:?} value {value:?} is not numeric")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} covariates, found {found}")]
    CovariateLength { row: usize, expected: usize, found: usize },
    #[error("row {row}: covariate {column:?} is not finite")]
    NonFinite { row: usize, column: String },
    #[error("duplicate unit id {0:?}")]
    DuplicateUnit(String),
    #[error("unknown covariate {0:?}")]
    UnknownCovariate(String),
    #[error("stage {stage:?} leaves no rows")]
    EmptyResult { stage: String },
    #[error("panel has no {missing} rows; both arms are required")]
    SingleArm { missing: &'static str },
    #[error("bad filter {expr:?}: {reason}")]
    BadFilter { expr: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub unit_id: String,
    pub treatment: bool,
    pub outcome: bool,
    pub covariates: Vec<f64>,
}

impl PanelRow {
    pub fn a(&self) -> f64 {
        if self.treatment { 1.0 } else { 0.0 }
    }

    pub fn y(&self) -> f64 {
        if self.outcome { 1.0 } else { 0.0 }
    }
}

/// Immutable validated panel. Unit ids are unique and every covariate is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    schema: Vec<String>,
    rows: Vec<PanelRow>,
    provenance: String,
    dropped_missing: usize,
}

impl Panel {
    pub fn new(schema: Vec<String>, rows: Vec<PanelRow>, provenance: impl Into<String>) -> Result<Self, PanelError> {
        let mut seen = HashSet::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.covariates.len() != schema.len() {
                return Err(PanelError::CovariateLength { row: i, expected: schema.len(), found: r.covariates.len() });
            }
            if let Some(j) = r.covariates.iter().position(|v| !v.is_finite()) {
                return Err(PanelError::NonFinite { row: i, column: schema[j].clone() });
            }
            if !seen.insert(r.unit_id.as_str()) {
                return Err(PanelError::DuplicateUnit(r.unit_id.clone()));
            }
        }
        Ok(Panel { schema, rows, provenance: provenance.into(), dropped_missing: 0 })
    }

    /// Skips validation; callers guarantee the invariants (used for bootstrap resamples).
    pub(crate) fn from_trusted(schema: Vec<String>, rows: Vec<PanelRow>, provenance: String) -> Self {
        Panel { schema, rows, provenance, dropped_missing: 0 }
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn rows(&self) -> &[PanelRow] {
        &self.rows
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Rows skipped during ingestion because of missing values.
    pub fn dropped_missing(&self) -> usize {
        self.dropped_missing
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.rows.iter().filter(|r| r.treatment).count()
    }

    pub fn treatment(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.treatment).collect()
    }

    pub fn outcome(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.outcome).collect()
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize, PanelError> {
        self.schema
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| PanelError::UnknownCovariate(name.to_string()))
    }

    pub fn covariate(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.covariates[j]).collect()
    }

    pub fn require_both_arms(&self) -> Result<(), PanelError> {
        let t = self.n_treated();
        if t == 0 {
            return Err(PanelError::SingleArm { missing: "treated" });
        }
        if t == self.rows.len() {
            return Err(PanelError::SingleArm { missing: "control" });
        }
        Ok(())
    }

    /// Projects onto the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Panel, PanelError> {
        let idx: Vec<usize> = names.iter().map(|n| self.covariate_index(n)).collect::<Result<_, _>>()?;
        let rows = self
            .rows
            .iter()
            .map(|r| PanelRow { covariates: idx.iter().map(|&j| r.covariates[j]).collect(), ..r.clone() })
            .collect();
        Ok(Panel { schema: names.to_vec(), rows, provenance: self.provenance.clone(), dropped_missing: self.dropped_missing })
    }

    /// Appends a covariate column.
    pub fn with_covariate(&self, name: &str, values: &[f64]) -> Result<Panel, PanelError> {
        if values.len() != self.rows.len() {
            return Err(PanelError::CovariateLength { row: 0, expected: self.rows.len(), found: values.len() });
        }
        let mut schema = self.schema.clone();
        schema.push(name.to_string());
        let rows = self
            .rows
            .iter()
            .zip(values)
            .map(|(r, &v)| {
                let mut r = r.clone();
                r.covariates.push(v);
                r
            })
            .collect();
        Panel::new(schema, rows, self.provenance.clone())
    }

    fn keep(&self, keep: impl Fn(&PanelRow) -> bool) -> Panel {
        Panel {
            schema: self.schema.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            provenance: self.provenance.clone(),
            dropped_missing: self.dropped_missing,
        }
    }
}

/// Explicit CSV column mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub unit: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    /// Drop rows with missing values (and count them) instead of failing.
    pub drop_missing: bool,
}

impl ColumnMapping {
    /// Mapping for files produced by [`write_csv`].
    pub fn canonical(covariates: &[String]) -> Self {
        ColumnMapping {
            unit: "unit_id".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariates: covariates.to_vec(),
            drop_missing: false,
        }
    }
}

fn is_missing(raw: &str) -> bool {
    let t = raw.trim();
    t.is_empty() || ["na", "nan", "null", "none"].contains(&t.to_ascii_lowercase().as_str())
}

enum Field {
    Value(f64),
    Missing,
    Bad,
}

fn parse_field(raw: &str) -> Field {
    if is_missing(raw) {
        return Field::Missing;
    }
    match raw.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Field::Value(v),
        Ok(_) => Field::Missing,
        Err(_) => Field::Bad,
    }
}

fn parse_flag(raw: &str) -> Option<Option<bool>> {
    match parse_field(raw) {
        Field::Missing => Some(None),
        Field::Value(v) if v == 0.0 => Some(Some(false)),
        Field::Value(v) if v == 1.0 => Some(Some(true)),
        _ => None,
    }
}

/// Reads a panel from CSV. Row indices in errors count data rows from 0.
pub fn load_panel(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<Panel, PanelError> {
    let path = path.as_ref();
    let unreadable = |e: &dyn fmt::Display| PanelError::FileUnreadable { path: path.display().to_string(), reason: e.to_string() };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| unreadable(&e))?;
    let headers = reader.headers().map_err(|e| unreadable(&e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| PanelError::SchemaMismatch { column: name.to_string() })
    };
    let unit_col = find(&mapping.unit)?;
    let a_col = find(&mapping.treatment)?;
    let y_col = find(&mapping.outcome)?;
    let cov_cols: Vec<usize> = mapping.covariates.iter().map(|c| find(c)).collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut dropped = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let get = |j: usize| rec.get(j).unwrap_or("");
        let missing = |column: &str| PanelError::MissingValue { row: i, column: column.to_string() };

        let mut absent: Option<PanelError> = None;
        let unit = get(unit_col).trim().to_string();
        if is_missing(&unit) {
            absent.get_or_insert(missing(&mapping.unit));
        }
        let a = match parse_flag(get(a_col)) {
            None => return Err(PanelError::NonBinaryTreatment { row: i, value: get(a_col).to_string() }),
            Some(v) => v,
        };
        if a.is_none() {
            absent.get_or_insert(missing(&mapping.treatment));
        }
        let y = match parse_flag(get(y_col)) {
            None => return Err(PanelError::NonBinaryOutcome { row: i, value: get(y_col).to_string() }),
            Some(v) => v,
        };
        if y.is_none() {
            absent.get_or_insert(missing(&mapping.outcome));
        }
        let mut covariates = Vec::with_capacity(cov_cols.len());
        for (name, &j) in mapping.covariates.iter().zip(&cov_cols) {
            match parse_field(get(j)) {
                Field::Value(v) => covariates.push(v),
                Field::Missing => {
                    absent.get_or_insert(missing(name));
                }
                Field::Bad => {
                    return Err(PanelError::NotNumeric { row: i, column: name.clone(), value: get(j).to_string() })
                }
            }
        }
        match (absent, a, y) {
            (None, Some(treatment), Some(outcome)) => rows.push(PanelRow { unit_id: unit, treatment, outcome, covariates }),
            (Some(_), ..) if mapping.drop_missing => dropped += 1,
            (Some(e), ..) => return Err(e),
            _ => unreachable!("absent is set whenever a flag is missing"),
        }
    }
    let mut panel = Panel::new(mapping.covariates.clone(), rows, format!("csv:{}", path.display()))?;
    panel.dropped_missing = dropped;
    Ok(panel)
}

/// Writes the canonical CSV layout (`unit_id,treatment,outcome,<schema>`), atomically.
///
/// Floats use Rust's shortest round-trip formatting, so reloading is bit-exact.
pub fn write_csv(panel: &Panel, path: impl AsRef<Path>) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["unit_id".to_string(), "treatment".into(), "outcome".into()];
    header.extend(panel.schema.iter().cloned());
    w.write_record(&header)?;
    for r in &panel.rows {
        let mut rec = vec![r.unit_id.clone(), (r.treatment as u8).to_string(), (r.outcome as u8).to_string()];
        rec.extend(r.covariates.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| PanelError::Io(e.into_error()))?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

type Predicate = Arc<dyn Fn(&PanelRow) -> bool + Send + Sync>;

/// A named row predicate; rows for which it returns true are kept.
#[derive(Clone)]
pub struct RowFilter {
    pub name: String,
    pub reason: String,
    predicate: Predicate,
}

impl fmt::Debug for RowFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RowFilter").field("name", &self.name).field("reason", &self.reason).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl RowFilter {
    pub fn new(
        name: impl Into<String>,
        reason: impl Into<String>,
        keep: impl Fn(&PanelRow) -> bool + Send + Sync + 'static,
    ) -> Self {
        RowFilter { name: name.into(), reason: reason.into(), predicate: Arc::new(keep) }
    }

    /// Parses `column OP number` where column is `treatment`, `outcome` or a schema covariate
    /// and OP is one of `== != < <= > >=`.
    pub fn from_condition(
        name: impl Into<String>,
        reason: impl Into<String>,
        expr: &str,
        schema: &[String],
    ) -> Result<Self, PanelError> {
        let bad = |reason: &str| PanelError::BadFilter { expr: expr.to_string(), reason: reason.to_string() };
        let parts: Vec<&str> = expr.split_whitespace().collect();
        let [col, op, val] = parts[..] else {
            return Err(bad("expected `column OP value`"));
        };
        let op = match op {
            "==" | "=" => Op::Eq,
            "!=" => Op::Ne,
            "<" => Op::Lt,
            "<=" => Op::Le,
            ">" => Op::Gt,
            ">=" => Op::Ge,
            _ => return Err(bad("unknown operator")),
        };
        let val: f64 = val.parse().map_err(|_| bad("value is not numeric"))?;
        let cmp = move |x: f64| match op {
            Op::Eq => x == val,
            Op::Ne => x != val,
            Op::Lt => x < val,
            Op::Le => x <= val,
            Op::Gt => x > val,
            Op::Ge => x >= val,
        };
        let filter = match col {
            "treatment" => RowFilter::new(name, reason, move |r| cmp(r.a())),
            "outcome" => RowFilter::new(name, reason, move |r| cmp(r.y())),
            c => {
                let j = schema.iter().position(|s| s == c).ok_or_else(|| bad("unknown column"))?;
                RowFilter::new(name, reason, move |r| cmp(r.covariates[j]))
            }
        };
        Ok(filter)
    }

    pub fn keeps(&self, row: &PanelRow) -> bool {
        (self.predicate)(row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStage {
    pub stage: String,
    pub n_units: usize,
    pub n_rows: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFlow {
    pub stages: Vec<FlowStage>,
}

pub const INITIAL_STAGE: &str = "Input panel";

/// Applies `filters` in order, recording counts after each; see [`sample_flow_labeled`].
pub fn sample_flow(raw: Panel, filters: &[RowFilter]) -> Result<(Panel, SampleFlow), PanelError> {
    sample_flow_labeled(raw, INITIAL_STAGE, filters)
}

/// Like [`sample_flow`] with a caller-chosen name for the first stage.
pub fn sample_flow_labeled(raw: Panel, initial: &str, filters: &[RowFilter]) -> Result<(Panel, SampleFlow), PanelError> {
    // one row per unit, so units and rows coincide
    let stage = |name: &str, p: &Panel, reason: &str| FlowStage {
        stage: name.to_string(),
        n_units: p.len(),
        n_rows: p.len(),
        reason: reason.to_string(),
    };
    if raw.is_empty() {
        return Err(PanelError::EmptyResult { stage: initial.to_string() });
    }
    let mut stages = vec![stage(initial, &raw, "n/a")];
    let mut current = raw;
    for f in filters {
        current = current.keep(|r| f.keeps(r));
        if current.is_empty() {
            return Err(PanelError::EmptyResult { stage: f.name.clone() });
        }
        stages.push(stage(&f.name, &current, &f.reason));
    }
    Ok((current, SampleFlow { stages }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n: usize,
    pub outcome_rate: f64,
    pub covariate_means: IndexMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// treated first, then control
    pub arms: Vec<ArmSummary>,
    pub overall_n: usize,
    pub overall_outcome_rate: f64,
    pub treated_fraction: f64,
    /// unadjusted treated minus control outcome rate
    pub risk_difference: f64,
    pub risk_difference_pp: f64,
    /// unadjusted treated over control outcome rate; absent when the control rate is 0
    pub risk_ratio: Option<f64>,
}

impl GroupSummary {
    pub fn treated(&self) -> &ArmSummary {
        &self.arms[0]
    }

    pub fn control(&self) -> &ArmSummary {
        &self.arms[1]
    }
}

pub fn summarize_groups(panel: &Panel) -> Result<GroupSummary, PanelError> {
    panel.require_both_arms()?;
    let arm = |label: &str, treated: bool| {
        let rows: Vec<&PanelRow> = panel.rows.iter().filter(|r| r.treatment == treated).collect();
        let n = rows.len();
        let events = rows.iter().filter(|r| r.outcome).count();
        let covariate_means = panel
            .schema
            .iter()
            .enumerate()
            .map(|(j, name)| (name.clone(), rows.iter().map(|r| r.covariates[j]).sum::<f64>() / n as f64))
            .collect();
        ArmSummary { arm: label.to_string(), n, outcome_rate: events as f64 / n as f64, covariate_means }
    };
    let t = arm("treated", true);
    let c = arm("control", false);
    let n = panel.len();
    let events = panel.rows.iter().filter(|r| r.outcome).count();
    let rd = t.outcome_rate - c.outcome_rate;
    Ok(GroupSummary {
        overall_n: n,
        overall_outcome_rate: events as f64 / n as f64,
        treated_fraction: t.n as f64 / n as f64,
        risk_difference: rd,
        risk_difference_pp: rd * 100.0,
        risk_ratio: (c.outcome_rate > 0.0).then(|| t.outcome_rate / c.outcome_rate),
        arms: vec![t, c],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, a: bool, y: bool, l: &[f64]) -> PanelRow {
        PanelRow { unit_id: id.into(), treatment: a, outcome: y, covariates: l.to_vec() }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let rows = vec![row("u", true, false, &[]), row("u", false, false, &[])];
        assert!(matches!(Panel::new(vec![], rows, "t"), Err(PanelError::DuplicateUnit(_))));
    }

    #[test]
    fn non_finite_covariate_rejected() {
        let rows = vec![row("u", true, false, &[f64::NAN])];
        assert!(matches!(Panel::new(vec!["l".into()], rows, "t"), Err(PanelError::NonFinite { .. })));
    }

    #[test]
    fn condition_parsing() {
        let schema = vec!["l1".to_string()];
        let f = RowFilter::from_condition("x", "r", "l1 >= 2", &schema).unwrap();
        assert!(f.keeps(&row("a", true, false, &[2.0])));
        assert!(!f.keeps(&row("a", true, false, &[1.5])));
        let f = RowFilter::from_condition("x", "r", "outcome == 1", &schema).unwrap();
        assert!(f.keeps(&row("a", false, true, &[0.0])));
        assert!(RowFilter::from_condition("x", "r", "l9 > 1", &schema).is_err());
        assert!(RowFilter::from_condition("x", "r", "l1 ~ 1", &schema).is_err());
        assert!(RowFilter::from_condition("x", "r", "l1 >", &schema).is_err());
    }

    #[test]
    fn all_zero_outcomes_summary() {
        let rows = vec![row("a", true, false, &[]), row("b", false, false, &[])];
        let s = summarize_groups(&Panel::new(vec![], rows, "t").unwrap()).unwrap();
        assert_eq!(s.treated().outcome_rate, 0.0);
        assert_eq!(s.control().outcome_rate, 0.0);
        assert_eq!(s.risk_difference, 0.0);
        assert_eq!(s.risk_ratio, None);
    }

    #[test]
    fn single_arm_rejected() {
        let rows = vec![row("a", true, false, &[]), row("b", true, true, &[])];
        let p = Panel::new(vec![], rows, "t").unwrap();
        assert!(matches!(summarize_groups(&p), Err(PanelError::SingleArm { missing: "control" })));
    }
}
