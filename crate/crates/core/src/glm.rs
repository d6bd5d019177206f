//! Weighted logistic regression by IRLS, with model-based and HC0 sandwich covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::expit;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("invalid design matrix: {0}")]
    InvalidDesign(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("complete or quasi-complete separation (max |coefficient| {max_abs_coef:.3e} after {iter} iterations)")]
    Separation { iter: usize, max_abs_coef: f64 },
    #[error("information matrix is singular at iteration {iter}")]
    Singular { iter: usize },
    #[error("IRLS did not converge within {max_iter} iterations")]
    NotConverged { max_iter: usize },
}

/// Row-major n x p regressor matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    columns: Vec<String>,
    values: Vec<f64>,
    n: usize,
    intercept: bool,
}

impl DesignMatrix {
    /// `values` is row-major with `columns.len()` entries per row.
    pub fn new(columns: Vec<String>, values: Vec<f64>, intercept: bool) -> Result<Self, GlmError> {
        let p = columns.len();
        if p == 0 {
            return Err(GlmError::InvalidDesign("no columns".into()));
        }
        if values.len() % p != 0 {
            return Err(GlmError::InvalidDesign(format!(
                "{} values do not fill rows of width {p}",
                values.len()
            )));
        }
        let n = values.len() / p;
        let x = DesignMatrix { columns, values, n, intercept };
        x.validate()?;
        Ok(x)
    }

    /// Builds `[1, cols...]` (with an "intercept" column when `intercept` is set) from column vectors.
    pub fn from_columns(names: &[&str], cols: &[&[f64]], intercept: bool) -> Result<Self, GlmError> {
        if names.len() != cols.len() {
            return Err(GlmError::DimensionMismatch { expected: names.len(), got: cols.len() });
        }
        // row count is unknown without columns; see `intercept_only`
        let n = cols.first().map(|c| c.len()).ok_or_else(|| GlmError::InvalidDesign("no columns given".into()))?;
        if cols.iter().any(|c| c.len() != n) {
            return Err(GlmError::InvalidDesign("columns have unequal length".into()));
        }
        let mut columns = Vec::with_capacity(cols.len() + 1);
        if intercept {
            columns.push("intercept".to_string());
        }
        columns.extend(names.iter().map(|s| s.to_string()));
        let p = columns.len();
        let mut values = Vec::with_capacity(n * p);
        for i in 0..n {
            if intercept {
                values.push(1.0);
            }
            values.extend(cols.iter().map(|c| c[i]));
        }
        DesignMatrix::new(columns, values, intercept)
    }

    pub fn intercept_only(n: usize) -> Result<Self, GlmError> {
        DesignMatrix::new(vec!["intercept".into()], vec![1.0; n], true)
    }

    fn validate(&self) -> Result<(), GlmError> {
        let p = self.ncols();
        if self.n < p {
            return Err(GlmError::InvalidDesign(format!("n = {} < p = {p}", self.n)));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(GlmError::InvalidDesign(format!(
                "non-finite value in row {} column {}",
                i / p,
                self.columns[i % p]
            )));
        }
        for j in 0..p {
            self.check_column(j)?;
        }
        Ok(())
    }

    fn check_column(&self, j: usize) -> Result<(), GlmError> {
        let p = self.ncols();
        let col = || self.values.iter().skip(j).step_by(p);
        if col().all(|&v| v == 0.0) {
            return Err(GlmError::InvalidDesign(format!("column {} is constant zero", self.columns[j])));
        }
        if j == 0 && self.intercept && col().any(|&v| v != 1.0) {
            return Err(GlmError::InvalidDesign("intercept column is not all ones".into()));
        }
        Ok(())
    }

    /// Overwrites column `j`, re-checking the column invariants.
    pub fn set_column(&mut self, j: usize, values: &[f64]) -> Result<(), GlmError> {
        let p = self.ncols();
        if j >= p {
            return Err(GlmError::DimensionMismatch { expected: p, got: j + 1 });
        }
        if values.len() != self.n {
            return Err(GlmError::DimensionMismatch { expected: self.n, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GlmError::InvalidDesign(format!("non-finite value in column {}", self.columns[j])));
        }
        for (i, &v) in values.iter().enumerate() {
            self.values[i * p + j] = v;
        }
        self.check_column(j)
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.ncols();
        &self.values[i * p..(i + 1) * p]
    }
}

/// Stopping rules for [`fit_logistic_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub max_iter: usize,
    pub coef_tol: f64,
    pub dev_tol: f64,
    /// Coefficients larger than this in absolute value are treated as separation.
    pub separation_bound: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions { max_iter: 100, coef_tol: 1e-10, dev_tol: 1e-12, separation_bound: 30.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Inverse of the (weighted) information matrix.
    pub cov_model: Vec<Vec<f64>>,
    /// HC0 sandwich, bread * meat * bread.
    pub cov_sandwich: Vec<Vec<f64>>,
    pub converged: bool,
    pub n_iter: usize,
    pub deviance: f64,
    /// max |X' W (y - p)| at the returned coefficients
    pub max_score: f64,
}

impl LogisticFit {
    pub fn se_model(&self, j: usize) -> f64 {
        self.cov_model[j][j].max(0.0).sqrt()
    }

    pub fn se_sandwich(&self, j: usize) -> f64 {
        self.cov_sandwich[j][j].max(0.0).sqrt()
    }

    pub fn index_of(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }
}

struct Eval {
    deviance: f64,
    score: Vec<f64>,
    // full symmetric p x p, row-major
    info: Vec<f64>,
    // sum of w^2 (y - mu)^2 x x', same layout
    meat: Vec<f64>,
}

fn evaluate(x: &DesignMatrix, y: &[bool], w: Option<&[f64]>, beta: &[f64]) -> Eval {
    let p = x.ncols();
    let mut deviance = 0.0;
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    let mut meat = vec![0.0; p * p];
    for i in 0..x.nrows() {
        let wi = w.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        let eta: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        // one exp per row: mu and both softplus branches share exp(-|eta|)
        let e = (-eta.abs()).exp();
        let mu = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        let mu = mu.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        let yi = if y[i] { 1.0 } else { 0.0 };
        let signed = if y[i] { -eta } else { eta };
        deviance += 2.0 * wi * (signed.max(0.0) + e.ln_1p());
        let r = wi * (yi - mu);
        let v = wi * mu * (1.0 - mu);
        let r2 = r * r;
        for j in 0..p {
            score[j] += r * row[j];
            let vj = v * row[j];
            let mj = r2 * row[j];
            for k in 0..=j {
                info[j * p + k] += vj * row[k];
                meat[j * p + k] += mj * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            info[k * p + j] = info[j * p + k];
            meat[k * p + j] = meat[j * p + k];
        }
    }
    Eval { deviance, score, info, meat }
}

fn check_inputs(x: &DesignMatrix, y: &[bool], w: Option<&[f64]>) -> Result<(), GlmError> {
    if y.len() != x.nrows() {
        return Err(GlmError::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    if let Some(w) = w {
        if w.len() != x.nrows() {
            return Err(GlmError::DimensionMismatch { expected: x.nrows(), got: w.len() });
        }
        if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(GlmError::InvalidWeights(format!("weight {bad} is negative or non-finite")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(GlmError::InvalidWeights("all weights are zero".into()));
        }
    }
    Ok(())
}

fn cholesky(info: &[f64], p: usize, iter: usize) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, GlmError> {
    let m = DMatrix::from_row_slice(p, p, info);
    let chol = m.cholesky().ok_or(GlmError::Singular { iter })?;
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(lo > 0.0) || (lo / hi) < 1e-7 {
        return Err(GlmError::Singular { iter });
    }
    Ok(chol)
}

pub fn fit_logistic(x: &DesignMatrix, y: &[bool], w: Option<&[f64]>) -> Result<LogisticFit, GlmError> {
    fit_logistic_with(x, y, w, &LogisticOptions::default(), None)
}

/// IRLS with step-halving; `start` warm-starts the coefficients.
pub fn fit_logistic_with(
    x: &DesignMatrix,
    y: &[bool],
    w: Option<&[f64]>,
    opts: &LogisticOptions,
    start: Option<&[f64]>,
) -> Result<LogisticFit, GlmError> {
    check_inputs(x, y, w)?;
    let p = x.ncols();
    // a response without variation among weighted rows has no finite MLE
    let mut seen = [false, false];
    for i in 0..x.nrows() {
        if w.map_or(1.0, |w| w[i]) > 0.0 {
            seen[y[i] as usize] = true;
        }
    }
    if !(seen[0] && seen[1]) {
        return Err(GlmError::Separation { iter: 0, max_abs_coef: f64::INFINITY });
    }

    let mut beta = match start {
        Some(s) if s.len() == p && s.iter().all(|v| v.is_finite()) => s.to_vec(),
        Some(s) => return Err(GlmError::DimensionMismatch { expected: p, got: s.len() }),
        None => vec![0.0; p],
    };
    let mut ev = evaluate(x, y, w, &beta);
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < opts.max_iter {
        n_iter += 1;
        let chol = cholesky(&ev.info, p, n_iter)?;
        let delta = chol.solve(&DVector::from_column_slice(&ev.score));

        let mut step = 1.0;
        let mut cand: Vec<f64>;
        let mut ev_c;
        let mut halvings = 0;
        loop {
            cand = beta.iter().zip(delta.iter()).map(|(b, d)| b + step * d).collect();
            ev_c = evaluate(x, y, w, &cand);
            let slack = 1e-10 * (1.0 + ev.deviance.abs());
            if ev_c.deviance.is_finite() && ev_c.deviance <= ev.deviance + slack {
                break;
            }
            halvings += 1;
            if halvings > 40 {
                break;
            }
            step *= 0.5;
        }

        let max_abs = cand.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        if max_abs > opts.separation_bound {
            return Err(GlmError::Separation { iter: n_iter, max_abs_coef: max_abs });
        }
        let coef_change = beta.iter().zip(&cand).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dev_change = (ev.deviance - ev_c.deviance).abs();
        beta = cand;
        ev = ev_c;
        // a stalled deviance only counts while the coefficients have settled too; under
        // quasi-separation the deviance flattens while a slope keeps growing
        if coef_change < opts.coef_tol || (dev_change < opts.dev_tol && coef_change < 1e-6) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GlmError::NotConverged { max_iter: opts.max_iter });
    }
    // a vanishing deviance means the fit drifted towards a perfect classifier and stalled
    let total_w: f64 = w.map_or(x.nrows() as f64, |w| w.iter().sum());
    if ev.deviance <= 1e-8 * total_w {
        let max_abs = beta.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        return Err(GlmError::Separation { iter: n_iter, max_abs_coef: max_abs });
    }

    let chol = cholesky(&ev.info, p, n_iter)?;
    let bread = chol.inverse();
    let meat = DMatrix::from_row_slice(p, p, &ev.meat);
    let sandwich = &bread * meat * &bread;

    Ok(LogisticFit {
        columns: x.columns().to_vec(),
        coefficients: beta,
        cov_model: symmetric_rows(&bread),
        cov_sandwich: symmetric_rows(&sandwich),
        converged,
        n_iter,
        deviance: ev.deviance,
        max_score: ev.score.iter().fold(0.0f64, |m, s| m.max(s.abs())),
    })
}

fn symmetric_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let p = m.nrows();
    (0..p)
        .map(|j| (0..p).map(|k| 0.5 * (m[(j, k)] + m[(k, j)])).collect())
        .collect()
}

/// Fitted probabilities `expit(X beta)`, always strictly inside (0, 1).
pub fn predict_prob(fit: &LogisticFit, x: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    predict_with(&fit.coefficients, x)
}

pub fn predict_with(beta: &[f64], x: &DesignMatrix) -> Result<Vec<f64>, GlmError> {
    if x.ncols() != beta.len() {
        return Err(GlmError::DimensionMismatch { expected: beta.len(), got: x.ncols() });
    }
    Ok((0..x.nrows())
        .map(|i| expit(x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum()))
        .collect())
}

/// Weighted Bernoulli log-likelihood and its gradient at `beta`.
pub fn log_likelihood(x: &DesignMatrix, y: &[bool], w: Option<&[f64]>, beta: &[f64]) -> (f64, Vec<f64>) {
    let ev = evaluate(x, y, w, beta);
    (-0.5 * ev.deviance, ev.score)
}
