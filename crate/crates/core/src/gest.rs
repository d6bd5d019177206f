//! G-estimation of an additive structural nested mean model.
//!
//! For each candidate `psi` the residualized outcome `Y*(psi) = Y - psi A` enters a logistic
//! treatment model `A ~ 1 + L + Y*(psi)`. The estimate is the `psi` at which the coefficient on
//! `Y*(psi)` crosses zero: a grid scan brackets the crossing, then Illinois false position
//! refits the model until the coefficient is below `COEF_TOL`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{fit_logistic_with, DesignMatrix, GlmError, LogisticOptions};
use crate::panel::{Panel, PanelError};

pub const COEF_TOL: f64 = 1e-6;
pub const WIDTH_TOL: f64 = 1e-5;
const MAX_REFINE: usize = 100;
pub const YSTAR_COLUMN: &str = "Y*(psi)";

#[derive(Debug, Error)]
pub enum GestError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("treatment model failed at psi = {psi}: {source}")]
    Fit {
        psi: f64,
        #[source]
        source: GlmError,
    },
    #[error("independence coefficient never changes sign on [{lo}, {hi}]; widen the grid")]
    NoCrossing { lo: f64, hi: f64 },
    #[error("curve has fewer than two points")]
    ShortCurve,
}

/// Inclusive grid `lo, lo + step, ..., hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { lo: 0.0, hi: 0.5, step: 0.005 }
    }
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self, GestError> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
            return Err(GestError::InvalidGrid("bounds and step must be finite".into()));
        }
        if !(lo < hi) {
            return Err(GestError::InvalidGrid(format!("lo {lo} must be below hi {hi}")));
        }
        if !(step > 0.0) || step > hi - lo {
            return Err(GestError::InvalidGrid(format!("step {step} must be in (0, hi - lo]")));
        }
        Ok(GridSpec { lo, hi, step })
    }

    /// Narrow grid `center +- half_width`, used to re-solve on resampled panels.
    pub fn around(center: f64, half_width: f64, step: f64) -> Result<Self, GestError> {
        GridSpec::new(center - half_width, center + half_width, step)
    }

    pub fn len(&self) -> usize {
        // tolerance absorbs (hi - lo) / step landing just below an integer
        ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GestCurvePoint {
    pub psi: f64,
    pub indep_coef: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestResult {
    pub psi_hat: f64,
    /// coefficient on `Y*(psi_hat)` after refinement
    pub indep_coef_at_hat: f64,
    pub crossing_bracket: (f64, f64),
    pub refined: bool,
    pub refine_evals: usize,
    /// number of sign changes seen on the grid
    pub crossings: usize,
    pub warnings: Vec<String>,
    pub treatment_model_terms: Vec<String>,
    pub grid: GridSpec,
    pub curve: Vec<GestCurvePoint>,
}

/// `Y - psi A` per row; control rows return `Y` unchanged.
pub fn residual_outcome(psi: f64, panel: &Panel) -> Vec<f64> {
    panel
        .rows()
        .iter()
        .map(|r| if r.treatment { r.y() - psi * r.a() } else { r.y() })
        .collect()
}

/// Treatment model `A ~ 1 + L + Y*(psi)` with a warm start carried between fits.
///
/// Units sharing covariates, treatment and outcome contribute identical likelihood terms, so
/// they are collapsed into one row carrying a frequency weight.
struct TreatmentModel {
    x: DesignMatrix,
    a: Vec<bool>,
    y: Vec<f64>,
    counts: Option<Vec<f64>>,
    last: Option<Vec<f64>>,
    opts: LogisticOptions,
}

impl TreatmentModel {
    fn new(panel: &Panel) -> Result<Self, GestError> {
        panel.require_both_arms()?;
        let mut columns = vec!["intercept".to_string()];
        columns.extend(panel.schema().iter().cloned());
        columns.push(YSTAR_COLUMN.to_string());
        let p = columns.len();

        let mut cells: IndexMap<(Vec<u64>, bool, bool), usize> = IndexMap::new();
        for r in panel.rows() {
            let key = (r.covariates.iter().map(|v| v.to_bits()).collect(), r.treatment, r.outcome);
            *cells.entry(key).or_insert(0) += 1;
        }
        let grouped = cells.len() >= p && 2 * cells.len() <= panel.len();
        let keys: Vec<(Vec<f64>, bool, bool)> = if grouped {
            cells.keys().map(|(l, a, y)| (l.iter().map(|b| f64::from_bits(*b)).collect(), *a, *y)).collect()
        } else {
            panel.rows().iter().map(|r| (r.covariates.clone(), r.treatment, r.outcome)).collect()
        };
        let mut values = Vec::with_capacity(keys.len() * p);
        for (l, a, y) in &keys {
            values.push(1.0);
            values.extend_from_slice(l);
            // placeholder; overwritten before every fit
            values.push(*y as u8 as f64 - 0.5 * *a as u8 as f64 + 1.0);
        }
        let x = DesignMatrix::new(columns, values, true).map_err(|source| GestError::Fit { psi: f64::NAN, source })?;
        Ok(TreatmentModel {
            x,
            a: keys.iter().map(|k| k.1).collect(),
            y: keys.iter().map(|k| k.2 as u8 as f64).collect(),
            counts: grouped.then(|| cells.values().map(|&c| c as f64).collect()),
            last: None,
            opts: LogisticOptions::default(),
        })
    }

    fn terms(&self) -> Vec<String> {
        self.x.columns().to_vec()
    }

    /// (coefficient on Y*, model-based SE, coefficients)
    fn eval(&mut self, psi: f64) -> Result<(f64, f64, Vec<f64>), GestError> {
        let j = self.x.ncols() - 1;
        let fit_err = |source| GestError::Fit { psi, source };
        let ystar: Vec<f64> = self.y.iter().zip(&self.a).map(|(y, &a)| if a { y - psi } else { *y }).collect();
        self.x.set_column(j, &ystar).map_err(fit_err)?;
        let w = self.counts.as_deref();
        let fit = fit_logistic_with(&self.x, &self.a, w, &self.opts, self.last.as_deref())
            .or_else(|e| match (&self.last, &e) {
                // a stale warm start can wander; retry once from zero
                (Some(_), GlmError::Separation { .. } | GlmError::NotConverged { .. }) => {
                    fit_logistic_with(&self.x, &self.a, w, &self.opts, None)
                }
                _ => Err(e),
            })
            .map_err(fit_err)?;
        self.last = Some(fit.coefficients.clone());
        Ok((fit.coefficients[j], fit.se_model(j), fit.coefficients))
    }
}

fn scan(model: &mut TreatmentModel, grid: &GridSpec) -> Result<(Vec<GestCurvePoint>, Vec<Vec<f64>>), GestError> {
    let mut curve = Vec::with_capacity(grid.len());
    let mut coefs = Vec::with_capacity(grid.len());
    for psi in grid.points() {
        let (indep_coef, se, beta) = model.eval(psi)?;
        curve.push(GestCurvePoint { psi, indep_coef, se });
        coefs.push(beta);
    }
    Ok((curve, coefs))
}

/// Fits the treatment model at every grid point, in grid order.
pub fn gest_curve(panel: &Panel, grid: &GridSpec) -> Result<Vec<GestCurvePoint>, GestError> {
    let mut model = TreatmentModel::new(panel)?;
    Ok(scan(&mut model, grid)?.0)
}

enum Crossing {
    OnGrid(usize),
    Between(usize),
}

fn crossings(curve: &[GestCurvePoint]) -> Vec<Crossing> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < curve.len() {
        let c = curve[i].indep_coef;
        if c == 0.0 {
            out.push(Crossing::OnGrid(i));
            // skip the segment leaving this zero
            i += 1;
            while i < curve.len() && curve[i].indep_coef == 0.0 {
                i += 1;
            }
            continue;
        }
        if i + 1 < curve.len() {
            let d = curve[i + 1].indep_coef;
            if c * d < 0.0 {
                out.push(Crossing::Between(i));
            }
        }
        i += 1;
    }
    out
}

fn grid_of(curve: &[GestCurvePoint]) -> GridSpec {
    let lo = curve[0].psi;
    let hi = curve[curve.len() - 1].psi;
    GridSpec { lo, hi, step: (hi - lo) / (curve.len() - 1) as f64 }
}

/// Locates the smallest-psi crossing on `curve` and refines it by refitting on `panel`.
pub fn solve_psi(curve: &[GestCurvePoint], panel: &Panel) -> Result<GestResult, GestError> {
    let mut model = TreatmentModel::new(panel)?;
    solve_with(curve.to_vec(), None, &mut model)
}

fn solve_with(
    curve: Vec<GestCurvePoint>,
    coefs: Option<&[Vec<f64>]>,
    model: &mut TreatmentModel,
) -> Result<GestResult, GestError> {
    if curve.len() < 2 {
        return Err(GestError::ShortCurve);
    }
    let grid = grid_of(&curve);
    let found = crossings(&curve);
    let first = found.first().ok_or(GestError::NoCrossing { lo: grid.lo, hi: grid.hi })?;
    let mut warnings = Vec::new();
    if found.len() > 1 {
        warnings.push(format!(
            "independence curve changes sign {} times; reporting the smallest-psi root",
            found.len()
        ));
    }
    let mut result = GestResult {
        psi_hat: f64::NAN,
        indep_coef_at_hat: f64::NAN,
        crossing_bracket: (f64::NAN, f64::NAN),
        refined: false,
        refine_evals: 0,
        crossings: found.len(),
        warnings,
        treatment_model_terms: model.terms(),
        grid,
        curve: Vec::new(),
    };
    match *first {
        Crossing::OnGrid(i) => {
            result.psi_hat = curve[i].psi;
            result.indep_coef_at_hat = 0.0;
            result.crossing_bracket = (curve[i].psi, curve[i].psi);
        }
        Crossing::Between(i) => {
            let (lo, hi) = (curve[i], curve[i + 1]);
            result.crossing_bracket = (lo.psi, hi.psi);
            model.last = coefs.map(|c| c[i].clone());
            let (psi, coef, evals) = illinois(model, (lo.psi, lo.indep_coef), (hi.psi, hi.indep_coef))?;
            result.psi_hat = psi;
            result.indep_coef_at_hat = coef;
            result.refined = true;
            result.refine_evals = evals;
            if coef.abs() >= COEF_TOL {
                result.warnings.push(format!(
                    "refinement stopped on bracket width with |coefficient| = {:.3e}",
                    coef.abs()
                ));
            }
        }
    }
    result.curve = curve;
    Ok(result)
}

/// False position with the Illinois modification on a sign-changing bracket.
fn illinois(model: &mut TreatmentModel, a: (f64, f64), b: (f64, f64)) -> Result<(f64, f64, usize), GestError> {
    let (mut lo, mut flo) = a;
    let (mut hi, mut fhi) = b;
    // unscaled values, for picking the better endpoint
    let (mut true_lo, mut true_hi) = (flo, fhi);
    let mut last_side = 0i8;
    let mut evals = 0;
    while evals < MAX_REFINE && hi - lo >= WIDTH_TOL {
        let mut c = (lo * fhi - hi * flo) / (fhi - flo);
        if !(c > lo && c < hi) {
            c = 0.5 * (lo + hi);
        }
        let (fc, _, _) = model.eval(c)?;
        evals += 1;
        if fc.abs() < COEF_TOL {
            return Ok((c, fc, evals));
        }
        if (fc > 0.0) == (flo > 0.0) {
            lo = c;
            flo = fc;
            true_lo = fc;
            if last_side == -1 {
                fhi *= 0.5;
            }
            last_side = -1;
        } else {
            hi = c;
            fhi = fc;
            true_hi = fc;
            if last_side == 1 {
                flo *= 0.5;
            }
            last_side = 1;
        }
    }
    Ok(if true_lo.abs() <= true_hi.abs() { (lo, true_lo, evals) } else { (hi, true_hi, evals) })
}

/// Grid scan plus refinement.
pub fn g_estimate(panel: &Panel, grid: &GridSpec) -> Result<GestResult, GestError> {
    let mut model = TreatmentModel::new(panel)?;
    let (curve, coefs) = scan(&mut model, grid)?;
    let mut result = solve_with(curve, Some(&coefs), &mut model)?;
    result.grid = *grid;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelRow;

    fn rows(spec: &[(bool, bool)]) -> Panel {
        let rows = spec
            .iter()
            .enumerate()
            .map(|(i, &(a, y))| PanelRow { unit_id: i.to_string(), treatment: a, outcome: y, covariates: vec![] })
            .collect();
        Panel::new(vec![], rows, "test").unwrap()
    }

    #[test]
    fn default_grid_has_101_points() {
        let g = GridSpec::default();
        assert_eq!(g.len(), 101);
        let pts = g.points();
        assert_eq!(pts[0], 0.0);
        assert!((pts[100] - 0.5).abs() < 1e-12);
        assert!(pts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(GridSpec::new(0.5, 0.0, 0.01).is_err());
        assert!(GridSpec::new(0.0, 0.5, 0.0).is_err());
        assert!(GridSpec::new(0.0, 0.5, f64::NAN).is_err());
    }

    #[test]
    fn residual_outcome_examples() {
        let p = rows(&[(true, true), (false, true), (true, false)]);
        assert_eq!(residual_outcome(0.0, &p), vec![1.0, 1.0, 0.0]);
        let r = residual_outcome(0.253, &p);
        assert!((r[0] - 0.747).abs() < 1e-12);
        assert_eq!(r[1], 1.0);
        let p = rows(&[(false, true), (true, false)]);
        assert_eq!(residual_outcome(0.3, &p), vec![1.0, -0.3]);
    }

    #[test]
    fn exact_root_on_grid() {
        let curve = vec![
            GestCurvePoint { psi: 0.24, indep_coef: 0.01, se: 0.1 },
            GestCurvePoint { psi: 0.25, indep_coef: 0.0, se: 0.1 },
            GestCurvePoint { psi: 0.26, indep_coef: -0.01, se: 0.1 },
        ];
        let p = rows(&[(true, true), (false, false), (true, false), (false, true)]);
        let r = solve_psi(&curve, &p).unwrap();
        assert_eq!(r.psi_hat, 0.25);
        assert_eq!(r.crossings, 1);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn one_signed_curve_is_no_crossing() {
        let curve = vec![
            GestCurvePoint { psi: 0.0, indep_coef: 0.3, se: 0.1 },
            GestCurvePoint { psi: 0.5, indep_coef: 0.1, se: 0.1 },
        ];
        let p = rows(&[(true, true), (false, false)]);
        assert!(matches!(solve_psi(&curve, &p), Err(GestError::NoCrossing { .. })));
    }

    #[test]
    fn crossing_count_handles_runs_of_zero() {
        let pts = |c: &[f64]| -> Vec<GestCurvePoint> {
            c.iter().enumerate().map(|(i, &v)| GestCurvePoint { psi: i as f64, indep_coef: v, se: 0.0 }).collect()
        };
        assert_eq!(crossings(&pts(&[1.0, 0.0, 0.0, -1.0])).len(), 1);
        assert_eq!(crossings(&pts(&[1.0, -1.0, 1.0])).len(), 2);
        assert_eq!(crossings(&pts(&[1.0, 2.0])).len(), 0);
    }
}
