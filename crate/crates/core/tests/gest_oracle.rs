//! G-estimation against the closed-form root of its estimating equation.
//!
//! When the coefficient on `Y*(psi)` is zero the full-model score reduces to
//! `sum (A - e(L)) (Y - psi A) = 0`, with `e` the fit of `A ~ 1 + L`. Solving for `psi` gives
//! `sum (A - e) Y / sum (A - e) A`.

use causal_panel::bootstrap::{bca, BcaConfig};
use causal_panel::gest::{g_estimate, gest_curve, residual_outcome, GestError, GridSpec, COEF_TOL};
use causal_panel::glm::{fit_logistic, DesignMatrix};
use causal_panel::panel::{Panel, PanelRow};
use causal_panel::stats::expit;
use causal_panel::synth::{facet_preset, generate};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn closed_form(panel: &Panel, e: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (r, ei) in panel.rows().iter().zip(e) {
        num += (r.a() - ei) * r.y();
        den += (r.a() - ei) * r.a();
    }
    num / den
}

/// Treated fraction within each level of a single discrete covariate.
fn stratum_fractions(panel: &Panel) -> Vec<f64> {
    let mut by: std::collections::BTreeMap<u64, (f64, f64)> = Default::default();
    for r in panel.rows() {
        let e = by.entry(r.covariates[0].to_bits()).or_default();
        e.0 += r.a();
        e.1 += 1.0;
    }
    panel.rows().iter().map(|r| by[&r.covariates[0].to_bits()]).map(|(t, n)| t / n).collect()
}

/// Binary confounder; additive effect `psi` on the risk scale.
fn binary_confounder_panel(seed: u64, n: usize, psi: f64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n)
        .map(|i| {
            let l = rng.random_bool(0.4);
            let a = rng.random_bool(if l { 0.75 } else { 0.35 });
            let p0 = if l { 0.3 } else { 0.1 };
            let y = rng.random_bool(p0 + if a { psi } else { 0.0 });
            PanelRow { unit_id: i.to_string(), treatment: a, outcome: y, covariates: vec![l as u8 as f64] }
        })
        .collect();
    Panel::new(vec!["l".into()], rows, "binary-confounder").unwrap()
}

#[test]
fn saturated_propensity_oracle() {
    for seed in 0..5 {
        let panel = binary_confounder_panel(seed, 3000, 0.2);
        let oracle = closed_form(&panel, &stratum_fractions(&panel));
        let r = g_estimate(&panel, &GridSpec::default()).unwrap();
        assert!((r.psi_hat - oracle).abs() < 1e-5, "seed {seed}: {} vs {oracle}", r.psi_hat);
        assert!(r.indep_coef_at_hat.abs() < COEF_TOL);
    }
}

#[test]
fn facet_closed_form_oracle() {
    let mut cfg = facet_preset();
    cfg.n = 5000;
    let (panel, _) = generate(&cfg).unwrap();
    let cols: Vec<Vec<f64>> = (0..panel.schema().len()).map(|j| panel.covariate(j)).collect();
    let names: Vec<&str> = panel.schema().iter().map(String::as_str).collect();
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let x = DesignMatrix::from_columns(&names, &refs, true).unwrap();
    let fit = fit_logistic(&x, &panel.treatment(), None).unwrap();
    let e: Vec<f64> = (0..panel.len())
        .map(|i| expit(x.row(i).iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum()))
        .collect();
    let oracle = closed_form(&panel, &e);
    let r = g_estimate(&panel, &GridSpec::default()).unwrap();
    assert!((r.psi_hat - oracle).abs() < 1e-5, "{} vs {oracle}", r.psi_hat);
}

#[test]
fn residual_outcome_examples() {
    let rows = vec![
        PanelRow { unit_id: "a".into(), treatment: false, outcome: true, covariates: vec![] },
        PanelRow { unit_id: "b".into(), treatment: true, outcome: false, covariates: vec![] },
        PanelRow { unit_id: "c".into(), treatment: true, outcome: true, covariates: vec![] },
    ];
    let p = Panel::new(vec![], rows, "t").unwrap();
    assert_eq!(residual_outcome(0.0, &p), vec![1.0, 0.0, 1.0]);
    let r = residual_outcome(0.3, &p);
    assert_eq!(&r[..2], &[1.0, -0.3]);
    assert!((residual_outcome(0.253, &p)[2] - 0.747).abs() < 1e-12);
}

#[test]
fn facet_curve_is_monotone_with_one_crossing() {
    let mut cfg = facet_preset();
    cfg.n = 20_000;
    let (panel, _) = generate(&cfg).unwrap();
    let grid = GridSpec::default();
    let curve = gest_curve(&panel, &grid).unwrap();
    assert_eq!(curve.len(), 101);
    assert!(curve.windows(2).all(|w| w[1].psi > w[0].psi));
    assert!(curve.windows(2).all(|w| w[1].indep_coef < w[0].indep_coef));
    let changes = curve.windows(2).filter(|w| w[0].indep_coef.signum() != w[1].indep_coef.signum()).count();
    assert_eq!(changes, 1);
    let r = g_estimate(&panel, &grid).unwrap();
    assert!((r.psi_hat - 0.25).abs() < 0.02);
    assert_eq!(r.crossings, 1);
    assert!(r.warnings.is_empty());
}

#[test]
fn effect_beyond_grid_is_no_crossing() {
    let panel = binary_confounder_panel(1, 4000, 0.6);
    assert!(matches!(g_estimate(&panel, &GridSpec::default()), Err(GestError::NoCrossing { .. })));
    // widening the grid recovers it
    let r = g_estimate(&panel, &GridSpec::new(0.0, 0.9, 0.01).unwrap()).unwrap();
    assert!((r.psi_hat - 0.6).abs() < 0.05);
}

#[test]
fn pure_noise_panel_has_null_coefficient_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = (0..4000)
        .map(|i| PanelRow {
            unit_id: i.to_string(),
            treatment: rng.random_bool(0.5),
            outcome: rng.random_bool(0.3),
            covariates: vec![rng.random_range(0.0..1.0)],
        })
        .collect();
    let panel = Panel::new(vec!["noise".into()], rows, "noise").unwrap();
    let c = &gest_curve(&panel, &GridSpec::new(0.0, 0.005, 0.005).unwrap()).unwrap()[0];
    assert_eq!(c.psi, 0.0);
    assert!(c.indep_coef.abs() < 2.0 * c.se, "{} vs se {}", c.indep_coef, c.se);
}

#[test]
fn irrelevant_covariate_barely_moves_the_estimate() {
    let (panel, _) = generate(&facet_preset()).unwrap();
    let base = g_estimate(&panel, &GridSpec::default()).unwrap().psi_hat;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise: Vec<f64> = (0..panel.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noisy = panel.with_covariate("noise", &noise).unwrap();
    let moved = g_estimate(&noisy, &GridSpec::default()).unwrap().psi_hat;

    let grid = GridSpec::around(base, 0.1, 0.02).unwrap();
    let cfg = BcaConfig { n_resamples: 200, jack_groups: 50, ..BcaConfig::default() };
    let boot = bca(&panel, move |p: &Panel| g_estimate(p, &grid).map(|r| r.psi_hat), &cfg).unwrap();
    assert!((moved - base).abs() < 2.0 * boot.boot_se, "{base} -> {moved}, se {}", boot.boot_se);
}

#[test]
fn randomized_treatment_matches_mean_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let rows = (0..n)
        .map(|i| {
            let l = rng.random_range(0.0..3.0);
            let a = rng.random_bool(0.5);
            let y = rng.random_bool(0.1 + 0.1 * l + if a { 0.2 } else { 0.0 });
            PanelRow { unit_id: i.to_string(), treatment: a, outcome: y, covariates: vec![l] }
        })
        .collect();
    let panel = Panel::new(vec!["l".into()], rows, "rct").unwrap();
    let g = causal_panel::panel::summarize_groups(&panel).unwrap();
    let (t, c) = (g.treated(), g.control());
    let se = (t.outcome_rate * (1.0 - t.outcome_rate) / t.n as f64 + c.outcome_rate * (1.0 - c.outcome_rate) / c.n as f64).sqrt();
    let r = g_estimate(&panel, &GridSpec::default()).unwrap();
    assert!((r.psi_hat - g.risk_difference).abs() < 2.0 * se);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimating_equation_holds_at_the_root(seed in 0u64..10_000, psi in 0.05f64..0.45) {
        let panel = binary_confounder_panel(seed, 1500, psi.min(0.45));
        let grid = GridSpec::default();
        match g_estimate(&panel, &grid) {
            Ok(r) => {
                prop_assert!(r.indep_coef_at_hat.abs() < COEF_TOL || r.warnings.iter().any(|w| w.contains("width")));
                prop_assert!(r.psi_hat >= grid.lo && r.psi_hat <= grid.hi);
                prop_assert_eq!(r.curve.len(), grid.len());
                let oracle = closed_form(&panel, &stratum_fractions(&panel));
                prop_assert!((r.psi_hat - oracle).abs() < 1e-4);
            }
            Err(GestError::NoCrossing { .. }) => {
                let oracle = closed_form(&panel, &stratum_fractions(&panel));
                prop_assert!(!(0.0..=0.5).contains(&oracle));
            }
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}
