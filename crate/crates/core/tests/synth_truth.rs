use causal_panel::panel::summarize_groups;
use causal_panel::stats::expit;
use causal_panel::synth::{
    facet_preset, generate, population_moments, Family, SynthConfig, SynthError, FACET_TARGETS,
};
use proptest::prelude::*;

fn no_confounding(psi: f64, n: usize) -> SynthConfig {
    let mut cfg = facet_preset();
    cfg.n = n;
    cfg.psi_true = psi;
    cfg.treat_coefs = vec![0.0, 0.0, 0.0];
    cfg
}

/// Truncated counts by the ratio recursion p(l+1)/p(l) = ratio (l + size) / (l + 1).
fn pmf_by_recursion(size: f64, max: u32, ratio: f64) -> Vec<f64> {
    let mut p = vec![1.0];
    for l in 0..max {
        let last = p[l as usize];
        p.push(last * ratio * (l as f64 + size) / (l as f64 + 1.0));
    }
    let total: f64 = p.iter().sum();
    p.iter().map(|v| v / total).collect()
}

/// (treated fraction, E[Y | A=1], E[Y | A=0]) by direct double sum over two count covariates.
fn enumerate_two(cfg: &SynthConfig) -> (f64, f64, f64) {
    let laws: Vec<[Vec<f64>; 2]> = cfg
        .covariates
        .iter()
        .map(|c| match c.family {
            Family::TruncatedNegBinomial { size, max, ratio } => {
                [pmf_by_recursion(size, max, ratio[0]), pmf_by_recursion(size, max, ratio[1])]
            }
            Family::Normal { .. } => unreachable!(),
        })
        .collect();
    let (mut pa, mut ey1, mut ey0) = (0.0, 0.0, 0.0);
    for (i, _) in laws[0][0].iter().enumerate() {
        for (j, _) in laws[1][0].iter().enumerate() {
            let mass = cfg.class_share * laws[0][0][i] * laws[1][0][j]
                + (1.0 - cfg.class_share) * laws[0][1][i] * laws[1][1][j];
            let (x, z) = (i as f64, j as f64);
            let e = expit(cfg.treat_coefs[0] + cfg.treat_coefs[1] * x + cfg.treat_coefs[2] * z);
            let r = expit(cfg.base_coefs[0] + cfg.base_coefs[1] * x + cfg.base_coefs[2] * z).min(cfg.risk_cap);
            pa += mass * e;
            ey1 += mass * e * (r + cfg.psi_true);
            ey0 += mass * (1.0 - e) * r;
        }
    }
    (pa, ey1 / pa, ey0 / (1.0 - pa))
}

#[test]
fn null_without_confounding() {
    let (p, _) = generate(&no_confounding(0.0, 50_000)).unwrap();
    let g = summarize_groups(&p).unwrap();
    assert!(g.risk_difference.abs() < 0.01, "{}", g.risk_difference);
}

#[test]
fn effect_without_confounding() {
    let cfg = no_confounding(0.25, 50_000);
    let (pa, e1, e0) = enumerate_two(&cfg);
    assert!((e1 - e0 - 0.25).abs() < 1e-12);
    assert!((pa - 0.5).abs() < 1e-12);
    let (p, _) = generate(&cfg).unwrap();
    let rd = summarize_groups(&p).unwrap().risk_difference;
    assert!((rd - 0.25).abs() < 0.015, "{rd}");
}

#[test]
fn population_moments_match_independent_enumeration() {
    let cfg = facet_preset();
    let m = population_moments(&cfg).unwrap();
    let (pa, e1, e0) = enumerate_two(&cfg);
    assert!((m.treated_fraction - pa).abs() < 1e-12);
    assert!((m.treated_outcome_rate - e1).abs() < 1e-12);
    assert!((m.control_outcome_rate - e0).abs() < 1e-12);
}

#[test]
fn facet_moments_near_targets() {
    let (p, truth) = generate(&facet_preset()).unwrap();
    let t = FACET_TARGETS;
    let within = |v: f64, target: f64| (v - target).abs() <= 0.05 * target;
    assert!(within(truth.treated_fraction, t.treated_share));
    let tm: Vec<f64> = truth.treated_covariate_means.values().copied().collect();
    let cm: Vec<f64> = truth.control_covariate_means.values().copied().collect();
    for j in 0..2 {
        assert!(within(tm[j], t.treated_means[j]), "{j}: {}", tm[j]);
        assert!(within(cm[j], t.control_means[j]), "{j}: {}", cm[j]);
    }
    assert!(within(truth.treated_outcome_rate, 0.504));
    assert!(within(truth.control_outcome_rate, 0.150));
    assert!((truth.naive_risk_difference - 0.354).abs() < 0.02);
    // positive-positive confounding inflates the naive contrast
    assert!(truth.naive_risk_difference - truth.psi_true > 0.05);
    assert_eq!(summarize_groups(&p).unwrap().risk_difference, truth.naive_risk_difference);
}

#[test]
fn constant_additive_effect_on_potential_outcomes() {
    let mut cfg = facet_preset();
    cfg.retain_potential = true;
    let (p, truth) = generate(&cfg).unwrap();
    let po = truth.potential_outcomes.as_ref().unwrap();
    let check = |idx: Vec<usize>| {
        let n = idx.len() as f64;
        let d = idx.iter().map(|&i| po[i].y1 as u8 as f64 - po[i].y0 as u8 as f64).sum::<f64>() / n;
        let se = (0.25 * 0.75 / n).sqrt();
        assert!((d - 0.25).abs() < 2.0 * se + 1e-12, "{d} over {n} units");
    };
    check((0..p.len()).collect());
    let stratum: Vec<usize> = (0..p.len()).filter(|&i| p.rows()[i].covariates[0] == 3.0).collect();
    check(stratum);
    // observed outcome is the potential outcome of the received arm
    for (r, o) in p.rows().iter().zip(po) {
        assert_eq!(r.outcome, if r.treatment { o.y1 } else { o.y0 });
        assert!(o.y1 >= o.y0);
    }
}

#[test]
fn same_config_same_panel() {
    let cfg = facet_preset();
    assert_eq!(generate(&cfg).unwrap().0, generate(&cfg).unwrap().0);
    let other = SynthConfig { seed: 43, ..cfg.clone() };
    assert_ne!(generate(&cfg).unwrap().0.rows(), generate(&other).unwrap().0.rows());
}

#[test]
fn noise_covariates_are_supported() {
    let mut cfg = facet_preset();
    cfg.n = 500;
    cfg.covariates.push(causal_panel::synth::CovariateSpec {
        name: "noise".into(),
        family: Family::Normal { mean: 0.0, sd: 1.0 },
    });
    cfg.treat_coefs.push(0.0);
    cfg.base_coefs.push(0.0);
    let (p, _) = generate(&cfg).unwrap();
    assert_eq!(p.schema().len(), 3);
    assert!(matches!(population_moments(&cfg), Err(SynthError::InvalidConfig(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn risk_validation(psi in 0.0f64..=0.5, cap in 0.01f64..0.99, seed in 0u64..1000) {
        let mut cfg = facet_preset();
        cfg.n = 200;
        cfg.psi_true = psi;
        cfg.risk_cap = cap;
        cfg.seed = seed;
        match generate(&cfg) {
            Ok((p, truth)) => {
                prop_assert!(cap + psi <= 1.0);
                let m = population_moments(&cfg).unwrap();
                prop_assert!(m.max_baseline_risk <= cap);
                prop_assert!(m.max_baseline_risk + psi <= 1.0);
                prop_assert_eq!(p.len(), 200);
                prop_assert_eq!(truth.psi_true, psi);
            }
            Err(SynthError::InvalidRisk { .. }) => prop_assert!(cap + psi > 1.0),
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}
