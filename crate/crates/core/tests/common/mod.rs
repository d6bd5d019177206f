//! Helpers shared by the oracle tests and the acceptance run.
#![allow(dead_code)]

use causal_panel::glm::DesignMatrix;
use causal_panel::stats::expit;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Plain Newton on the exact log-likelihood, Gaussian elimination with partial pivoting.
pub fn newton_oracle(rows: &[Vec<f64>], y: &[bool], w: &[f64]) -> Option<Vec<f64>> {
    let p = rows[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..200 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for ((x, &yi), &wi) in rows.iter().zip(y).zip(w) {
            let eta: f64 = x.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let r = (yi as u8 as f64) - mu;
            for j in 0..p {
                g[j] += wi * r * x[j];
                for k in 0..p {
                    h[j][k] += wi * mu * (1.0 - mu) * x[j] * x[k];
                }
            }
        }
        // solve h d = g
        let mut a: Vec<Vec<f64>> = h.iter().zip(&g).map(|(r, gi)| r.iter().copied().chain([*gi]).collect()).collect();
        for c in 0..p {
            let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
            a.swap(c, piv);
            if a[c][c].abs() < 1e-300 {
                return None;
            }
            for r in c + 1..p {
                let f = a[r][c] / a[c][c];
                for k in c..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        let mut d = vec![0.0; p];
        for c in (0..p).rev() {
            let s: f64 = (c + 1..p).map(|k| a[c][k] * d[k]).sum();
            d[c] = (a[c][p] - s) / a[c][c];
        }
        for j in 0..p {
            beta[j] += d[j];
        }
        if d.iter().all(|v| v.abs() < 1e-13) {
            return Some(beta);
        }
        if beta.iter().any(|b| !b.is_finite() || b.abs() > 50.0) {
            return None;
        }
    }
    None
}

pub fn random_dataset(rng: &mut ChaCha8Rng) -> (DesignMatrix, Vec<Vec<f64>>, Vec<bool>) {
    let n = rng.random_range(40..=200);
    let k = rng.random_range(1..=3);
    let truth: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cols: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| std::iter::once(1.0).chain(cols.iter().map(|c| c[i])).collect()).collect();
    let y = rows
        .iter()
        .map(|x| {
            let eta: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
            rng.random::<f64>() < expit(eta)
        })
        .collect();
    let names: Vec<String> = (0..k).map(|j| format!("x{j}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    (DesignMatrix::from_columns(&names, &refs, true).unwrap(), rows, y)
}
