//! Test-only oracles, written independently of the library code.

#![allow(dead_code)]

use votetrans::nalgebra::{DMatrix, DVector};
use votetrans::StationRecord;

fn ln_factorial(k: u64) -> f64 {
    (2..=k).map(|x| (x as f64).ln()).sum()
}

/// Every r × c table of non-negative integers with the given margins.
pub fn enumerate_tables(n: &[u64], y: &[u64]) -> Vec<Vec<u64>> {
    fn compositions(total: u64, caps: &[u64], prefix: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if caps.len() == 1 {
            if total <= caps[0] {
                prefix.push(total);
                out.push(prefix.clone());
                prefix.pop();
            }
            return;
        }
        for v in 0..=total.min(caps[0]) {
            prefix.push(v);
            compositions(total - v, &caps[1..], prefix, out);
            prefix.pop();
        }
    }
    fn rows(n: &[u64], remaining: &mut Vec<u64>, table: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        let Some((&first, rest)) = n.split_first() else {
            if remaining.iter().all(|&r| r == 0) {
                out.push(table.clone());
            }
            return;
        };
        let mut options = Vec::new();
        compositions(first, remaining, &mut Vec::new(), &mut options);
        for row in options {
            for (r, v) in remaining.iter_mut().zip(&row) {
                *r -= v;
            }
            table.extend(&row);
            rows(rest, remaining, table, out);
            table.truncate(table.len() - row.len());
            for (r, v) in remaining.iter_mut().zip(&row) {
                *r += v;
            }
        }
    }
    let mut out = Vec::new();
    rows(n, &mut y.to_vec(), &mut Vec::new(), &mut out);
    out
}

/// E[cells | row margins n, column margins y] under independent row
/// multinomials with probabilities `pi`, by brute-force enumeration.
pub fn exact_conditional_cells(pi: &DMatrix<f64>, n: &[u64], y: &[u64]) -> DMatrix<f64> {
    let (r, c) = pi.shape();
    let tables = enumerate_tables(n, y);
    let log_w: Vec<f64> = tables
        .iter()
        .map(|t| {
            (0..r)
                .map(|i| {
                    ln_factorial(n[i])
                        + (0..c)
                            .map(|j| {
                                let x = t[i * c + j];
                                let lp = if x == 0 {
                                    0.0
                                } else {
                                    x as f64 * pi[(i, j)].ln()
                                };
                                lp - ln_factorial(x)
                            })
                            .sum::<f64>()
                })
                .sum()
        })
        .collect();
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    DMatrix::from_fn(r, c, |i, j| {
        tables
            .iter()
            .zip(&w)
            .map(|(t, w)| w * t[i * c + j] as f64)
            .sum::<f64>()
            / total
    })
}

/// Log-density of N(mu, v) at x without the −d/2·log 2π constant, via an
/// explicit LU inverse and determinant.
pub fn gaussian_log_density(x: &DVector<f64>, mu: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let lu = v.clone().lu();
    let det = lu.determinant();
    let inv = lu.try_inverse().expect("invertible covariance");
    let e = x - mu;
    -0.5 * det.ln() - 0.5 * (e.transpose() * inv * &e)[(0, 0)]
}

/// Central finite-difference gradient.
pub fn numerical_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|a| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[a] += h;
            down[a] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn sample_mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

pub fn station(id: &str, n: &[u64], y: &[u64], v: &[f64]) -> StationRecord {
    StationRecord::new(id, n.to_vec(), y.to_vec(), v.to_vec())
}

/// Sample covariance of row vectors and the Monte Carlo standard error of
/// each entry.
pub fn empirical_covariance(draws: &[Vec<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = draws[0].len();
    let m = draws.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|a| draws.iter().map(|x| x[a]).sum::<f64>() / m)
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            let prods: Vec<f64> = draws
                .iter()
                .map(|x| (x[a] - mean[a]) * (x[b] - mean[b]))
                .collect();
            let (avg, sd) = sample_mean_sd(&prods);
            cov[(a, b)] = avg;
            se[(a, b)] = sd / m.sqrt();
        }
    }
    (cov, se)
}
