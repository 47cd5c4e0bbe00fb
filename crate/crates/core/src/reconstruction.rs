//! Goodman's ecological regression and margin-consistent reconstruction of
//! the latent r × c table at each polling station.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::FitResult;
use crate::model::{station_probs, ModelSpec, StationRecord};

/// Unconstrained least-squares transition estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodmanResult {
    /// r × c, rows sum to one.
    pub transitions: DMatrix<f64>,
    /// OLS standard errors; NaN when k == r leaves no residual degrees of freedom.
    pub se: DMatrix<f64>,
    /// Cells whose estimate falls outside [0, 1]. No truncation is applied.
    pub out_of_range: Vec<Vec<bool>>,
    pub rss: f64,
}

/// OLS of ỹ_s on n_s, one regression per non-reference column; the
/// reference column is recovered by complementation.
pub fn goodman_fit(data: &[StationRecord], rows: usize, cols: usize) -> Result<GoodmanResult> {
    let k = data.len();
    if rows == 0 || cols < 2 {
        return Err(Error::InvalidInput(format!(
            "need r >= 1 and c >= 2 (got r={rows}, c={cols})"
        )));
    }
    if k < rows {
        return Err(Error::Unidentified(format!(
            "{k} stations cannot identify {rows} rows"
        )));
    }
    if let Some(s) = data.iter().find(|s| s.n.len() != rows || s.y.len() != cols) {
        return Err(Error::InvalidInput(format!(
            "station {} does not have {rows} × {cols} margins",
            s.id
        )));
    }
    let d = cols - 1;
    let x = DMatrix::from_fn(k, rows, |s, i| data[s].n[i] as f64);
    let y = DMatrix::from_fn(k, d, |s, j| data[s].y[j] as f64);

    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return Err(Error::RankDeficient(format!(
            "first-election count matrix has condition number {:.3e}",
            smax / smin
        )));
    }
    let xtx = x.transpose() * &x;
    let xtx_inv = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("X'X is not positive definite".into()))?
        .inverse();
    let coef = &xtx_inv * x.transpose() * &y; // rows × d
    let resid = &y - &x * &coef;
    let rss = resid.iter().map(|e| e * e).sum::<f64>();

    let df = k as f64 - rows as f64;
    let sigma = if df > 0.0 {
        Some(resid.transpose() * &resid / df)
    } else {
        None
    };

    let mut transitions = DMatrix::zeros(rows, cols);
    let mut se = DMatrix::from_element(rows, cols, f64::NAN);
    for i in 0..rows {
        let mut last = 1.0;
        for j in 0..d {
            transitions[(i, j)] = coef[(i, j)];
            last -= coef[(i, j)];
            if let Some(sig) = &sigma {
                se[(i, j)] = (sig[(j, j)] * xtx_inv[(i, i)]).sqrt();
            }
        }
        transitions[(i, d)] = last;
        if let Some(sig) = &sigma {
            se[(i, d)] = (sig.sum() * xtx_inv[(i, i)]).sqrt();
        }
    }
    let out_of_range = (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| !(0.0..=1.0).contains(&transitions[(i, j)]))
                .collect()
        })
        .collect();
    Ok(GoodmanResult {
        transitions,
        se,
        out_of_range,
        rss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpfOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for IpfOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpfResult {
    pub cells: DMatrix<f64>,
    pub iterations: usize,
}

fn margin_gap(m: &DMatrix<f64>, rows: &[f64], cols: &[f64]) -> f64 {
    let mut gap = 0.0_f64;
    for (i, &target) in rows.iter().enumerate() {
        gap = gap.max((m.row(i).sum() - target).abs());
    }
    for (j, &target) in cols.iter().enumerate() {
        gap = gap.max((m.column(j).sum() - target).abs());
    }
    gap
}

/// Expected cell counts given both margins, approximated by iterative
/// proportional fitting from the seed n_i·π_ij.
///
/// Exact zeros in `pi` are structural zeros and stay zero. Rows and columns
/// with zero margin are fixed at zero.
pub fn expected_cells_ipf(
    pi: &DMatrix<f64>,
    n: &[u64],
    y: &[u64],
    options: IpfOptions,
) -> Result<IpfResult> {
    let (r, c) = pi.shape();
    if n.len() != r || y.len() != c {
        return Err(Error::InvalidInput(format!(
            "margins of length {} and {} do not match a {r} × {c} table",
            n.len(),
            y.len()
        )));
    }
    if n.iter().sum::<u64>() != y.iter().sum::<u64>() {
        return Err(Error::InvalidInput(
            "row and column margins have different totals".into(),
        ));
    }
    if pi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidInput(
            "seed probabilities must be finite and non-negative".into(),
        ));
    }
    let rows: Vec<f64> = n.iter().map(|&v| v as f64).collect();
    let cols: Vec<f64> = y.iter().map(|&v| v as f64).collect();

    let mut m = DMatrix::from_fn(r, c, |i, j| {
        if cols[j] == 0.0 {
            0.0
        } else {
            rows[i] * pi[(i, j)]
        }
    });
    for (i, &target) in rows.iter().enumerate() {
        if target > 0.0 && m.row(i).sum() <= 0.0 {
            return Err(Error::Infeasible {
                axis: "row",
                index: i,
                margin: target,
            });
        }
    }
    for (j, &target) in cols.iter().enumerate() {
        if target > 0.0 && m.column(j).sum() <= 0.0 {
            return Err(Error::Infeasible {
                axis: "column",
                index: j,
                margin: target,
            });
        }
    }

    let mut iterations = 0;
    while margin_gap(&m, &rows, &cols) >= options.tolerance {
        if iterations == options.max_iterations {
            return Err(Error::InvalidInput(format!(
                "IPF did not reach tolerance {} in {} iterations (gap {:.3e})",
                options.tolerance,
                options.max_iterations,
                margin_gap(&m, &rows, &cols)
            )));
        }
        for (i, &target) in rows.iter().enumerate() {
            let s = m.row(i).sum();
            if s > 0.0 {
                m.row_mut(i).scale_mut(target / s);
            }
        }
        for (j, &target) in cols.iter().enumerate() {
            let s = m.column(j).sum();
            if s > 0.0 {
                m.column_mut(j).scale_mut(target / s);
            }
        }
        iterations += 1;
    }
    Ok(IpfResult {
        cells: m,
        iterations,
    })
}

/// Reconstructed cells for every station at the fitted parameters.
pub fn reconstruct_cells(
    fit: &FitResult,
    spec: &ModelSpec,
    data: &[StationRecord],
    options: IpfOptions,
) -> Result<Vec<DMatrix<f64>>> {
    data.iter()
        .map(|s| {
            let pi = station_probs(&fit.params, &spec.design, &s.v)?;
            expected_cells_ipf(&pi, &s.n, &s.y, options).map(|r| r.cells)
        })
        .collect()
}

/// Slope of the least-squares line of `y` on `x` (with intercept).
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Goodman transitions, or `None` when the regression is not identified.
pub(crate) fn goodman_start(
    data: &[StationRecord],
    rows: usize,
    cols: usize,
) -> Option<DMatrix<f64>> {
    goodman_fit(data, rows, cols).ok().map(|g| g.transitions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless(p: &DMatrix<f64>, ns: &[Vec<u64>]) -> Vec<StationRecord> {
        ns.iter()
            .enumerate()
            .map(|(s, n)| {
                let c = p.ncols();
                let mut y = vec![0u64; c];
                for j in 0..c {
                    let v: f64 = n
                        .iter()
                        .enumerate()
                        .map(|(i, &ni)| ni as f64 * p[(i, j)])
                        .sum();
                    y[j] = v.round() as u64;
                }
                StationRecord::new(format!("s{s}"), n.clone(), y, vec![])
            })
            .collect()
    }

    #[test]
    fn goodman_exact_on_consistent_system() {
        // counts chosen so that n_i·p_ij are integers
        let p = DMatrix::from_row_slice(2, 3, &[0.5, 0.25, 0.25, 0.1, 0.3, 0.6]);
        let ns = vec![
            vec![40, 10],
            vec![80, 30],
            vec![20, 70],
            vec![100, 50],
            vec![60, 90],
        ];
        let data = noiseless(&p, &ns);
        let g = goodman_fit(&data, 2, 3).unwrap();
        assert!((g.transitions.clone() - p).abs().max() < 1e-10);
        assert!(g.rss < 1e-12);
        assert!(g.out_of_range.iter().flatten().all(|f| !f));
        for i in 0..2 {
            assert!((g.transitions.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn goodman_single_row_is_column_share() {
        let data = vec![
            StationRecord::new("a", vec![10], vec![3, 7], vec![]),
            StationRecord::new("b", vec![30], vec![12, 18], vec![]),
        ];
        let g = goodman_fit(&data, 1, 2).unwrap();
        // OLS through the origin: Σ n y / Σ n²
        let want = (10.0 * 3.0 + 30.0 * 12.0) / (100.0 + 900.0);
        assert!((g.transitions[(0, 0)] - want).abs() < 1e-12);
        assert!((g.transitions[(0, 1)] - (1.0 - want)).abs() < 1e-12);
    }

    #[test]
    fn goodman_flags_without_truncating() {
        let data = vec![
            StationRecord::new("a", vec![10, 10], vec![19, 1], vec![]),
            StationRecord::new("b", vec![20, 10], vec![29, 1], vec![]),
            StationRecord::new("c", vec![10, 20], vec![30, 0], vec![]),
        ];
        let g = goodman_fit(&data, 2, 2).unwrap();
        let flagged = g.out_of_range.iter().flatten().filter(|f| **f).count();
        assert!(flagged > 0);
        for i in 0..2 {
            for j in 0..2 {
                let v = g.transitions[(i, j)];
                assert_eq!(g.out_of_range[i][j], !(0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn goodman_rejects_proportional_rows() {
        let data = vec![
            StationRecord::new("a", vec![10, 20], vec![15, 15], vec![]),
            StationRecord::new("b", vec![20, 40], vec![30, 30], vec![]),
            StationRecord::new("c", vec![5, 10], vec![7, 8], vec![]),
        ];
        assert!(matches!(
            goodman_fit(&data, 2, 2),
            Err(Error::RankDeficient(_))
        ));
        assert!(matches!(
            goodman_fit(&data[..1], 2, 2),
            Err(Error::Unidentified(_))
        ));
    }

    #[test]
    fn ipf_fixed_point() {
        let pi = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let r = expected_cells_ipf(&pi, &[10, 10], &[10, 10], IpfOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.cells, DMatrix::from_element(2, 2, 5.0));
    }

    #[test]
    fn ipf_independence_seed() {
        let pi = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let r = expected_cells_ipf(&pi, &[60, 40], &[50, 50], IpfOptions::default()).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[30.0, 30.0, 20.0, 20.0]);
        assert!((r.cells - want).abs().max() < 1e-8);
    }

    #[test]
    fn ipf_matches_margins() {
        let pi = DMatrix::from_row_slice(
            3,
            3,
            &[0.14, 0.09, 0.77, 0.93, 0.01, 0.06, 0.29, 0.04, 0.67],
        );
        let r = expected_cells_ipf(
            &pi,
            &[300, 250, 400],
            &[310, 60, 580],
            IpfOptions::default(),
        )
        .unwrap();
        for (i, t) in [300.0, 250.0, 400.0].iter().enumerate() {
            assert!((r.cells.row(i).sum() - t).abs() < 1e-8);
        }
        for (j, t) in [310.0, 60.0, 580.0].iter().enumerate() {
            assert!((r.cells.column(j).sum() - t).abs() < 1e-8);
        }
        assert!(r.cells.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn ipf_zero_margins_stay_zero() {
        let pi = DMatrix::from_row_slice(2, 3, &[0.2, 0.3, 0.5, 0.6, 0.2, 0.2]);
        let r = expected_cells_ipf(&pi, &[0, 12], &[5, 0, 7], IpfOptions::default()).unwrap();
        assert!(r.cells.row(0).iter().all(|x| *x == 0.0));
        assert!(r.cells.column(1).iter().all(|x| *x == 0.0));
        assert!((r.cells[(1, 0)] - 5.0).abs() < 1e-8);
    }

    #[test]
    fn ipf_structural_zero_infeasible() {
        let pi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        match expected_cells_ipf(&pi, &[3, 2], &[4, 1], IpfOptions::default()) {
            Err(Error::Infeasible { axis, index, .. }) => {
                assert_eq!(axis, "column");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ipf_rejects_unequal_totals() {
        let pi = DMatrix::from_element(2, 2, 0.5);
        assert!(expected_cells_ipf(&pi, &[3, 2], &[4, 2], IpfOptions::default()).is_err());
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        assert!((ols_slope(&x, &y) - 2.0).abs() < 1e-14);
    }
}
