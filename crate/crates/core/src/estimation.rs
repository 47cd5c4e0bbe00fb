//! Maximum likelihood under the Gaussian approximation to the aggregated
//! cluster-overdispersed multinomial.
//!
//! Each station contributes `−½ log det V_s − ½ eᵀ V_s⁻¹ e` with
//! `e = ỹ_s − μ_s`. Both μ_s and V_s depend on the transition logits, and
//! V_s also depends on τ through θ, so the score and expected information
//! carry a mean channel and a covariance channel:
//!
//! ```text
//! s_a    = μ_aᵀ V⁻¹ e − ½ tr(V⁻¹ V_a) + ½ eᵀ V⁻¹ V_a V⁻¹ e
//! I_ab   = μ_aᵀ V⁻¹ μ_b + ½ tr(V⁻¹ V_a V⁻¹ V_b)
//! ```
//!
//! Derivatives are first taken with respect to a per-station basis (one
//! logit per cell plus the τ entries) and then mapped to the free
//! parameters; each free parameter touches exactly one basis coordinate,
//! with weight 1 for α and τ and weight v_sm for a slope β.
//!
//! Station contributions are computed in parallel, collected in station
//! order, and reduced pairwise, so results do not depend on thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    clamp_probs, logit, multinomial_kernel, overdispersion_factor, softmax_into, station_logits,
    station_probs, Dimensions, ModelSpec, ParameterVector, StationRecord,
};
use crate::reconstruction::goodman_start;

/// Which estimating equations drive the fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Full Gaussian score: mean and covariance channels.
    #[default]
    Full,
    /// Quasi-likelihood: mean parameters use only the mean channel; τ uses
    /// the covariance channel. Cross information is set to zero.
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence threshold on max |score| over free coordinates.
    pub gradient_tolerance: f64,
    pub step_halving_max: usize,
    /// Added to the information diagonal (relative to its largest entry)
    /// when the plain factorization fails.
    pub ridge: f64,
    /// Box on |α| and |τ|.
    pub bound: f64,
    /// Largest change of any coordinate in one scoring step; longer steps
    /// are shrunk along their direction.
    pub max_step: f64,
    pub score_mode: ScoreMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            step_halving_max: 10,
            ridge: 1e-8,
            bound: 15.0,
            max_step: 2.0,
            score_mode: ScoreMode::Full,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || !(self.gradient_tolerance > 0.0)
            || !(self.ridge > 0.0)
            || !(self.bound > 0.0)
            || !(self.max_step > 0.0)
        {
            return Err(Error::Config(
                "fit options must all be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Log-likelihood, score and expected information at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub information: DMatrix<f64>,
    pub clamped: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Need {
    LogLik,
    All(ScoreMode),
}

struct StationTerms {
    loglik: f64,
    score: Option<DVector<f64>>,
    info: Option<DMatrix<f64>>,
    clamped: usize,
}

/// Cholesky inverse and log-determinant, with a single ridge retry.
fn factor(v: &DMatrix<f64>, station: usize) -> Result<(DMatrix<f64>, f64)> {
    let chol = v.clone().cholesky().or_else(|| {
        let scale = v.diagonal().amax().max(1.0);
        let mut w = v.clone();
        for a in 0..w.nrows() {
            w[(a, a)] += 1e-8 * scale;
        }
        w.cholesky()
    });
    let chol = chol.ok_or(Error::SingularCovariance { station })?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok((chol.inverse(), logdet))
}

fn station_terms(
    params: &ParameterVector,
    spec: &ModelSpec,
    rec: &StationRecord,
    station: usize,
    need: Need,
) -> Result<StationTerms> {
    let (r, c) = (spec.rows, spec.cols);
    let d = c - 1;
    if rec.n.iter().all(|&n| n == 0) && rec.y.iter().all(|&y| y == 0) {
        let p = spec.n_params();
        return Ok(StationTerms {
            loglik: 0.0,
            score: matches!(need, Need::All(_)).then(|| DVector::zeros(p)),
            info: matches!(need, Need::All(_)).then(|| DMatrix::zeros(p, p)),
            clamped: 0,
        });
    }
    let lambda = station_logits(params, &spec.design, &rec.v);
    let mut probs = vec![0.0; r * c];
    let mut clamped_probs = vec![0.0; r * c];
    let mut clamped = 0;
    let mut mu = DVector::zeros(d);
    let mut v = DMatrix::zeros(d, d);
    for i in 0..r {
        let row = &mut probs[i * c..(i + 1) * c];
        softmax_into(&lambda[i * d..(i + 1) * d], row);
        if rec.n[i] == 0 {
            continue;
        }
        let n = rec.n[i] as f64;
        for j in 0..d {
            mu[j] += n * row[j];
        }
        let crow = &mut clamped_probs[i * c..(i + 1) * c];
        crow.copy_from_slice(row);
        clamped += clamp_probs(crow);
        let theta = params.theta(spec.tau_index(i));
        let f = overdispersion_factor(theta, spec.cluster_size, rec.n[i]);
        v += multinomial_kernel(crow) * (n * f);
    }
    let e = DVector::from_fn(d, |j, _| rec.y[j] as f64) - &mu;
    let (vinv, logdet) = factor(&v, station)?;
    let q = &vinv * &e;
    let loglik = -0.5 * logdet - 0.5 * e.dot(&q);
    if !loglik.is_finite() {
        return Err(Error::SingularCovariance { station });
    }
    let mode = match need {
        Need::LogLik => {
            return Ok(StationTerms {
                loglik,
                score: None,
                info: None,
                clamped,
            })
        }
        Need::All(mode) => mode,
    };

    // basis: λ_ij at i*d + j, then τ entries
    let n_lambda = r * d;
    let n_basis = n_lambda + spec.n_tau();
    let mut dmu: Vec<DVector<f64>> = vec![DVector::zeros(d); n_basis];
    let mut dv: Vec<DMatrix<f64>> = vec![DMatrix::zeros(d, d); n_basis];
    for i in 0..r {
        if rec.n[i] == 0 {
            continue;
        }
        let n = rec.n[i] as f64;
        let pi = &probs[i * c..(i + 1) * c];
        let pc = &clamped_probs[i * c..(i + 1) * c];
        let jac = multinomial_kernel(pi);
        let kc = multinomial_kernel(pc);
        let theta = params.theta(spec.tau_index(i));
        let f = overdispersion_factor(theta, spec.cluster_size, rec.n[i]);
        for m in 0..d {
            let u = i * d + m;
            dmu[u] = jac.column(m) * n;
            // ∂/∂λ_m of diag(p) − p pᵀ, with ∂p/∂λ_m = kc[:, m]
            let dp = kc.column(m);
            let mut dk = DMatrix::zeros(d, d);
            for a in 0..d {
                for b in 0..d {
                    let mut val = -dp[a] * pc[b] - pc[a] * dp[b];
                    if a == b {
                        val += dp[a];
                    }
                    dk[(a, b)] = val;
                }
            }
            dv[u] = dk * (n * f);
        }
        let t = n_lambda + spec.tau_index(i);
        let dtheta = theta * (1.0 - theta);
        dv[t] += &kc * (dtheta * spec.cluster_size * (n - 1.0));
    }

    let vinv_dv: Vec<DMatrix<f64>> = dv.iter().map(|m| &vinv * m).collect();
    let vinv_dmu: Vec<DVector<f64>> = dmu.iter().map(|m| &vinv * m).collect();
    let is_tau = |u: usize| u >= n_lambda;

    let mut g = DVector::zeros(n_basis);
    for u in 0..n_basis {
        let mean_part = dmu[u].dot(&q);
        let cov_part = -0.5 * vinv_dv[u].trace() + 0.5 * q.dot(&(&dv[u] * &q));
        g[u] = match mode {
            ScoreMode::Full => mean_part + cov_part,
            ScoreMode::MeanOnly if is_tau(u) => cov_part,
            ScoreMode::MeanOnly => mean_part,
        };
    }
    let mut basis_info = DMatrix::zeros(n_basis, n_basis);
    for u in 0..n_basis {
        for w in u..n_basis {
            let mean_part = dmu[u].dot(&vinv_dmu[w]);
            let cov_part = 0.5 * (&vinv_dv[u] * &vinv_dv[w]).trace();
            let val = match mode {
                ScoreMode::Full => mean_part + cov_part,
                ScoreMode::MeanOnly => match (is_tau(u), is_tau(w)) {
                    (false, false) => mean_part,
                    (true, true) => cov_part,
                    _ => 0.0,
                },
            };
            basis_info[(u, w)] = val;
            basis_info[(w, u)] = val;
        }
    }

    let map = parameter_map(spec, &rec.v);
    let p = map.len();
    let score = DVector::from_fn(p, |a, _| map[a].1 * g[map[a].0]);
    let info = DMatrix::from_fn(p, p, |a, b| {
        map[a].1 * map[b].1 * basis_info[(map[a].0, map[b].0)]
    });
    Ok(StationTerms {
        loglik,
        score: Some(score),
        info: Some(info),
        clamped,
    })
}

/// (basis coordinate, weight) for each free parameter, in packing order.
fn parameter_map(spec: &ModelSpec, v: &[f64]) -> Vec<(usize, f64)> {
    let d = spec.cols - 1;
    let mut out = Vec::with_capacity(spec.n_params());
    for u in 0..spec.n_alpha() {
        out.push((u, 1.0));
    }
    for e in spec.design.entries() {
        out.push((e.row * d + e.col, v[e.covariate]));
    }
    for t in 0..spec.n_tau() {
        out.push((spec.n_alpha() + t, 1.0));
    }
    out
}

fn pairwise<T: Clone>(items: &[T], add: &impl Fn(&mut T, &T)) -> T {
    if items.len() <= 8 {
        let mut acc = items[0].clone();
        for it in &items[1..] {
            add(&mut acc, it);
        }
        return acc;
    }
    let mid = items.len() / 2;
    let mut left = pairwise(&items[..mid], add);
    let right = pairwise(&items[mid..], add);
    add(&mut left, &right);
    left
}

fn check_inputs(params: &ParameterVector, spec: &ModelSpec, data: &[StationRecord]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no stations".into()));
    }
    spec.validate()?;
    params.check_shape(spec)?;
    for rec in data {
        rec.validate(spec, true)?;
    }
    Ok(())
}

fn collect_terms(
    params: &ParameterVector,
    spec: &ModelSpec,
    data: &[StationRecord],
    need: Need,
) -> Result<Vec<StationTerms>> {
    check_inputs(params, spec, data)?;
    data.par_iter()
        .enumerate()
        .map(|(s, rec)| station_terms(params, spec, rec, s, need))
        .collect()
}

pub fn log_likelihood(
    params: &ParameterVector,
    spec: &ModelSpec,
    data: &[StationRecord],
) -> Result<f64> {
    let terms = collect_terms(params, spec, data, Need::LogLik)?;
    let values: Vec<f64> = terms.iter().map(|t| t.loglik).collect();
    Ok(pairwise(&values, &|a, b| *a += *b))
}

pub fn evaluate(
    params: &ParameterVector,
    spec: &ModelSpec,
    data: &[StationRecord],
    mode: ScoreMode,
) -> Result<Evaluation> {
    let terms = collect_terms(params, spec, data, Need::All(mode))?;
    let lls: Vec<f64> = terms.iter().map(|t| t.loglik).collect();
    let scores: Vec<DVector<f64>> = terms.iter().map(|t| t.score.clone().unwrap()).collect();
    let infos: Vec<DMatrix<f64>> = terms.iter().map(|t| t.info.clone().unwrap()).collect();
    Ok(Evaluation {
        loglik: pairwise(&lls, &|a, b| *a += *b),
        score: pairwise(&scores, &|a, b| *a += b),
        information: pairwise(&infos, &|a, b| *a += b),
        clamped: terms.iter().map(|t| t.clamped).sum(),
    })
}

pub fn score(
    params: &ParameterVector,
    spec: &ModelSpec,
    data: &[StationRecord],
) -> Result<DVector<f64>> {
    Ok(evaluate(params, spec, data, ScoreMode::Full)?.score)
}

pub fn expected_information(
    params: &ParameterVector,
    spec: &ModelSpec,
    data: &[StationRecord],
) -> Result<DMatrix<f64>> {
    Ok(evaluate(params, spec, data, ScoreMode::Full)?.information)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub labels: Vec<String>,
    pub params: ParameterVector,
    pub loglik: f64,
    pub score: Vec<f64>,
    pub information: DMatrix<f64>,
    /// Square roots of the inverse-information diagonal; absent when the
    /// information is not positive definite.
    pub se: Option<Vec<f64>>,
    /// Coordinates sitting on the |α|, |τ| box. Their standard errors are
    /// not reliable.
    pub at_boundary: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    pub clamp_count: usize,
}

impl FitResult {
    pub fn max_abs_score(&self) -> f64 {
        self.score.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Inverse expected information, if it exists.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        self.information.clone().cholesky().map(|c| c.inverse())
    }

    pub fn se_reliable(&self) -> Vec<bool> {
        self.at_boundary
            .iter()
            .map(|b| !b && self.se.is_some())
            .collect()
    }
}

/// Goodman start: cell estimates clamped to [0.02, 0.98] before taking
/// logits, zero slopes, θ = 0.05.
pub fn default_init(spec: &ModelSpec, data: &[StationRecord]) -> ParameterVector {
    let mut p = ParameterVector::zeros(spec);
    if let Some(g) = goodman_start(data, spec.rows, spec.cols) {
        let d = spec.cols - 1;
        for i in 0..spec.rows {
            let reference = g[(i, d)].clamp(0.02, 0.98).ln();
            for j in 0..d {
                p.set_alpha(i, j, g[(i, j)].clamp(0.02, 0.98).ln() - reference);
            }
        }
    }
    p.tau.iter_mut().for_each(|t| *t = logit(0.05));
    p
}

fn boxed_coordinates(spec: &ModelSpec) -> Vec<bool> {
    let mut out = vec![true; spec.n_alpha()];
    out.extend(std::iter::repeat_n(false, spec.design.len()));
    out.extend(std::iter::repeat_n(true, spec.n_tau()));
    out
}

fn solve_with_ridge(info: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> Option<DVector<f64>> {
    if let Some(c) = info.clone().cholesky() {
        return Some(c.solve(rhs));
    }
    let scale = info.diagonal().amax().max(1.0);
    let mut m = info.clone();
    for a in 0..m.nrows() {
        m[(a, a)] += ridge * scale;
    }
    m.cholesky().map(|c| c.solve(rhs))
}

const WARM_UP_TOLERANCE: f64 = 1e-2;
const WARM_UP_ITERATIONS: usize = 20;

/// Fisher scoring with step halving on the Gaussian log-likelihood.
pub fn fit(
    data: &[StationRecord],
    spec: &ModelSpec,
    options: &FitOptions,
    init: Option<ParameterVector>,
) -> Result<FitResult> {
    options.validate()?;
    spec.validate()?;
    let dims = Dimensions::new(spec.rows, spec.cols, data.len())?;
    dims.check_identified(&spec.design)?;

    let boxed = boxed_coordinates(spec);
    let bound = options.bound;
    let project = |x: &mut [f64]| {
        for (v, b) in x.iter_mut().zip(&boxed) {
            if *b {
                *v = v.clamp(-bound, bound);
            }
        }
    };

    let mut phi = init.unwrap_or_else(|| default_init(spec, data)).pack();
    project(&mut phi);
    let mut params = ParameterVector::unpack(spec, &phi)?;
    let mut ll = match log_likelihood(&params, spec, data) {
        Ok(v) if v.is_finite() => v,
        Ok(_) | Err(Error::SingularCovariance { .. }) => return Err(Error::BadStart),
        Err(e) => return Err(e),
    };

    let n = phi.len();
    let tau_start = spec.n_alpha() + spec.design.len();
    let mut iterations = 0;
    let mut converged = false;
    // τ stays at its start until the mean parameters settle; a poor start
    // for the mean otherwise drives θ towards 1, where its score vanishes.
    let mut warm_up = true;
    let mut eval = evaluate(&params, spec, data, options.score_mode)?;
    loop {
        // coordinates pinned on the box with the score pushing outward
        let active: Vec<bool> = (0..n)
            .map(|a| {
                (warm_up && a >= tau_start)
                    || (boxed[a]
                        && phi[a].abs() >= bound
                        && phi[a].signum() == eval.score[a].signum())
            })
            .collect();
        let free: Vec<usize> = (0..n).filter(|&a| !active[a]).collect();
        let max_score = free
            .iter()
            .fold(0.0_f64, |m, &a| m.max(eval.score[a].abs()));
        if warm_up && (max_score < WARM_UP_TOLERANCE || iterations >= WARM_UP_ITERATIONS) {
            warm_up = false;
            continue;
        }
        if max_score < options.gradient_tolerance {
            converged = true;
            break;
        }
        if iterations == options.max_iterations {
            break;
        }
        let sub_info = DMatrix::from_fn(free.len(), free.len(), |a, b| {
            eval.information[(free[a], free[b])]
        });
        let sub_score = DVector::from_fn(free.len(), |a, _| eval.score[free[a]]);
        let mut delta = solve_with_ridge(&sub_info, &sub_score, options.ridge)
            .ok_or_else(|| Error::SingularInformation(format!("at iteration {iterations}")))?;
        let longest = delta.amax();
        if longest > options.max_step {
            delta *= options.max_step / longest;
        }

        let try_step = |step: f64| -> Result<(Vec<f64>, ParameterVector, f64)> {
            let mut cand = phi.clone();
            for (k, &a) in free.iter().enumerate() {
                cand[a] += step * delta[k];
            }
            project(&mut cand);
            let cand_params = ParameterVector::unpack(spec, &cand)?;
            let cand_ll = log_likelihood(&cand_params, spec, data).unwrap_or(f64::NEG_INFINITY);
            Ok((cand, cand_params, cand_ll))
        };
        let mut step = 1.0;
        let mut accepted = None;
        let mut halvings = 0;
        while halvings <= options.step_halving_max {
            let cand = try_step(step)?;
            let ok = match options.score_mode {
                ScoreMode::Full => cand.2 >= ll,
                ScoreMode::MeanOnly => cand.2.is_finite(),
            };
            step *= 0.5;
            halvings += 1;
            if ok {
                accepted = Some(cand);
                break;
            }
        }
        // an overshooting step can still raise the likelihood; keep halving
        // while that helps
        if let (ScoreMode::Full, Some(best)) = (options.score_mode, accepted.as_mut()) {
            while halvings <= options.step_halving_max {
                let cand = try_step(step)?;
                if cand.2 <= best.2 {
                    break;
                }
                *best = cand;
                step *= 0.5;
                halvings += 1;
            }
        }
        let Some((cand, cand_params, cand_ll)) = accepted else {
            if warm_up {
                warm_up = false;
                continue;
            }
            // no ascent left in floating point: accept if the predicted gain is negligible
            let predicted = 0.5 * sub_score.dot(&delta);
            converged = predicted <= 1e-10 * (1.0 + ll.abs());
            break;
        };
        phi = cand;
        params = cand_params;
        ll = cand_ll;
        iterations += 1;
        eval = evaluate(&params, spec, data, options.score_mode)?;
    }

    let at_boundary: Vec<bool> = (0..n).map(|a| boxed[a] && phi[a].abs() >= bound).collect();
    let se = eval
        .information
        .clone()
        .cholesky()
        .map(|c| c.inverse().diagonal().iter().map(|v| v.sqrt()).collect());
    Ok(FitResult {
        spec: spec.clone(),
        labels: spec.parameter_labels(),
        params,
        loglik: eval.loglik,
        score: eval.score.iter().copied().collect(),
        information: eval.information,
        se,
        at_boundary,
        iterations,
        converged,
        clamp_count: eval.clamped,
    })
}

/// Station-averaged transition matrix with delta-method standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSummary {
    pub mean: DMatrix<f64>,
    /// NaN where the information matrix is not invertible.
    pub se: DMatrix<f64>,
}

/// Entry (i, j) is the mean over stations of π_sij at the fitted
/// parameters; standard errors come from gᵀ I⁻¹ g with g the parameter
/// gradient of that mean.
pub fn average_transition_matrix(
    result: &FitResult,
    spec: &ModelSpec,
    data: &[StationRecord],
) -> Result<TransitionSummary> {
    let (r, c) = (spec.rows, spec.cols);
    let d = c - 1;
    let k = data.len() as f64;
    let p = spec.n_params();
    let mut mean = DMatrix::zeros(r, c);
    // gradient of cell (i, j) stored at row i*c + j
    let mut grad = DMatrix::zeros(r * c, p);
    for rec in data {
        let probs = station_probs(&result.params, &spec.design, &rec.v)?;
        for i in 0..r {
            for j in 0..c {
                mean[(i, j)] += probs[(i, j)] / k;
                for m in 0..d {
                    let delta = if j == m { 1.0 } else { 0.0 };
                    let dp = probs[(i, j)] * (delta - probs[(i, m)]) / k;
                    grad[(i * c + j, i * d + m)] += dp;
                }
            }
        }
        for (b, e) in spec.design.entries().iter().enumerate() {
            let i = e.row;
            let w = rec.v[e.covariate];
            for j in 0..c {
                let delta = if j == e.col { 1.0 } else { 0.0 };
                let dp = probs[(i, j)] * (delta - probs[(i, e.col)]) / k;
                grad[(i * c + j, spec.n_alpha() + b)] += w * dp;
            }
        }
    }
    let se = match result.covariance() {
        Some(cov) => {
            let g_cov: DMatrix<f64> = &grad * cov;
            DMatrix::from_fn(r, c, |i, j| {
                let row = i * c + j;
                g_cov.row(row).dot(&grad.row(row)).max(0.0).sqrt()
            })
        }
        None => DMatrix::from_element(r, c, f64::NAN),
    };
    Ok(TransitionSummary { mean, se })
}

/// One refit of a sensitivity sweep over the cluster size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRun {
    pub cluster_size: f64,
    pub fit: FitResult,
    pub transitions: TransitionSummary,
}

/// Refits the model at every cluster size in `c_values`.
pub fn sensitivity(
    data: &[StationRecord],
    spec: &ModelSpec,
    c_values: &[f64],
    options: &FitOptions,
) -> Result<Vec<SensitivityRun>> {
    if c_values.is_empty() {
        return Err(Error::Config("no cluster sizes to sweep".into()));
    }
    c_values
        .iter()
        .map(|&cs| {
            let s = spec.clone().with_cluster_size(cs);
            let fit = fit(data, &s, options, None)?;
            let transitions = average_transition_matrix(&fit, &s, data)?;
            Ok(SensitivityRun {
                cluster_size: cs,
                fit,
                transitions,
            })
        })
        .collect()
}

/// Largest absolute difference in any averaged transition probability
/// between any two runs of a sweep.
pub fn max_transition_drift(runs: &[SensitivityRun]) -> f64 {
    let mut worst = 0.0_f64;
    for a in runs {
        for b in runs {
            worst = worst.max((&a.transitions.mean - &b.transitions.mean).abs().max());
        }
    }
    worst
}
