//! Synthetic elections from the cluster model and the Monte Carlo study
//! built on them.
//!
//! Per station: draw an electorate size and first-election probabilities
//! uniformly within bounds, then first-election counts from a multinomial.
//! Voters of each first-election option split into ⌊n_is / C⌋ clusters
//! (at least one) with multinomial-uniform sizes; each cluster draws its
//! own transition probabilities from a Dirichlet with mean π_si and
//! variance θ_i[diag(π) − ππᵀ], then votes multinomially.
//!
//! Every replicate uses its own ChaCha stream derived from
//! `(seed, replicate)`, so results are identical however replicates are
//! scheduled.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{average_transition_matrix, fit, FitOptions};
use crate::io::build_covariate;
use crate::model::{
    logit, station_probs, CovariateDesign, CovariateEffect, ModelSpec, Overdispersion,
    ParameterVector, StationRecord,
};

/// Normal quantiles 0.90, 0.95, 0.975 and 0.995: two-sided 20%, 10%, 5%
/// and 1% thresholds.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [1.2815, 1.6449, 1.9600, 2.576];

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p)
            .expect("binomial parameters checked above")
            .sample(rng)
    }
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64]) -> Vec<u64> {
    let mut out = vec![0; probs.len()];
    let mut remaining = n;
    let mut mass = 1.0;
    let last = probs.len() - 1;
    for (j, &p) in probs[..last].iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let cond = if mass > 0.0 {
            (p / mass).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let x = binomial(rng, remaining, cond);
        out[j] = x;
        remaining -= x;
        mass -= p;
    }
    out[last] += remaining;
    out
}

/// Dirichlet concentrations with mean `mean` and covariance
/// θ[diag(π) − ππᵀ]: a_j = π_j (1 − θ)/θ.
pub fn dirichlet_from_mean_precision(mean: &[f64], theta: f64) -> Result<Vec<f64>> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidTheta(theta));
    }
    if let Some((cell, &value)) = mean.iter().enumerate().find(|(_, p)| !(**p >= 0.0)) {
        return Err(Error::Boundary { cell, value });
    }
    let precision = (1.0 - theta) / theta;
    Ok(mean.iter().map(|p| p * precision).collect())
}

pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: &[f64]) -> Vec<f64> {
    for _ in 0..64 {
        let draws: Vec<f64> = concentration
            .iter()
            .map(|&a| {
                if a > 0.0 {
                    Gamma::new(a, 1.0).expect("positive shape").sample(rng)
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
    // every gamma underflowed: fall back to the mean
    let total: f64 = concentration.iter().sum();
    concentration.iter().map(|a| a / total).collect()
}

/// Second-election votes of `n` voters who share a first-election choice,
/// drawn through the cluster mechanism. `theta == 0` disables the
/// Dirichlet layer.
pub fn draw_row_votes<R: Rng + ?Sized>(
    rng: &mut R,
    n: u64,
    pi: &[f64],
    theta: f64,
    cluster_size: f64,
) -> Result<Vec<u64>> {
    let c = pi.len();
    if n == 0 {
        return Ok(vec![0; c]);
    }
    if theta == 0.0 {
        return Ok(sample_multinomial(rng, n, pi));
    }
    let alpha = dirichlet_from_mean_precision(pi, theta)?;
    let clusters = ((n as f64 / cluster_size).floor() as u64).max(1);
    let mut out = vec![0; c];
    let mut remaining = n;
    for h in 0..clusters {
        let size = if h + 1 == clusters {
            remaining
        } else {
            binomial(rng, remaining, 1.0 / (clusters - h) as f64)
        };
        remaining -= size;
        if size == 0 {
            continue;
        }
        let p = sample_dirichlet(rng, &alpha);
        for (o, v) in out.iter_mut().zip(sample_multinomial(rng, size, &p)) {
            *o += v;
        }
    }
    Ok(out)
}

/// How a scenario's covariates are produced. Both are centered logits of a
/// per-station share, centered at the sample mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSource {
    /// Share of first-election option `row` in the station's electorate.
    FirstElectionShare { row: usize },
    /// Share of an auxiliary option drawn uniformly on [low, high].
    AuxiliaryShare { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confounding {
    None,
    Concordant,
    Discordant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub stations: usize,
    /// Inclusive bounds on the electorate Σ_i n_is.
    pub electorate_bounds: [u64; 2],
    /// Uniform bounds per first-election option. With r − 1 entries the
    /// last option takes the remainder; with r entries the draws are
    /// normalized.
    pub first_election_prob_bounds: Vec<[f64; 2]>,
    /// Baseline logits, r rows of c − 1.
    pub alpha: Vec<Vec<f64>>,
    #[serde(default)]
    pub covariates: Vec<CovariateSource>,
    #[serde(default)]
    pub effects: Vec<CovariateEffect>,
    #[serde(default)]
    pub beta: Vec<f64>,
    /// Per-row overdispersion; 0 disables the Dirichlet layer.
    pub theta: Vec<f64>,
    pub cluster_size: f64,
    /// τ structure of the model fitted to the generated data.
    #[serde(default)]
    pub overdispersion: Overdispersion,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// Two parties in both elections, α = (log(.7/.3), log(.2/.8)), one
    /// centered-logit covariate, θ = 0.1 and a shared τ. The first-election
    /// share of option 1 is uniform on [0.05, 0.95].
    pub fn two_party(confounding: Confounding, electorate_bounds: [u64; 2], seed: u64) -> Self {
        let beta = match confounding {
            Confounding::None => vec![0.0, 0.0],
            Confounding::Concordant => vec![1.0, 0.5],
            Confounding::Discordant => vec![-1.0, 0.5],
        };
        Self {
            stations: 200,
            electorate_bounds,
            first_election_prob_bounds: vec![[0.05, 0.95]],
            alpha: vec![vec![(0.7_f64 / 0.3).ln()], vec![(0.2_f64 / 0.8).ln()]],
            covariates: vec![CovariateSource::FirstElectionShare { row: 0 }],
            effects: vec![
                CovariateEffect {
                    row: 0,
                    col: 0,
                    covariate: 0,
                },
                CovariateEffect {
                    row: 1,
                    col: 0,
                    covariate: 0,
                },
            ],
            beta,
            theta: vec![0.1, 0.1],
            cluster_size: 50.0,
            overdispersion: Overdispersion::Shared,
            seed,
        }
    }

    /// Three first-election options (two candidates and abstention), three
    /// second-election options (yes, no, abstention), 1159 stations and
    /// five single-cell covariate effects.
    pub fn milan_like(seed: u64) -> Self {
        let logits = |p: [f64; 3]| vec![(p[0] / p[2]).ln(), (p[1] / p[2]).ln()];
        Self {
            stations: 1159,
            electorate_bounds: [600, 1100],
            first_election_prob_bounds: vec![[0.25, 0.40], [0.30, 0.45]],
            alpha: vec![
                logits([0.1388, 0.0858, 0.7754]),
                logits([0.933, 0.005, 0.062]),
                logits([0.2938, 0.0428, 0.6634]),
            ],
            covariates: vec![
                CovariateSource::AuxiliaryShare {
                    low: 0.15,
                    high: 0.35,
                },
                CovariateSource::AuxiliaryShare {
                    low: 0.03,
                    high: 0.12,
                },
                CovariateSource::AuxiliaryShare {
                    low: 0.02,
                    high: 0.08,
                },
                CovariateSource::AuxiliaryShare {
                    low: 0.02,
                    high: 0.08,
                },
                CovariateSource::AuxiliaryShare {
                    low: 0.25,
                    high: 0.45,
                },
            ],
            effects: vec![
                CovariateEffect {
                    row: 0,
                    col: 0,
                    covariate: 1,
                },
                CovariateEffect {
                    row: 2,
                    col: 0,
                    covariate: 2,
                },
                CovariateEffect {
                    row: 2,
                    col: 0,
                    covariate: 4,
                },
                CovariateEffect {
                    row: 0,
                    col: 0,
                    covariate: 0,
                },
                CovariateEffect {
                    row: 1,
                    col: 0,
                    covariate: 3,
                },
            ],
            beta: vec![0.3311, 0.0810, -0.7326, -0.3996, 0.4167],
            theta: vec![0.08, 0.05, 0.1],
            cluster_size: 50.0,
            overdispersion: Overdispersion::PerRow,
            seed,
        }
    }

    pub fn rows(&self) -> usize {
        self.alpha.len()
    }

    pub fn cols(&self) -> usize {
        self.alpha.first().map_or(0, |a| a.len() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let r = self.rows();
        if self.stations == 0 {
            return bad("scenario needs at least one station".into());
        }
        let [lo, hi] = self.electorate_bounds;
        if lo == 0 || lo > hi {
            return bad(format!(
                "electorate bounds [{lo}, {hi}] are not ordered and positive"
            ));
        }
        if r == 0 || self.alpha.iter().any(|a| a.len() + 1 != self.cols()) || self.cols() < 2 {
            return bad("alpha must be r rows of c − 1 logits with c >= 2".into());
        }
        if self.alpha.iter().flatten().any(|a| !a.is_finite()) {
            return bad("alpha must be finite".into());
        }
        let nb = self.first_election_prob_bounds.len();
        if nb != r && !(nb + 1 == r) {
            return bad(format!(
                "need {r} or {} first-election bounds, got {nb}",
                r - 1
            ));
        }
        for [l, h] in &self.first_election_prob_bounds {
            if !(0.0..=1.0).contains(l) || !(0.0..=1.0).contains(h) || l > h {
                return bad(format!("first-election bounds [{l}, {h}] invalid"));
            }
        }
        if nb + 1 == r {
            let top: f64 = self.first_election_prob_bounds.iter().map(|b| b[1]).sum();
            if top > 1.0 {
                return bad("upper first-election bounds leave no room for the last option".into());
            }
        }
        for (idx, src) in self.covariates.iter().enumerate() {
            match src {
                CovariateSource::FirstElectionShare { row } if *row >= r => {
                    return bad(format!("covariate {idx}: row {row} out of range"));
                }
                CovariateSource::AuxiliaryShare { low, high }
                    if !(0.0 < *low && low <= high && *high < 1.0) =>
                {
                    return bad(format!(
                        "covariate {idx}: share bounds [{low}, {high}] invalid"
                    ));
                }
                _ => {}
            }
        }
        CovariateDesign::new(self.effects.clone(), r, self.cols(), self.covariates.len())?;
        if self.beta.len() != self.effects.len() {
            return bad(format!(
                "{} slopes for {} effects",
                self.beta.len(),
                self.effects.len()
            ));
        }
        if self.theta.len() != r || self.theta.iter().any(|t| !(0.0..1.0).contains(t)) {
            return bad("theta needs one value in [0, 1) per row".into());
        }
        if self.overdispersion == Overdispersion::Shared
            && self.theta.iter().any(|t| *t != self.theta[0])
        {
            return bad("a shared τ needs equal θ across rows".into());
        }
        if !(self.cluster_size > 0.0) {
            return bad("cluster size must be positive".into());
        }
        Ok(())
    }

    /// The model that matches this generator.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let design = CovariateDesign::new(
            self.effects.clone(),
            self.rows(),
            self.cols(),
            self.covariates.len(),
        )?;
        Ok(ModelSpec::new(self.rows(), self.cols())
            .with_design(self.covariates.len(), design)
            .with_cluster_size(self.cluster_size)
            .with_overdispersion(self.overdispersion))
    }

    /// Generating parameters in the fitted model's packing. θ = 0 maps to
    /// τ = logit(1e−12).
    pub fn true_params(&self) -> Result<ParameterVector> {
        let spec = self.model_spec()?;
        let mut p = ParameterVector::zeros(&spec);
        p.alpha = self.alpha.iter().flatten().copied().collect();
        p.beta = self.beta.clone();
        for (t, tau) in p.tau.iter_mut().enumerate() {
            *tau = logit(self.theta[t].max(1e-12));
        }
        Ok(p)
    }
}

/// A generated dataset with its latent r × c tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub records: Vec<StationRecord>,
    pub latent: Vec<DMatrix<u64>>,
}

fn first_election_probs<R: Rng + ?Sized>(
    rng: &mut R,
    bounds: &[[f64; 2]],
    rows: usize,
) -> Vec<f64> {
    let draws: Vec<f64> = bounds
        .iter()
        .map(|&[l, h]| if h > l { rng.random_range(l..h) } else { l })
        .collect();
    if draws.len() == rows {
        let total: f64 = draws.iter().sum();
        draws.into_iter().map(|d| d / total).collect()
    } else {
        let rest = 1.0 - draws.iter().sum::<f64>();
        let mut out = draws;
        out.push(rest.max(0.0));
        out
    }
}

pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<SimulatedData> {
    generate_replicate(cfg, 0)
}

/// Dataset for one replicate, drawn from stream `replicate` of `cfg.seed`.
pub fn generate_replicate(cfg: &ScenarioConfig, replicate: u64) -> Result<SimulatedData> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, replicate);
    let (r, c, k) = (cfg.rows(), cfg.cols(), cfg.stations);

    let mut first = Vec::with_capacity(k);
    for _ in 0..k {
        let total = rng.random_range(cfg.electorate_bounds[0]..=cfg.electorate_bounds[1]);
        let probs = first_election_probs(&mut rng, &cfg.first_election_prob_bounds, r);
        first.push(sample_multinomial(&mut rng, total, &probs));
    }

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cfg.covariates.len());
    for src in &cfg.covariates {
        let shares: Vec<f64> = match *src {
            CovariateSource::FirstElectionShare { row } => first
                .iter()
                .map(|n| n[row] as f64 / n.iter().sum::<u64>() as f64)
                .collect(),
            CovariateSource::AuxiliaryShare { low, high } => {
                (0..k).map(|_| rng.random_range(low..high)).collect()
            }
        };
        columns.push(build_covariate(&shares));
    }

    let truth = cfg.true_params()?;
    let design = CovariateDesign::new(cfg.effects.clone(), r, c, cfg.covariates.len())?;
    let mut records = Vec::with_capacity(k);
    let mut latent = Vec::with_capacity(k);
    for (s, n) in first.into_iter().enumerate() {
        let v: Vec<f64> = columns.iter().map(|col| col[s]).collect();
        let pi = station_probs(&truth, &design, &v)?;
        let mut cells = DMatrix::zeros(r, c);
        let mut y = vec![0u64; c];
        let mut row = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                row[j] = pi[(i, j)];
            }
            let votes = draw_row_votes(&mut rng, n[i], &row, cfg.theta[i], cfg.cluster_size)?;
            for j in 0..c {
                cells[(i, j)] = votes[j];
                y[j] += votes[j];
            }
        }
        records.push(StationRecord::new(format!("{}", s + 1), n, y, v));
        latent.push(cells);
    }
    Ok(SimulatedData { records, latent })
}

/// First-election share of option 1 against second-election share of
/// option 1, one point per station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
}

pub fn scatter(records: &[StationRecord]) -> Vec<ScatterPoint> {
    records
        .iter()
        .map(|s| {
            let total = s.electorate().max(1) as f64;
            ScatterPoint {
                x: s.n[0] as f64 / total,
                y: s.y[0] as f64 / total,
            }
        })
        .collect()
}

/// Empirical moments of the two-stage mechanism for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceOracle {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Monte Carlo standard error of each covariance entry.
    pub se: DMatrix<f64>,
    pub reps: usize,
}

const ORACLE_CHUNK: usize = 4096;

/// Simulates `reps` draws of one row's second-election votes and returns
/// the empirical covariance with the reference column dropped.
pub fn variance_oracle(
    pi: &[f64],
    theta: f64,
    cluster_size: f64,
    n: u64,
    reps: usize,
    seed: u64,
) -> Result<VarianceOracle> {
    if reps < 10_000 {
        return Err(Error::InvalidInput(format!(
            "variance oracle needs at least 10^4 replicates, got {reps}"
        )));
    }
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidTheta(theta));
    }
    let d = pi.len() - 1;
    let chunks = reps.div_ceil(ORACLE_CHUNK);
    let draws: Vec<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng_for(seed, chunk as u64);
            let len = ORACLE_CHUNK.min(reps - chunk * ORACLE_CHUNK);
            (0..len)
                .map(|_| {
                    draw_row_votes(&mut rng, n, pi, theta, cluster_size)
                        .map(|v| v[..d].iter().map(|&x| x as f64).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()
        })
        .collect::<Result<_>>()?;
    let draws: Vec<Vec<f64>> = draws.into_iter().flatten().collect();

    let m = draws.len() as f64;
    let mean = DVector::from_fn(d, |a, _| draws.iter().map(|x| x[a]).sum::<f64>() / m);
    let mut cov = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let prods: Vec<f64> = draws
                .iter()
                .map(|x| (x[a] - mean[a]) * (x[b] - mean[b]))
                .collect();
            let avg = prods.iter().sum::<f64>() / m;
            let var = prods.iter().map(|p| (p - avg) * (p - avg)).sum::<f64>() / (m - 1.0);
            cov[(a, b)] = avg * m / (m - 1.0);
            cov[(b, a)] = cov[(a, b)];
            se[(a, b)] = (var / m).sqrt();
            se[(b, a)] = se[(a, b)];
        }
    }
    Ok(VarianceOracle {
        mean,
        cov,
        se,
        reps,
    })
}

/// Bias, standard-error calibration and tail exceedance over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub labels: Vec<String>,
    pub truth: Vec<f64>,
    pub mean_estimate: Vec<f64>,
    pub bias: Vec<f64>,
    /// Sample standard deviation of the estimates.
    pub sd: Vec<f64>,
    /// Mean information-based standard error.
    pub mean_se: Vec<f64>,
    pub se_ratio: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// `exceedance[p][t]`: share of replicates with |est − truth| > z_t·se.
    pub exceedance: Vec<Vec<f64>>,
    pub replicates: usize,
    pub successes: usize,
    pub failures: usize,
    /// Replicate index of each successful fit, in order.
    pub replicate_ids: Vec<usize>,
    pub estimates: Vec<Vec<f64>>,
    pub standard_errors: Vec<Vec<f64>>,
    /// Station-averaged transition matrices (row-major) and their
    /// delta-method standard errors, per successful replicate.
    pub avg_transitions: Vec<Vec<f64>>,
    pub avg_transition_se: Vec<Vec<f64>>,
}

struct ReplicateOutcome {
    estimate: Vec<f64>,
    se: Vec<f64>,
    avg: Vec<f64>,
    avg_se: Vec<f64>,
}

fn run_replicate(
    cfg: &ScenarioConfig,
    spec: &ModelSpec,
    replicate: usize,
    options: &FitOptions,
) -> Option<ReplicateOutcome> {
    let data = generate_replicate(cfg, replicate as u64).ok()?;
    let result = fit(&data.records, spec, options, None).ok()?;
    if !result.converged {
        return None;
    }
    let se = result.se.clone()?;
    let summary = average_transition_matrix(&result, spec, &data.records).ok()?;
    let row_major = |m: &DMatrix<f64>| {
        (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|ij| m[ij])
            .collect::<Vec<f64>>()
    };
    Some(ReplicateOutcome {
        estimate: result.params.pack(),
        se,
        avg: row_major(&summary.mean),
        avg_se: row_major(&summary.se),
    })
}

pub fn run_mc_study(
    cfg: &ScenarioConfig,
    replicates: usize,
    options: &FitOptions,
) -> Result<McReport> {
    run_mc_study_with(cfg, replicates, options, &DEFAULT_THRESHOLDS)
}

pub fn run_mc_study_with(
    cfg: &ScenarioConfig,
    replicates: usize,
    options: &FitOptions,
    thresholds: &[f64],
) -> Result<McReport> {
    if replicates == 0 {
        return Err(Error::InvalidInput("need at least one replicate".into()));
    }
    cfg.validate()?;
    let spec = cfg.model_spec()?;
    let truth = cfg.true_params()?.pack();

    let outcomes: Vec<Option<ReplicateOutcome>> = (0..replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &spec, rep, options))
        .collect();
    let mut replicate_ids = Vec::new();
    let mut kept = Vec::new();
    for (rep, o) in outcomes.into_iter().enumerate() {
        if let Some(o) = o {
            replicate_ids.push(rep);
            kept.push(o);
        }
    }
    if kept.is_empty() {
        return Err(Error::AllReplicatesFailed(replicates));
    }
    let m = kept.len() as f64;
    let p = truth.len();
    let mut mean_estimate = vec![0.0; p];
    let mut sd = vec![0.0; p];
    let mut mean_se = vec![0.0; p];
    let mut exceedance = vec![vec![0.0; thresholds.len()]; p];
    for a in 0..p {
        let est: Vec<f64> = kept.iter().map(|o| o.estimate[a]).collect();
        let mean = est.iter().sum::<f64>() / m;
        mean_estimate[a] = mean;
        sd[a] = if kept.len() > 1 {
            (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        mean_se[a] = kept.iter().map(|o| o.se[a]).sum::<f64>() / m;
        for (t, z) in thresholds.iter().enumerate() {
            let hits = kept
                .iter()
                .filter(|o| (o.estimate[a] - truth[a]).abs() > z * o.se[a])
                .count();
            exceedance[a][t] = hits as f64 / m;
        }
    }
    let bias = mean_estimate
        .iter()
        .zip(&truth)
        .map(|(e, t)| e - t)
        .collect();
    let se_ratio = mean_se.iter().zip(&sd).map(|(s, d)| s / d).collect();
    Ok(McReport {
        labels: spec.parameter_labels(),
        truth,
        mean_estimate,
        bias,
        sd,
        mean_se,
        se_ratio,
        thresholds: thresholds.to_vec(),
        exceedance,
        replicates,
        successes: kept.len(),
        failures: replicates - kept.len(),
        replicate_ids,
        estimates: kept.iter().map(|o| o.estimate.clone()).collect(),
        standard_errors: kept.iter().map(|o| o.se.clone()).collect(),
        avg_transitions: kept.iter().map(|o| o.avg.clone()).collect(),
        avg_transition_se: kept.iter().map(|o| o.avg_se.clone()).collect(),
    })
}
