//! Model parameterization: multinomial-logit transition probabilities with
//! covariate effects, logit-scale overdispersion, and the first two moments
//! of a polling station's second-election vote vector.
//!
//! Columns are second-election options; the last column is the logit
//! reference. Rows are first-election options. All moment vectors and
//! matrices drop the reference column.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower/upper clamp applied to probabilities when assembling covariances.
pub const PROB_FLOOR: f64 = 1e-12;

/// Average cluster size used when none is configured.
pub const DEFAULT_CLUSTER_SIZE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    /// First-election options.
    pub rows: usize,
    /// Second-election options, reference last.
    pub cols: usize,
    pub stations: usize,
}

impl Dimensions {
    pub fn new(rows: usize, cols: usize, stations: usize) -> Result<Self> {
        if rows < 1 || cols < 2 || stations < 1 {
            return Err(Error::InvalidInput(format!(
                "dimensions need r >= 1, c >= 2, k >= 1 (got r={rows}, c={cols}, k={stations})"
            )));
        }
        Ok(Self {
            rows,
            cols,
            stations,
        })
    }

    /// Count of free parameters that enter the expected vote vector.
    pub fn mean_parameter_count(&self, design: &CovariateDesign) -> usize {
        self.rows * (self.cols - 1) + design.len()
    }

    /// Observations available to identify the mean: one per non-reference
    /// column per station.
    pub fn observation_count(&self) -> usize {
        self.stations * (self.cols - 1)
    }

    pub fn is_identified(&self, design: &CovariateDesign) -> bool {
        self.mean_parameter_count(design) <= self.observation_count() && self.rows <= self.stations
    }

    pub fn check_identified(&self, design: &CovariateDesign) -> Result<()> {
        if self.is_identified(design) {
            Ok(())
        } else {
            Err(Error::Unidentified(format!(
                "{} mean parameters for {} observations across {} stations",
                self.mean_parameter_count(design),
                self.observation_count(),
                self.stations
            )))
        }
    }
}

/// One polling station: first-election counts `n`, second-election counts
/// `y`, covariate values `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub id: String,
    pub n: Vec<u64>,
    pub y: Vec<u64>,
    pub v: Vec<f64>,
}

impl StationRecord {
    pub fn new(id: impl Into<String>, n: Vec<u64>, y: Vec<u64>, v: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            n,
            y,
            v,
        }
    }

    pub fn electorate(&self) -> u64 {
        self.n.iter().sum()
    }

    pub fn is_balanced(&self) -> bool {
        self.n.iter().sum::<u64>() == self.y.iter().sum::<u64>()
    }

    /// Checks shape against the model and, unless waived, the equal-electorate
    /// condition.
    pub fn validate(&self, spec: &ModelSpec, allow_unbalanced: bool) -> Result<()> {
        if self.n.len() != spec.rows || self.y.len() != spec.cols {
            return Err(Error::InvalidInput(format!(
                "station {}: expected {} first-election and {} second-election counts, got {} and {}",
                self.id,
                spec.rows,
                spec.cols,
                self.n.len(),
                self.y.len()
            )));
        }
        if self.v.len() != spec.n_covariates {
            return Err(Error::InvalidInput(format!(
                "station {}: expected {} covariates, got {}",
                self.id,
                spec.n_covariates,
                self.v.len()
            )));
        }
        if self.v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariate values"));
        }
        if !allow_unbalanced && !self.is_balanced() {
            return Err(Error::InvalidInput(format!(
                "station {}: first-election total {} differs from second-election total {}",
                self.id,
                self.n.iter().sum::<u64>(),
                self.y.iter().sum::<u64>()
            )));
        }
        Ok(())
    }
}

/// One free covariate slope acting on the logit of cell (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovariateEffect {
    pub row: usize,
    pub col: usize,
    pub covariate: usize,
}

/// Sparse map from covariates to the cells they shift.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateDesign {
    entries: Vec<CovariateEffect>,
}

impl CovariateDesign {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(
        entries: Vec<CovariateEffect>,
        rows: usize,
        cols: usize,
        n_covariates: usize,
    ) -> Result<Self> {
        for (idx, e) in entries.iter().enumerate() {
            if e.row >= rows {
                return Err(Error::InvalidInput(format!(
                    "effect {idx}: row {} out of range",
                    e.row
                )));
            }
            if e.col + 1 >= cols {
                return Err(Error::InvalidInput(format!(
                    "effect {idx}: column {} is the reference column or out of range",
                    e.col
                )));
            }
            if e.covariate >= n_covariates {
                return Err(Error::InvalidInput(format!(
                    "effect {idx}: covariate {} out of range",
                    e.covariate
                )));
            }
            if entries[..idx].contains(e) {
                return Err(Error::InvalidInput(format!(
                    "effect {idx}: duplicate (row {}, col {}, covariate {})",
                    e.row, e.col, e.covariate
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CovariateEffect] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// How the overdispersion parameters are tied across rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overdispersion {
    /// One τ per first-election option.
    #[default]
    PerRow,
    /// A single τ shared by all rows.
    Shared,
}

/// Everything needed to map a parameter vector to station moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_covariates: usize,
    pub design: CovariateDesign,
    pub cluster_size: f64,
    pub overdispersion: Overdispersion,
}

impl ModelSpec {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            n_covariates: 0,
            design: CovariateDesign::empty(),
            cluster_size: DEFAULT_CLUSTER_SIZE,
            overdispersion: Overdispersion::PerRow,
        }
    }

    pub fn with_design(mut self, n_covariates: usize, design: CovariateDesign) -> Self {
        self.n_covariates = n_covariates;
        self.design = design;
        self
    }

    pub fn with_cluster_size(mut self, c: f64) -> Self {
        self.cluster_size = c;
        self
    }

    pub fn with_overdispersion(mut self, o: Overdispersion) -> Self {
        self.overdispersion = o;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 1 || self.cols < 2 {
            return Err(Error::InvalidInput(format!(
                "need r >= 1 and c >= 2 (got r={}, c={})",
                self.rows, self.cols
            )));
        }
        if !(self.cluster_size.is_finite() && self.cluster_size > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cluster size must be positive, got {}",
                self.cluster_size
            )));
        }
        CovariateDesign::new(
            self.design.entries.clone(),
            self.rows,
            self.cols,
            self.n_covariates,
        )
        .map(|_| ())
    }

    pub fn n_alpha(&self) -> usize {
        self.rows * (self.cols - 1)
    }

    pub fn n_tau(&self) -> usize {
        match self.overdispersion {
            Overdispersion::PerRow => self.rows,
            Overdispersion::Shared => 1,
        }
    }

    pub fn n_params(&self) -> usize {
        self.n_alpha() + self.design.len() + self.n_tau()
    }

    /// Index into the τ vector used by `row`.
    pub fn tau_index(&self, row: usize) -> usize {
        match self.overdispersion {
            Overdispersion::PerRow => row,
            Overdispersion::Shared => 0,
        }
    }

    /// Human-readable labels in packing order.
    pub fn parameter_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_params());
        for i in 0..self.rows {
            for j in 0..self.cols - 1 {
                out.push(format!("alpha[{},{}]", i + 1, j + 1));
            }
        }
        for e in self.design.entries() {
            out.push(format!(
                "beta[{},{};v{}]",
                e.row + 1,
                e.col + 1,
                e.covariate + 1
            ));
        }
        match self.overdispersion {
            Overdispersion::PerRow => {
                for i in 0..self.rows {
                    out.push(format!("tau[{}]", i + 1));
                }
            }
            Overdispersion::Shared => out.push("tau".to_string()),
        }
        out
    }
}

/// Free parameters: baseline logits α (r × (c−1), row-major), covariate
/// slopes β (one per design entry) and logit overdispersions τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub rows: usize,
    pub cols: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            rows: spec.rows,
            cols: spec.cols,
            alpha: vec![0.0; spec.n_alpha()],
            beta: vec![0.0; spec.design.len()],
            tau: vec![0.0; spec.n_tau()],
        }
    }

    pub fn alpha(&self, row: usize, col: usize) -> f64 {
        self.alpha[row * (self.cols - 1) + col]
    }

    pub fn set_alpha(&mut self, row: usize, col: usize, value: f64) {
        self.alpha[row * (self.cols - 1) + col] = value;
    }

    pub fn alpha_row(&self, row: usize) -> &[f64] {
        let w = self.cols - 1;
        &self.alpha[row * w..(row + 1) * w]
    }

    pub fn theta(&self, tau_index: usize) -> f64 {
        logistic(self.tau[tau_index])
    }

    pub fn len(&self) -> usize {
        self.alpha.len() + self.beta.len() + self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.tau);
        out
    }

    pub fn unpack(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.n_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} packed parameters, got {}",
                spec.n_params(),
                flat.len()
            )));
        }
        let (alpha, rest) = flat.split_at(spec.n_alpha());
        let (beta, tau) = rest.split_at(spec.design.len());
        Ok(Self {
            rows: spec.rows,
            cols: spec.cols,
            alpha: alpha.to_vec(),
            beta: beta.to_vec(),
            tau: tau.to_vec(),
        })
    }

    pub fn check_shape(&self, spec: &ModelSpec) -> Result<()> {
        if self.rows != spec.rows
            || self.cols != spec.cols
            || self.alpha.len() != spec.n_alpha()
            || self.beta.len() != spec.design.len()
            || self.tau.len() != spec.n_tau()
        {
            return Err(Error::InvalidInput(
                "parameter vector does not match the model specification".into(),
            ));
        }
        if self.pack().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(())
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Reference-category softmax without validation; writes `lambda.len() + 1`
/// probabilities into `out`.
pub(crate) fn softmax_into(lambda: &[f64], out: &mut [f64]) {
    let m = lambda.iter().copied().fold(0.0_f64, f64::max);
    let mut total = (-m).exp();
    for (o, &l) in out.iter_mut().zip(lambda) {
        *o = (l - m).exp();
        total += *o;
    }
    let last = lambda.len();
    out[last] = (-m).exp();
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Maps c−1 logits against the last category to a probability vector of
/// length c.
pub fn logits_to_probs(lambda: &[f64]) -> Result<Vec<f64>> {
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = vec![0.0; lambda.len() + 1];
    softmax_into(lambda, &mut out);
    Ok(out)
}

pub fn probs_to_logits(p: &[f64]) -> Result<Vec<f64>> {
    if p.len() < 2 {
        return Err(Error::InvalidInput(
            "probability vector needs at least two entries".into(),
        ));
    }
    for (cell, &value) in p.iter().enumerate() {
        if !(value > 0.0 && value < 1.0) {
            return Err(Error::Boundary { cell, value });
        }
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    let reference = p[p.len() - 1].ln();
    Ok(p[..p.len() - 1]
        .iter()
        .map(|x| x.ln() - reference)
        .collect())
}

/// Logits of every row at a station with covariate vector `v`.
pub(crate) fn station_logits(
    params: &ParameterVector,
    design: &CovariateDesign,
    v: &[f64],
) -> Vec<f64> {
    let mut lambda = params.alpha.clone();
    let w = params.cols - 1;
    for (e, b) in design.entries().iter().zip(&params.beta) {
        lambda[e.row * w + e.col] += b * v[e.covariate];
    }
    lambda
}

/// Transition probabilities at a station: row i is the softmax of
/// α_i + Σ β v over the design entries that hit row i.
pub fn station_probs(
    params: &ParameterVector,
    design: &CovariateDesign,
    v: &[f64],
) -> Result<DMatrix<f64>> {
    if params.beta.len() != design.len() {
        return Err(Error::InvalidInput(format!(
            "{} slopes for {} design entries",
            params.beta.len(),
            design.len()
        )));
    }
    if let Some(e) = design.entries().iter().find(|e| e.covariate >= v.len()) {
        return Err(Error::InvalidInput(format!(
            "design references covariate {} but station has {}",
            e.covariate,
            v.len()
        )));
    }
    let lambda = station_logits(params, design, v);
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("station logits"));
    }
    let (r, c) = (params.rows, params.cols);
    let mut out = DMatrix::zeros(r, c);
    let mut row = vec![0.0; c];
    for i in 0..r {
        softmax_into(&lambda[i * (c - 1)..(i + 1) * (c - 1)], &mut row);
        for j in 0..c {
            out[(i, j)] = row[j];
        }
    }
    Ok(out)
}

/// diag(π̃) − π̃π̃ᵀ over the first c−1 categories.
pub fn multinomial_kernel(pi: &[f64]) -> DMatrix<f64> {
    let d = pi.len() - 1;
    DMatrix::from_fn(d, d, |a, b| {
        let cross = -pi[a] * pi[b];
        if a == b {
            pi[a] + cross
        } else {
            cross
        }
    })
}

/// Covariance of a plain multinomial draw of size n (the θ → 0 limit).
pub fn multinomial_covariance(pi: &[f64], n: u64) -> DMatrix<f64> {
    multinomial_kernel(pi) * n as f64
}

/// Variance inflation 1 + θ·C·(n−1)/n for the cluster model.
pub fn overdispersion_factor(theta: f64, cluster_size: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 + theta * cluster_size * (n - 1.0) / n
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTheta(theta))
    }
}

fn check_probs(pi: &[f64]) -> Result<()> {
    if pi.len() < 2 {
        return Err(Error::InvalidInput(
            "probability vector needs at least two entries".into(),
        ));
    }
    if let Some((cell, &value)) = pi
        .iter()
        .enumerate()
        .find(|(_, p)| !(p.is_finite() && **p >= 0.0 && **p <= 1.0))
    {
        return Err(Error::Boundary { cell, value });
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

/// Covariance of one row's second-election votes under the cluster model:
/// n·[1 + θC(n−1)/n]·[diag(π̃) − π̃π̃ᵀ].
pub fn row_variance(pi: &[f64], theta: f64, cluster_size: f64, n: u64) -> Result<DMatrix<f64>> {
    check_probs(pi)?;
    check_theta(theta)?;
    if !(cluster_size > 0.0) {
        return Err(Error::InvalidInput(format!(
            "cluster size must be positive, got {cluster_size}"
        )));
    }
    let d = pi.len() - 1;
    if n == 0 {
        return Ok(DMatrix::zeros(d, d));
    }
    Ok(multinomial_kernel(pi) * (n as f64 * overdispersion_factor(theta, cluster_size, n)))
}

/// Compound-multinomial covariance n·[1 + θ(n−1)]·[diag(π̃) − π̃π̃ᵀ], whose
/// inflation grows with n. Comparison only; never fitted.
pub fn brown_payne_variance(pi: &[f64], theta: f64, n: u64) -> Result<DMatrix<f64>> {
    check_probs(pi)?;
    check_theta(theta)?;
    let d = pi.len() - 1;
    if n == 0 {
        return Ok(DMatrix::zeros(d, d));
    }
    let n = n as f64;
    Ok(multinomial_kernel(pi) * (n * (1.0 + theta * (n - 1.0))))
}

/// Expected second-election counts and their covariance at one station,
/// reference column dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct StationMoments {
    pub mu: DVector<f64>,
    pub v: DMatrix<f64>,
    /// Probabilities that hit the numerical floor while assembling `v`.
    pub clamped: usize,
}

/// Clamps `pi` in place to [PROB_FLOOR, 1 − PROB_FLOOR]; returns the number
/// of entries moved.
pub(crate) fn clamp_probs(pi: &mut [f64]) -> usize {
    let mut moved = 0;
    for p in pi.iter_mut() {
        if *p < PROB_FLOOR {
            *p = PROB_FLOOR;
            moved += 1;
        } else if *p > 1.0 - PROB_FLOOR {
            *p = 1.0 - PROB_FLOOR;
            moved += 1;
        }
    }
    moved
}

pub fn station_moments(
    params: &ParameterVector,
    spec: &ModelSpec,
    record: &StationRecord,
) -> Result<StationMoments> {
    params.check_shape(spec)?;
    record.validate(spec, true)?;
    let probs = station_probs(params, &spec.design, &record.v)?;
    let d = spec.cols - 1;
    let mut mu = DVector::zeros(d);
    let mut v = DMatrix::zeros(d, d);
    let mut clamped = 0;
    let mut row = vec![0.0; spec.cols];
    for i in 0..spec.rows {
        let n = record.n[i];
        if n == 0 {
            continue;
        }
        for j in 0..spec.cols {
            row[j] = probs[(i, j)];
        }
        for j in 0..d {
            mu[j] += n as f64 * row[j];
        }
        clamped += clamp_probs(&mut row);
        let theta = params.theta(spec.tau_index(i));
        let scale = n as f64 * overdispersion_factor(theta, spec.cluster_size, n);
        v += multinomial_kernel(&row) * scale;
    }
    Ok(StationMoments { mu, v, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two_spec() -> ModelSpec {
        ModelSpec::new(2, 2)
    }

    fn scenario_params(spec: &ModelSpec) -> ParameterVector {
        let mut p = ParameterVector::zeros(spec);
        p.set_alpha(0, 0, (0.7_f64 / 0.3).ln());
        p.set_alpha(1, 0, (0.2_f64 / 0.8).ln());
        p.tau = vec![logit(0.1); spec.n_tau()];
        p
    }

    #[test]
    fn softmax_symmetric() {
        let p = logits_to_probs(&[0.0, 0.0]).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_scenario_rows() {
        let p = logits_to_probs(&[(0.7_f64 / 0.3).ln()]).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-14 && (p[1] - 0.3).abs() < 1e-14);
        let p = logits_to_probs(&[(0.2_f64 / 0.8).ln()]).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-14 && (p[1] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn softmax_rejects_nan_and_survives_overflow() {
        assert!(logits_to_probs(&[f64::NAN]).is_err());
        let p = logits_to_probs(&[800.0, -800.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_logits() {
        let l = probs_to_logits(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert!(l.iter().all(|x| x.abs() < 1e-15));
        let l = probs_to_logits(&[0.7, 0.3]).unwrap();
        assert!((l[0] - 0.8473).abs() < 1e-4);
    }

    #[test]
    fn inverse_logits_names_boundary_cell() {
        match probs_to_logits(&[0.5, 0.0, 0.5]) {
            Err(Error::Boundary { cell, .. }) => assert_eq!(cell, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            probs_to_logits(&[1.0, 0.0]),
            Err(Error::Boundary { cell: 0, .. })
        ));
    }

    #[test]
    fn station_probs_without_covariates() {
        let spec = two_by_two_spec();
        let p = scenario_params(&spec);
        let a = station_probs(&p, &spec.design, &[]).unwrap();
        assert!((a[(0, 0)] - 0.7).abs() < 1e-14);
        assert!((a[(1, 1)] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn station_probs_with_covariates() {
        let design = CovariateDesign::new(
            vec![
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
            2,
            2,
            1,
        )
        .unwrap();
        let spec = two_by_two_spec().with_design(1, design);
        let mut p = scenario_params(&spec);
        p.beta = vec![1.0, 0.0];
        let at_zero = station_probs(&p, &spec.design, &[0.0]).unwrap();
        let plain = station_probs(&p, &CovariateDesign::empty(), &[]);
        assert!(plain.is_err(), "beta length must match the design");
        assert!((at_zero[(0, 0)] - 0.7).abs() < 1e-14);

        // hand evaluation: logistic(log(7/3) - 1), logistic(log(1/4) + 0.5)
        p.beta = vec![-1.0, 0.5];
        let at_one = station_probs(&p, &spec.design, &[1.0]).unwrap();
        let e1 = (7.0_f64 / 3.0) * (-1.0_f64).exp();
        let e2 = 0.25 * 0.5_f64.exp();
        assert!((at_one[(0, 0)] - e1 / (1.0 + e1)).abs() < 1e-14);
        assert!((at_one[(1, 0)] - e2 / (1.0 + e2)).abs() < 1e-14);
        assert!((at_one[(0, 0)] - 0.461_898_5).abs() < 1e-6);
        assert!((at_one[(1, 0)] - 0.291_875_1).abs() < 1e-6);
    }

    #[test]
    fn design_rejects_reference_and_duplicates() {
        let e = CovariateEffect {
            row: 0,
            col: 1,
            covariate: 0,
        };
        assert!(CovariateDesign::new(vec![e], 2, 2, 1).is_err());
        let e = CovariateEffect {
            row: 0,
            col: 0,
            covariate: 0,
        };
        assert!(CovariateDesign::new(vec![e, e], 2, 2, 1).is_err());
        assert!(CovariateDesign::new(vec![e], 2, 2, 0).is_err());
    }

    #[test]
    fn row_variance_examples() {
        let v = row_variance(&[0.7, 0.3], 0.1, 50.0, 700).unwrap();
        let expected = 700.0 * (1.0 + 0.1 * 50.0 * 699.0 / 700.0) * 0.21;
        assert!((v[(0, 0)] - expected).abs() < 1e-9);
        assert!((v[(0, 0)] - 880.95).abs() < 1e-9);

        let single = row_variance(&[0.2, 0.5, 0.3], 0.3, 50.0, 1).unwrap();
        assert!(
            (single - multinomial_covariance(&[0.2, 0.5, 0.3], 1))
                .abs()
                .max()
                < 1e-15
        );

        let empty = row_variance(&[0.2, 0.8], 0.3, 50.0, 0).unwrap();
        assert_eq!(empty[(0, 0)], 0.0);

        let tiny = row_variance(&[0.2, 0.5, 0.3], 1e-14, 50.0, 400).unwrap();
        assert!(
            (tiny - multinomial_covariance(&[0.2, 0.5, 0.3], 400))
                .abs()
                .max()
                < 1e-9
        );

        assert!(row_variance(&[0.7, 0.3], 0.0, 50.0, 10).is_err());
        assert!(row_variance(&[0.7, 0.3], 1.0, 50.0, 10).is_err());
    }

    #[test]
    fn brown_payne_examples() {
        let v = brown_payne_variance(&[0.7, 0.3], 0.1, 700).unwrap();
        assert!((v[(0, 0)] - 10_422.3).abs() < 1e-9);
        let one = brown_payne_variance(&[0.7, 0.3], 0.4, 1).unwrap();
        assert!((one[(0, 0)] - 0.21).abs() < 1e-15);
    }

    #[test]
    fn cluster_vs_compound_growth() {
        let pi = [0.5, 0.3, 0.2];
        let (theta, c) = (0.1, 20.0);
        for n in [10_u64, 1_000, 100_000, 10_000_000] {
            let f = overdispersion_factor(theta, c, n);
            assert!(f <= 1.0 + theta * c);
            let a = row_variance(&pi, theta, c, n).unwrap();
            let b = brown_payne_variance(&pi, theta, n).unwrap();
            let want = f / (1.0 + theta * (n as f64 - 1.0));
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x / y - want).abs() < 1e-12);
            }
        }
        let n = 10_000_000_u64;
        let limit = (1.0 + theta * c) / (1.0 + theta * (n as f64 - 1.0));
        let a = row_variance(&pi, theta, c, n).unwrap();
        let b = brown_payne_variance(&pi, theta, n).unwrap();
        assert!(((a[(0, 0)] / b[(0, 0)]) / limit - 1.0).abs() < 1e-5);
    }

    #[test]
    fn moments_single_row() {
        let spec = ModelSpec::new(1, 3);
        let mut p = ParameterVector::zeros(&spec);
        p.alpha = vec![0.4, -0.2];
        p.tau = vec![logit(0.2)];
        let rec = StationRecord::new("s", vec![100], vec![30, 30, 40], vec![]);
        let m = station_moments(&p, &spec, &rec).unwrap();
        let pi = logits_to_probs(&[0.4, -0.2]).unwrap();
        assert!((m.mu[0] - 100.0 * pi[0]).abs() < 1e-12);
        let v = row_variance(&pi, 0.2, spec.cluster_size, 100).unwrap();
        assert!((m.v.clone() - v).abs().max() < 1e-10);
    }

    #[test]
    fn moments_discordant_mean_at_zero_covariate() {
        let design = CovariateDesign::new(
            vec![
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
            2,
            2,
            1,
        )
        .unwrap();
        let spec = two_by_two_spec().with_design(1, design);
        let mut p = scenario_params(&spec);
        p.beta = vec![-1.0, 0.5];
        let rec = StationRecord::new("s", vec![400, 300], vec![340, 360], vec![0.0]);
        let m = station_moments(&p, &spec, &rec).unwrap();
        assert!((m.mu[0] - 340.0).abs() < 1e-10);
    }

    #[test]
    fn moments_near_zero_theta_add_as_multinomials() {
        let spec = two_by_two_spec();
        let mut p = scenario_params(&spec);
        p.tau = vec![-40.0, -40.0];
        let rec = StationRecord::new("s", vec![120, 80], vec![100, 100], vec![]);
        let m = station_moments(&p, &spec, &rec).unwrap();
        let want = 120.0 * 0.21 + 80.0 * 0.16;
        assert!((m.v[(0, 0)] - want).abs() < 1e-9);
    }

    #[test]
    fn zero_rows_contribute_nothing() {
        let spec = two_by_two_spec();
        let p = scenario_params(&spec);
        let a = station_moments(
            &p,
            &spec,
            &StationRecord::new("a", vec![0, 80], vec![20, 60], vec![]),
        )
        .unwrap();
        let one_row = ModelSpec::new(1, 2);
        let mut q = ParameterVector::zeros(&one_row);
        q.alpha = p.alpha_row(1).to_vec();
        q.tau = vec![p.tau[1]];
        let b = station_moments(
            &q,
            &one_row,
            &StationRecord::new("b", vec![80], vec![20, 60], vec![]),
        )
        .unwrap();
        assert!((a.mu[0] - b.mu[0]).abs() < 1e-12);
        assert!((a.v[(0, 0)] - b.v[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn dimensions_identification() {
        let d = Dimensions::new(3, 3, 2).unwrap();
        assert!(!d.is_identified(&CovariateDesign::empty()));
        let d = Dimensions::new(3, 3, 3).unwrap();
        assert!(d.is_identified(&CovariateDesign::empty()));
        assert!(Dimensions::new(1, 1, 4).is_err());
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let spec = two_by_two_spec();
        assert!(ParameterVector::unpack(&spec, &[0.0; 3]).is_err());
    }
}
