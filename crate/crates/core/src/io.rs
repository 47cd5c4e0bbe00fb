//! Dataset files, model configuration, covariate construction and report
//! tables.
//!
//! A dataset is a CSV with a header and one row per polling station: an id
//! column, r first-election count columns, c second-election count columns
//! and any auxiliary columns the covariates need. The model configuration
//! is TOML; see `docs/config.md` for the schema.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{FitOptions, FitResult, SensitivityRun, TransitionSummary};
use crate::model::{
    CovariateDesign, CovariateEffect, Dimensions, ModelSpec, Overdispersion, StationRecord,
    DEFAULT_CLUSTER_SIZE,
};
use crate::reconstruction::{GoodmanResult, IpfOptions};
use crate::simulation::{McReport, ScenarioConfig};

/// Shares are clamped to [ε, 1 − ε] before taking logits.
pub const SHARE_EPSILON: f64 = 1e-4;

/// Centered logit of per-station shares.
pub fn build_covariate(shares: &[f64]) -> Vec<f64> {
    if shares.is_empty() {
        return Vec::new();
    }
    let raw: Vec<f64> = shares
        .iter()
        .map(|&s| {
            let s = if s.is_nan() {
                0.5
            } else {
                s.clamp(SHARE_EPSILON, 1.0 - SHARE_EPSILON)
            };
            (s / (1.0 - s)).ln()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|x| x - mean).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case")]
pub enum CovariateTransform {
    /// A numeric column used as is.
    Raw { column: String },
    /// Centered logit of Σ numerator / Σ denominator. Without a
    /// denominator the station's first-election total is used.
    CenteredLogit {
        numerator: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        denominator: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateConfig {
    pub name: String,
    #[serde(flatten)]
    pub transform: CovariateTransform,
}

/// One β coefficient, addressed by option and covariate names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectConfig {
    pub row: String,
    pub column: String,
    pub covariate: String,
}

fn default_id_column() -> String {
    "station".into()
}

fn default_cluster_size() -> f64 {
    DEFAULT_CLUSTER_SIZE
}

fn default_c_values() -> Vec<f64> {
    vec![10.0, 50.0, 100.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_id_column")]
    pub id_column: String,
    /// First-election count columns, in order.
    pub rows: Vec<String>,
    /// Second-election count columns; the last one is the reference.
    pub columns: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<CovariateConfig>,
    #[serde(default)]
    pub effects: Vec<EffectConfig>,
    #[serde(default = "default_cluster_size")]
    pub cluster_size: f64,
    /// Cluster sizes visited by `sensitivity`.
    #[serde(default = "default_c_values")]
    pub c_values: Vec<f64>,
    #[serde(default)]
    pub overdispersion: Overdispersion,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub ipf: IpfOptions,
    #[serde(default)]
    pub seed: u64,
    /// Station ids dropped before fitting.
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub allow_unbalanced: bool,
    /// Generator settings for `simulate` and `mc-study`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
}

impl ModelConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Configuration matching the files written for a simulated dataset:
    /// rows `x1..`, columns `y1..`, raw covariates `v1..`.
    pub fn for_scenario(scenario: &ScenarioConfig) -> Self {
        let rows: Vec<String> = (1..=scenario.rows()).map(|i| format!("x{i}")).collect();
        let columns: Vec<String> = (1..=scenario.cols()).map(|j| format!("y{j}")).collect();
        let covs: Vec<String> = (1..=scenario.covariates.len())
            .map(|m| format!("v{m}"))
            .collect();
        Self {
            id_column: default_id_column(),
            covariates: covs
                .iter()
                .map(|name| CovariateConfig {
                    name: name.clone(),
                    transform: CovariateTransform::Raw {
                        column: name.clone(),
                    },
                })
                .collect(),
            effects: scenario
                .effects
                .iter()
                .map(|e| EffectConfig {
                    row: rows[e.row].clone(),
                    column: columns[e.col].clone(),
                    covariate: covs[e.covariate].clone(),
                })
                .collect(),
            rows,
            columns,
            cluster_size: scenario.cluster_size,
            c_values: default_c_values(),
            overdispersion: scenario.overdispersion,
            fit: FitOptions::default(),
            ipf: IpfOptions::default(),
            seed: scenario.seed,
            exclude: Vec::new(),
            allow_unbalanced: false,
            scenario: Some(scenario.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rows.is_empty() || self.columns.len() < 2 {
            return bad("need at least one row option and two column options".into());
        }
        let mut seen = HashSet::new();
        for name in std::iter::once(&self.id_column)
            .chain(&self.rows)
            .chain(&self.columns)
        {
            if !seen.insert(name.as_str()) {
                return bad(format!("column `{name}` is listed twice"));
            }
        }
        let second: HashSet<&str> = self.columns.iter().map(String::as_str).collect();
        let mut names = HashSet::new();
        for cov in &self.covariates {
            if !names.insert(cov.name.as_str()) {
                return bad(format!("covariate `{}` is defined twice", cov.name));
            }
            let used: Vec<&String> = match &cov.transform {
                CovariateTransform::Raw { column } => vec![column],
                CovariateTransform::CenteredLogit {
                    numerator,
                    denominator,
                } => {
                    if numerator.is_empty() {
                        return bad(format!("covariate `{}` has an empty numerator", cov.name));
                    }
                    numerator
                        .iter()
                        .chain(denominator.iter().flatten())
                        .collect()
                }
            };
            if let Some(col) = used.iter().find(|c| second.contains(c.as_str())) {
                return bad(format!(
                    "covariate `{}` uses second-election column `{col}`; covariates must come \
                     from first-election or auxiliary data, since the model conditions on them \
                     when describing second-election votes",
                    cov.name
                ));
            }
        }
        if !(self.cluster_size > 0.0) || self.c_values.iter().any(|c| !(*c > 0.0)) {
            return bad("cluster sizes must be positive".into());
        }
        self.fit.validate()?;
        self.spec().map(|_| ())
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let find = |list: &[String], name: &str, what: &str| {
            list.iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::Config(format!("effect refers to unknown {what} `{name}`")))
        };
        let cov_names: Vec<String> = self.covariates.iter().map(|c| c.name.clone()).collect();
        let mut entries = Vec::with_capacity(self.effects.len());
        for e in &self.effects {
            let col = find(&self.columns, &e.column, "column option")?;
            if col + 1 == self.columns.len() {
                return Err(Error::Config(format!(
                    "effect on reference column `{}` is not estimable",
                    e.column
                )));
            }
            entries.push(CovariateEffect {
                row: find(&self.rows, &e.row, "row option")?,
                col,
                covariate: find(&cov_names, &e.covariate, "covariate")?,
            });
        }
        let design = CovariateDesign::new(
            entries,
            self.rows.len(),
            self.columns.len(),
            cov_names.len(),
        )?;
        let spec = ModelSpec::new(self.rows.len(), self.columns.len())
            .with_design(cov_names.len(), design)
            .with_cluster_size(self.cluster_size)
            .with_overdispersion(self.overdispersion);
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<StationRecord>,
    pub dims: Dimensions,
    pub spec: ModelSpec,
    /// Ids of stations whose two totals differ (kept only when allowed).
    pub unbalanced: Vec<String>,
    pub excluded: Vec<String>,
}

pub fn load_dataset(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    allow_unbalanced: bool,
) -> Result<Dataset> {
    read_dataset(File::open(path)?, config, allow_unbalanced)
}

struct RawRow {
    line: usize,
    id: String,
    n: Vec<u64>,
    y: Vec<u64>,
    covariates: Vec<f64>,
}

/// Parses a dataset. Row numbers in errors count data records from 1.
pub fn read_dataset<R: Read>(
    reader: R,
    config: &ModelConfig,
    allow_unbalanced: bool,
) -> Result<Dataset> {
    config.validate()?;
    let spec = config.spec()?;
    let allow_unbalanced = allow_unbalanced || config.allow_unbalanced;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let index = |name: &String| {
        header
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in dataset header")))
    };
    let id_idx = index(&config.id_column)?;
    let row_idx: Vec<usize> = config.rows.iter().map(index).collect::<Result<_>>()?;
    let col_idx: Vec<usize> = config.columns.iter().map(index).collect::<Result<_>>()?;
    enum Source {
        Raw(usize),
        Share(Vec<usize>, Option<Vec<usize>>),
    }
    let sources: Vec<Source> = config
        .covariates
        .iter()
        .map(|c| match &c.transform {
            CovariateTransform::Raw { column } => Ok(Source::Raw(index(column)?)),
            CovariateTransform::CenteredLogit {
                numerator,
                denominator,
            } => Ok(Source::Share(
                numerator.iter().map(index).collect::<Result<_>>()?,
                denominator
                    .as_ref()
                    .map(|d| d.iter().map(index).collect::<Result<_>>())
                    .transpose()?,
            )),
        })
        .collect::<Result<_>>()?;

    let excluded_ids: HashSet<&str> = config.exclude.iter().map(String::as_str).collect();
    let mut found_excluded = HashSet::new();
    let mut ids = HashSet::new();
    let mut rows = Vec::new();
    let mut unbalanced = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 1;
        let rec = rec.map_err(|e| Error::Data {
            row: line,
            message: e.to_string(),
        })?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let count = |i: usize, name: &str| -> Result<u64> {
            let text = field(i);
            text.parse::<u64>().map_err(|_| Error::Data {
                row: line,
                message: if text.parse::<i64>().is_ok_and(|v| v < 0) {
                    format!("negative count {text} in column `{name}`")
                } else {
                    format!("`{text}` in column `{name}` is not a non-negative integer")
                },
            })
        };
        let number = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Data {
                    row: line,
                    message: format!("`{}` is not a finite number", field(i)),
                })
        };
        let id = field(id_idx).to_string();
        if !ids.insert(id.clone()) {
            return Err(Error::Data {
                row: line,
                message: format!("duplicate station id `{id}`"),
            });
        }
        if excluded_ids.contains(id.as_str()) {
            found_excluded.insert(id);
            continue;
        }
        let n: Vec<u64> = row_idx
            .iter()
            .zip(&config.rows)
            .map(|(&i, name)| count(i, name))
            .collect::<Result<_>>()?;
        let y: Vec<u64> = col_idx
            .iter()
            .zip(&config.columns)
            .map(|(&i, name)| count(i, name))
            .collect::<Result<_>>()?;
        let (sn, sy) = (n.iter().sum::<u64>(), y.iter().sum::<u64>());
        if sn != sy {
            if !allow_unbalanced {
                return Err(Error::Data {
                    row: line,
                    message: format!(
                        "station `{id}`: first-election total {sn} differs from second-election \
                         total {sy} (use --allow-unbalanced to keep it)"
                    ),
                });
            }
            unbalanced.push(id.clone());
        }
        let mut covariates = Vec::with_capacity(sources.len());
        for (src, cfg) in sources.iter().zip(&config.covariates) {
            covariates.push(match src {
                Source::Raw(i) => number(*i)?,
                Source::Share(num, den) => {
                    let total = |cols: &[usize]| -> Result<f64> {
                        cols.iter().map(|&i| number(i)).sum::<Result<f64>>()
                    };
                    let top = total(num)?;
                    let bottom = match den {
                        Some(d) => total(d)?,
                        None => sn as f64,
                    };
                    if !(bottom > 0.0) {
                        return Err(Error::Data {
                            row: line,
                            message: format!("covariate `{}` has a zero denominator", cfg.name),
                        });
                    }
                    top / bottom
                }
            });
        }
        rows.push(RawRow {
            line,
            id,
            n,
            y,
            covariates,
        });
    }
    if let Some(missing) = config
        .exclude
        .iter()
        .find(|id| !found_excluded.contains(*id))
    {
        return Err(Error::Config(format!(
            "excluded station `{missing}` is not in the dataset"
        )));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("dataset has no stations".into()));
    }

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(sources.len());
    for (m, src) in sources.iter().enumerate() {
        let values: Vec<f64> = rows.iter().map(|r| r.covariates[m]).collect();
        columns.push(match src {
            Source::Raw(_) => values,
            Source::Share(..) => {
                if let Some(r) = rows
                    .iter()
                    .find(|r| !(0.0..=1.0).contains(&r.covariates[m]))
                {
                    return Err(Error::Data {
                        row: r.line,
                        message: format!(
                            "covariate `{}` share {} is outside [0, 1]",
                            config.covariates[m].name, r.covariates[m]
                        ),
                    });
                }
                build_covariate(&values)
            }
        });
    }
    let records: Vec<StationRecord> = rows
        .into_iter()
        .enumerate()
        .map(|(s, r)| {
            let v = columns.iter().map(|c| c[s]).collect();
            StationRecord::new(r.id, r.n, r.y, v)
        })
        .collect();
    let dims = Dimensions::new(spec.rows, spec.cols, records.len())?;
    let mut excluded: Vec<String> = found_excluded.into_iter().collect();
    excluded.sort();
    Ok(Dataset {
        records,
        dims,
        spec,
        unbalanced,
        excluded,
    })
}

/// Writes records with the given column names; covariates go out as raw
/// columns at full precision.
pub fn write_dataset<W: Write>(
    writer: W,
    records: &[StationRecord],
    id_column: &str,
    rows: &[String],
    columns: &[String],
    covariates: &[String],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![id_column.to_string()];
    header.extend(rows.iter().chain(columns).chain(covariates).cloned());
    w.write_record(&header)?;
    for rec in records {
        let mut line = vec![rec.id.clone()];
        line.extend(rec.n.iter().chain(&rec.y).map(u64::to_string));
        line.extend(rec.v.iter().map(f64::to_string));
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_fit_result(path: impl AsRef<Path>) -> Result<FitResult> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Number(f64),
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Number(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Text(x.to_string())
    }
}

/// A report table, rendered as aligned text (4 decimals) or CSV (full
/// precision).
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Self {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let render = |c: &Cell| match c {
            Cell::Text(s) => s.clone(),
            Cell::Number(x) if x.is_nan() => "NA".into(),
            Cell::Number(x) => format!("{x:.4}"),
        };
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(render).collect())
            .collect();
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|j| {
                body.iter()
                    .map(|r| r[j].chars().count())
                    .chain(std::iter::once(self.headers[j].chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    if j == 0 {
                        format!("{s:<w$}", w = widths[j])
                    } else {
                        format!("{s:>w$}", w = widths[j])
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&self.title);
            out.push('\n');
        }
        out.push_str(&line(&self.headers));
        out.push('\n');
        let total: usize = widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &body {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.headers)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|c| match c {
                Cell::Text(s) => s.clone(),
                Cell::Number(x) => x.to_string(),
            }))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn parameter_table(result: &FitResult) -> Table {
    let mut t = Table::new(
        "Parameter estimates",
        &["parameter", "estimate", "se", "score"],
    );
    for (a, label) in result.labels.iter().enumerate() {
        let se = result.se.as_ref().map_or(f64::NAN, |s| s[a]);
        t.push(vec![
            label.clone().into(),
            result.params.pack()[a].into(),
            se.into(),
            result.score[a].into(),
        ]);
    }
    t
}

/// Averaged transition probabilities with standard errors next to each
/// estimate.
pub fn transition_table(
    title: &str,
    mean: &DMatrix<f64>,
    se: Option<&DMatrix<f64>>,
    rows: &[String],
    columns: &[String],
) -> Table {
    let mut headers: Vec<String> = vec!["from \\ to".into()];
    for c in columns {
        headers.push(c.clone());
        if se.is_some() {
            headers.push(format!("{c} se"));
        }
    }
    let mut t = Table {
        title: title.into(),
        headers,
        rows: Vec::new(),
    };
    for (i, name) in rows.iter().enumerate() {
        let mut row: Vec<Cell> = vec![name.clone().into()];
        for j in 0..columns.len() {
            row.push(mean[(i, j)].into());
            if let Some(se) = se {
                row.push(se[(i, j)].into());
            }
        }
        t.push(row);
    }
    t
}

pub fn summary_table(summary: &TransitionSummary, rows: &[String], columns: &[String]) -> Table {
    transition_table(
        "Station-averaged transition probabilities",
        &summary.mean,
        Some(&summary.se),
        rows,
        columns,
    )
}

pub fn goodman_table(result: &GoodmanResult, rows: &[String], columns: &[String]) -> Table {
    transition_table(
        "Goodman regression estimates",
        &result.transitions,
        Some(&result.se),
        rows,
        columns,
    )
}

pub fn sensitivity_table(runs: &[SensitivityRun], rows: &[String], columns: &[String]) -> Table {
    let mut headers = vec!["C".to_string()];
    for r in rows {
        for c in columns {
            headers.push(format!("{r}->{c}"));
        }
    }
    headers.push("tau".into());
    let mut t = Table {
        title: "Averaged transition probabilities by cluster size".into(),
        headers,
        rows: Vec::new(),
    };
    for run in runs {
        let mut row: Vec<Cell> = vec![run.cluster_size.to_string().into()];
        for i in 0..rows.len() {
            for j in 0..columns.len() {
                row.push(run.transitions.mean[(i, j)].into());
            }
        }
        let tau = &run.fit.params.tau;
        row.push(if tau.len() == 1 {
            tau[0].into()
        } else {
            tau.iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
                .into()
        });
        t.push(row);
    }
    t
}

/// Bias and standard-error calibration, and tail exceedance.
pub fn mc_tables(report: &McReport) -> [Table; 3] {
    let mut bias = Table::new("Bias", &["parameter", "truth", "mean", "bias", "sd"]);
    let mut se = Table::new("Standard errors", &["parameter", "mean se", "sd", "se/sd"]);
    let mut headers = vec!["parameter".to_string()];
    headers.extend(report.thresholds.iter().map(|z| format!("z={z}")));
    let mut exc = Table {
        title: "Share of |estimate - truth| > z * se".into(),
        headers,
        rows: Vec::new(),
    };
    for (a, label) in report.labels.iter().enumerate() {
        bias.push(vec![
            label.clone().into(),
            report.truth[a].into(),
            report.mean_estimate[a].into(),
            report.bias[a].into(),
            report.sd[a].into(),
        ]);
        se.push(vec![
            label.clone().into(),
            report.mean_se[a].into(),
            report.sd[a].into(),
            report.se_ratio[a].into(),
        ]);
        let mut row: Vec<Cell> = vec![label.clone().into()];
        row.extend(report.exceedance[a].iter().map(|&x| Cell::from(x)));
        exc.push(row);
    }
    [bias, se, exc]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> ModelConfig {
        ModelConfig::from_toml_str(
            r#"
            rows = ["a", "b"]
            columns = ["yes", "no"]

            [[covariates]]
            name = "share_a"
            transform = "centered_logit"
            numerator = ["a"]

            [[effects]]
            row = "a"
            column = "yes"
            covariate = "share_a"
            "#,
        )
        .unwrap()
    }

    #[test]
    fn covariate_examples() {
        assert_eq!(build_covariate(&[0.3, 0.3, 0.3]), vec![0.0; 3]);
        let v = build_covariate(&[0.7, 0.3]);
        assert!((v[0] - 0.847_297_860_4).abs() < 1e-9);
        assert!((v[1] + 0.847_297_860_4).abs() < 1e-9);
        let v = build_covariate(&[0.0, 1.0, 0.5]);
        assert!(v.iter().all(|x| x.is_finite()));
        let lim = (SHARE_EPSILON / (1.0 - SHARE_EPSILON)).ln();
        assert!((v[0] - lim).abs() < 1e-12);
    }

    #[test]
    fn loads_and_builds_shares() {
        let csv = "station,a,b,yes,no\ns1,30,70,40,60\ns2,70,30,60,40\n";
        let ds = read_dataset(csv.as_bytes(), &toy_config(), false).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.records[0].n, vec![30, 70]);
        assert!((ds.records[0].v[0] + 0.847_297_860_4).abs() < 1e-9);
        assert_eq!(ds.dims.stations, 2);
    }

    #[test]
    fn errors_carry_row_numbers() {
        let cfg = toy_config();
        let csv = "station,a,b,yes,no\ns1,30,70,40,60\ns2,3,-1,1,1\n";
        match read_dataset(csv.as_bytes(), &cfg, false) {
            Err(Error::Data { row: 2, message }) => assert!(message.contains("negative")),
            other => panic!("{other:?}"),
        }
        let csv = "station,a,b,yes,no\ns1,30,70,40,61\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &cfg, false),
            Err(Error::Data { row: 1, .. })
        ));
        let ds = read_dataset(csv.as_bytes(), &cfg, true).unwrap();
        assert_eq!(ds.unbalanced, vec!["s1".to_string()]);
        let csv = "station,a,c,yes,no\ns1,1,1,1,1\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &cfg, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn exclusions_apply_by_id() {
        let mut cfg = toy_config();
        cfg.exclude = vec!["hospital".into()];
        let csv = "station,a,b,yes,no\ns1,30,70,40,60\nhospital,1,1,2,5\ns2,70,30,60,40\n";
        let ds = read_dataset(csv.as_bytes(), &cfg, false).unwrap();
        assert_eq!(ds.records.len(), 2);
        assert_eq!(ds.excluded, vec!["hospital".to_string()]);
        cfg.exclude = vec!["nowhere".into()];
        assert!(read_dataset(csv.as_bytes(), &cfg, true).is_err());
    }

    #[test]
    fn second_election_covariates_are_blocked() {
        let text = r#"
            rows = ["a", "b"]
            columns = ["yes", "no"]
            [[covariates]]
            name = "bad"
            transform = "centered_logit"
            numerator = ["yes"]
        "#;
        let err = ModelConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("second-election"));
    }

    #[test]
    fn reference_column_effect_rejected() {
        let mut cfg = toy_config();
        cfg.effects[0].column = "no".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn table_rendering() {
        let mut t = Table::new("T", &["name", "value"]);
        t.push(vec!["x".into(), 0.123_456_789.into()]);
        let text = t.to_text();
        assert!(text.contains("0.1235"));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("0.123456789"));
    }
}
