//! Command-line front end: argument parsing and the six subcommands.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use votetrans::estimation::max_transition_drift;
use votetrans::io::{
    goodman_table, load_dataset, mc_tables, parameter_table, read_fit_result, sensitivity_table,
    summary_table, write_dataset, write_json, Cell, Dataset, ModelConfig, Table,
};
use votetrans::simulation::{generate_dataset, scatter, Confounding};
use votetrans::{
    average_transition_matrix, fit, goodman_fit, reconstruct_cells, run_mc_study, sensitivity,
    FitResult, ScenarioConfig, ScoreMode,
};

#[derive(Debug, Parser)]
#[command(
    name = "votetrans",
    version,
    about = "Estimate vote transitions between two elections from polling-station counts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model and report parameters and averaged transitions.
    Fit(DataArgs),
    /// Generate a synthetic dataset with its configuration and truth.
    Simulate(SimArgs),
    /// Repeat simulate-and-fit and summarize bias and coverage.
    McStudy(McArgs),
    /// Goodman least-squares regression.
    Goodman(DataArgs),
    /// Fit (or load a fit) and reconstruct expected cells per station.
    Reconstruct(ReconstructArgs),
    /// Refit over several cluster sizes.
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Model configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Station counts (CSV).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for CSV, JSON and text outputs.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Keep stations whose first- and second-election totals differ.
    #[arg(long)]
    pub allow_unbalanced: bool,
    /// Comma-separated station ids to drop.
    #[arg(long, value_delimiter = ',')]
    pub exclude_stations: Vec<String>,
    /// Use the mean-channel (quasi-likelihood) score for α and β.
    #[arg(long)]
    pub quasi: bool,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    TwoPartyNone,
    TwoPartyConcordant,
    TwoPartyDiscordant,
    MilanLike,
}

impl Preset {
    pub fn scenario(self, seed: u64) -> ScenarioConfig {
        let two = |c| ScenarioConfig::two_party(c, [600, 800], seed);
        match self {
            Preset::TwoPartyNone => two(Confounding::None),
            Preset::TwoPartyConcordant => two(Confounding::Concordant),
            Preset::TwoPartyDiscordant => two(Confounding::Discordant),
            Preset::MilanLike => ScenarioConfig::milan_like(seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Configuration with a [scenario] table.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in scenario.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub quasi: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// A fit.json written by `fit`; refits when absent.
    #[arg(long)]
    pub fit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated cluster sizes; overrides the configuration.
    #[arg(long, value_delimiter = ',')]
    pub c_values: Vec<f64>,
}

/// Collects tables, prints them and mirrors them into the output directory.
struct Report<'a> {
    out_dir: Option<&'a Path>,
    text: String,
    stdout: &'a mut dyn Write,
}

impl<'a> Report<'a> {
    fn new(out_dir: Option<&'a Path>, stdout: &'a mut dyn Write) -> Result<Self> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(Self {
            out_dir,
            text: String::new(),
            stdout,
        })
    }

    fn line(&mut self, line: &str) -> Result<()> {
        self.text.push_str(line);
        self.text.push('\n');
        writeln!(self.stdout, "{line}")?;
        Ok(())
    }

    fn table(&mut self, table: &Table, csv_name: &str) -> Result<()> {
        let text = table.to_text();
        self.text.push_str(&text);
        self.text.push('\n');
        writeln!(self.stdout, "{text}")?;
        if let Some(dir) = self.out_dir {
            table.write_csv(File::create(dir.join(csv_name))?)?;
        }
        Ok(())
    }

    fn json<T: serde::Serialize>(&self, name: &str, value: &T) -> Result<()> {
        if let Some(dir) = self.out_dir {
            write_json(dir.join(name), value)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(dir) = self.out_dir {
            fs::write(dir.join("report.txt"), &self.text)?;
        }
        Ok(())
    }
}

fn load(args: &DataArgs) -> Result<(ModelConfig, Dataset)> {
    let mut config = ModelConfig::load(&args.config)
        .with_context(|| format!("reading configuration {}", args.config.display()))?;
    config.exclude.extend(args.exclude_stations.iter().cloned());
    if args.quasi {
        config.fit.score_mode = ScoreMode::MeanOnly;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let data = load_dataset(&args.data, &config, args.allow_unbalanced)
        .with_context(|| format!("reading data {}", args.data.display()))?;
    Ok((config, data))
}

fn dataset_notes(report: &mut Report, data: &Dataset) -> Result<()> {
    report.line(&format!(
        "{} stations, {} x {} table",
        data.records.len(),
        data.dims.rows,
        data.dims.cols
    ))?;
    if !data.excluded.is_empty() {
        report.line(&format!("excluded: {}", data.excluded.join(", ")))?;
    }
    if !data.unbalanced.is_empty() {
        report.line(&format!(
            "unbalanced stations kept: {}",
            data.unbalanced.join(", ")
        ))?;
    }
    Ok(())
}

fn fit_notes(report: &mut Report, result: &FitResult) -> Result<()> {
    report.line(&format!(
        "log-likelihood {:.4}, {} iterations, converged: {}, max |score| {:.2e}",
        result.loglik,
        result.iterations,
        result.converged,
        result.max_abs_score()
    ))?;
    if result.clamp_count > 0 {
        report.line(&format!(
            "{} probabilities hit the numerical floor",
            result.clamp_count
        ))?;
    }
    let boundary: Vec<&str> = result
        .labels
        .iter()
        .zip(&result.at_boundary)
        .filter(|(_, b)| **b)
        .map(|(l, _)| l.as_str())
        .collect();
    if !boundary.is_empty() {
        report.line(&format!(
            "at the parameter bound, se unreliable: {}",
            boundary.join(", ")
        ))?;
    }
    if result.se.is_none() {
        report.line("information matrix is not positive definite; no standard errors")?;
    }
    Ok(())
}

fn cmd_fit(args: &DataArgs, stdout: &mut dyn Write) -> Result<()> {
    let (config, data) = load(args)?;
    let mut report = Report::new(args.out_dir.as_deref(), stdout)?;
    dataset_notes(&mut report, &data)?;
    let result = fit(&data.records, &data.spec, &config.fit, None)?;
    fit_notes(&mut report, &result)?;
    let summary = average_transition_matrix(&result, &data.spec, &data.records)?;
    report.table(&parameter_table(&result), "parameters.csv")?;
    report.table(
        &summary_table(&summary, &config.rows, &config.columns),
        "transitions.csv",
    )?;
    report.json("fit.json", &result)?;
    report.json("transitions.json", &summary)?;
    report.finish()
}

fn cmd_goodman(args: &DataArgs, stdout: &mut dyn Write) -> Result<()> {
    let (config, data) = load(args)?;
    let mut report = Report::new(args.out_dir.as_deref(), stdout)?;
    dataset_notes(&mut report, &data)?;
    let g = goodman_fit(&data.records, data.dims.rows, data.dims.cols)?;
    report.table(
        &goodman_table(&g, &config.rows, &config.columns),
        "goodman.csv",
    )?;
    let outside: usize = g.out_of_range.iter().flatten().filter(|b| **b).count();
    if outside > 0 {
        report.line(&format!(
            "{outside} estimates fall outside [0, 1]; no truncation applied"
        ))?;
    }
    report.json("goodman.json", &g)?;
    report.finish()
}

fn cmd_reconstruct(args: &ReconstructArgs, stdout: &mut dyn Write) -> Result<()> {
    let (config, data) = load(&args.data)?;
    let mut report = Report::new(args.data.out_dir.as_deref(), stdout)?;
    dataset_notes(&mut report, &data)?;
    let result = match &args.fit {
        Some(path) => {
            let r =
                read_fit_result(path).with_context(|| format!("reading fit {}", path.display()))?;
            if r.spec != data.spec {
                bail!("fit in {} was made with a different model", path.display());
            }
            r
        }
        None => fit(&data.records, &data.spec, &config.fit, None)?,
    };
    fit_notes(&mut report, &result)?;
    let cells = reconstruct_cells(&result, &data.spec, &data.records, config.ipf)?;
    let (r, c) = (data.dims.rows, data.dims.cols);
    let mut headers = vec![config.id_column.clone()];
    for row in &config.rows {
        for col in &config.columns {
            headers.push(format!("{row}->{col}"));
        }
    }
    let mut per_station = Table {
        title: "Expected cells per station".into(),
        headers,
        rows: Vec::new(),
    };
    let mut totals = votetrans::nalgebra::DMatrix::<f64>::zeros(r, c);
    for (rec, m) in data.records.iter().zip(&cells) {
        totals += m;
        let mut row: Vec<Cell> = vec![rec.id.clone().into()];
        for i in 0..r {
            row.extend((0..c).map(|j| Cell::from(m[(i, j)])));
        }
        per_station.push(row);
    }
    let mut header: Vec<&str> = vec!["from"];
    header.extend(config.columns.iter().map(String::as_str));
    let mut total_table = Table::new("Reconstructed totals", &header);
    for i in 0..r {
        let mut row: Vec<Cell> = vec![config.rows[i].clone().into()];
        row.extend((0..c).map(|j| Cell::from(totals[(i, j)])));
        total_table.push(row);
    }
    report.table(&total_table, "totals.csv")?;
    if let Some(dir) = args.data.out_dir.as_deref() {
        per_station.write_csv(File::create(dir.join("cells.csv"))?)?;
    }
    report.finish()
}

fn cmd_sensitivity(args: &SensitivityArgs, stdout: &mut dyn Write) -> Result<()> {
    let (mut config, data) = load(&args.data)?;
    if !args.c_values.is_empty() {
        config.c_values = args.c_values.clone();
        config.validate()?;
    }
    let mut report = Report::new(args.data.out_dir.as_deref(), stdout)?;
    dataset_notes(&mut report, &data)?;
    let runs = sensitivity(&data.records, &data.spec, &config.c_values, &config.fit)?;
    report.table(
        &sensitivity_table(&runs, &config.rows, &config.columns),
        "sensitivity.csv",
    )?;
    report.line(&format!(
        "largest change in any averaged transition probability: {:.6}",
        max_transition_drift(&runs)
    ))?;
    if let Some(run) = runs.iter().find(|r| !r.fit.converged) {
        report.line(&format!(
            "warning: fit at C = {} did not converge",
            run.cluster_size
        ))?;
    }
    report.json("sensitivity.json", &runs)?;
    report.finish()
}

fn scenario_config(args: &ScenarioArgs) -> Result<ModelConfig> {
    let mut config = match (&args.config, args.preset) {
        (Some(path), _) => {
            let cfg = ModelConfig::load(path)
                .with_context(|| format!("reading configuration {}", path.display()))?;
            if cfg.scenario.is_none() {
                bail!("{} has no [scenario] table", path.display());
            }
            cfg
        }
        (None, Some(preset)) => ModelConfig::for_scenario(&preset.scenario(args.seed.unwrap_or(0))),
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
        if let Some(s) = config.scenario.as_mut() {
            s.seed = seed;
        }
    }
    config
        .scenario
        .as_ref()
        .expect("checked above")
        .validate()?;
    Ok(config)
}

fn cmd_simulate(args: &SimArgs, stdout: &mut dyn Write) -> Result<()> {
    let config = scenario_config(&args.scenario)?;
    let scenario = config.scenario.clone().expect("scenario present");
    let sim = generate_dataset(&scenario)?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let covs: Vec<String> = config.covariates.iter().map(|c| c.name.clone()).collect();
    write_dataset(
        File::create(dir.join("data.csv"))?,
        &sim.records,
        &config.id_column,
        &config.rows,
        &config.columns,
        &covs,
    )?;
    fs::write(dir.join("config.toml"), config.to_toml_string()?)?;

    let spec = scenario.model_spec()?;
    let truth = scenario.true_params()?;
    let labels = spec.parameter_labels();
    let values = truth.pack();
    let truth_json: Vec<serde_json::Value> = labels
        .iter()
        .zip(&values)
        .map(|(l, v)| serde_json::json!({ "parameter": l, "value": v }))
        .collect();
    write_json(dir.join("truth.json"), &truth_json)?;

    let mut latent = csv_writer(&dir.join("latent.csv"))?;
    writeln!(latent, "{},from,to,count", config.id_column)?;
    for (rec, m) in sim.records.iter().zip(&sim.latent) {
        for (i, row) in config.rows.iter().enumerate() {
            for (j, col) in config.columns.iter().enumerate() {
                writeln!(latent, "{},{row},{col},{}", rec.id, m[(i, j)])?;
            }
        }
    }
    let mut sc = csv_writer(&dir.join("scatter.csv"))?;
    writeln!(sc, "{},first_share,second_share", config.id_column)?;
    for (rec, p) in sim.records.iter().zip(scatter(&sim.records)) {
        writeln!(sc, "{},{},{}", rec.id, p.x, p.y)?;
    }
    writeln!(
        stdout,
        "wrote {} stations ({} x {}) to {}",
        sim.records.len(),
        config.rows.len(),
        config.columns.len(),
        dir.display()
    )?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<File>> {
    Ok(std::io::BufWriter::new(File::create(path)?))
}

fn cmd_mc_study(args: &McArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut config = scenario_config(&args.scenario)?;
    if args.quasi {
        config.fit.score_mode = ScoreMode::MeanOnly;
    }
    let scenario = config.scenario.clone().expect("scenario present");
    let study = run_mc_study(&scenario, args.replicates, &config.fit)?;
    let mut report = Report::new(args.out_dir.as_deref(), stdout)?;
    report.line(&format!(
        "{} replicates, {} converged, {} failed",
        study.replicates, study.successes, study.failures
    ))?;
    let [bias, se, exceed] = mc_tables(&study);
    report.table(&bias, "mc_bias.csv")?;
    report.table(&se, "mc_se.csv")?;
    report.table(&exceed, "mc_exceedance.csv")?;
    report.json("mc_report.json", &study)?;
    report.finish()
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, stdout),
        Command::Simulate(a) => cmd_simulate(a, stdout),
        Command::McStudy(a) => cmd_mc_study(a, stdout),
        Command::Goodman(a) => cmd_goodman(a, stdout),
        Command::Reconstruct(a) => cmd_reconstruct(a, stdout),
        Command::Sensitivity(a) => cmd_sensitivity(a, stdout),
    }
}
