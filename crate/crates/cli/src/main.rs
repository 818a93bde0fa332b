use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use condiff::checks::{run_oracle_checks, write_checks_csv, OracleCheckConfig};
use condiff::data::{
    load_csv_path, one_hot, real_data_run, write_atomic, write_pools_csv, write_responses_csv, RealDataConfig,
    SchemaSpec,
};
use condiff::diffusion::{make_schedule, Spacing};
use condiff::experiments::{run_replications, SimulationSpec};
use condiff::inference::{
    confidence_interval, prediction_interval, sample_moments, write_intervals_csv, IntervalRecord,
};
use condiff::sampler::{generate_at_points, write_point_samples_csv};
use condiff::training::{train, TrainConfig, TrainedModel};
use condiff::{Error, Result};

#[derive(Parser)]
#[command(name = "condiff", version, about = "Conditional diffusion models for regression inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed field in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Replicated simulation study on one of the synthetic regression models.
    Simulate(Common),
    /// Fit a drift network to a CSV dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Draw conditional samples from a trained model.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Confidence and prediction intervals at given covariates.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train/test protocol with prediction-interval coverage on a CSV dataset.
    RealData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sampler, KL, loss-gap and Lipschitz checks against analytic references.
    OracleCheck(Common),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    schema: SchemaSpec,
    #[serde(default)]
    train_config: TrainConfig,
}

fn default_steps() -> usize {
    500
}

fn default_alpha() -> f64 {
    0.05
}

/// Covariates for `generate` and `infer`, in the model's raw (unstandardized) units.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleJob {
    x: Vec<Vec<f64>>,
    #[serde(rename = "M")]
    m: usize,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default)]
    spacing: Spacing,
    #[serde(default = "default_alpha")]
    alpha: f64,
    /// Known regression values at `x`, marking interval coverage when given.
    #[serde(default)]
    truth: Option<Vec<f64>>,
    #[serde(default)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(T::default()),
    }
}

fn parse_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn required_config<T: DeserializeOwned>(common: &Common) -> Result<T> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    parse_config(path)
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn finish(mut self, command: &str, seed: Option<u64>, config: &impl Serialize, inputs: Value) -> Result<()> {
        self.files.push("run_manifest.json".into());
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed_override": seed,
            "config": config,
            "inputs": inputs,
            "outputs": self.files,
        });
        let text = serde_json::to_string_pretty(&manifest)?;
        write_atomic(&self.dir.join("run_manifest.json"), text.as_bytes())
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(common) => simulate(&common),
        Command::Train { common, data } => train_cmd(&common, &data),
        Command::Generate { common, model } => generate_cmd(&common, &model),
        Command::Infer { common, model } => infer_cmd(&common, &model),
        Command::RealData { common, data } => real_data_cmd(&common, &data),
        Command::OracleCheck(common) => oracle_cmd(&common),
    }
}

fn simulate(common: &Common) -> Result<()> {
    let mut spec: SimulationSpec = required_config(common)?;
    if let Some(s) = common.seed {
        spec.master_seed = s;
    }
    spec.validate()?;
    let report = run_replications(&spec)?;
    let mut out = Output::new(&common.out_dir)?;
    out.write_with("report.csv", |w| report.write_csv(w))?;
    out.write("report.json", report.to_json()?.as_bytes())?;
    eprintln!(
        "{} replications ({} aborted) in {:.1}s",
        report.m_tilde, report.aborted, report.wall_time_secs
    );
    out.finish("simulate", common.seed, &spec, json!({}))
}

fn train_cmd(common: &Common, data: &Path) -> Result<()> {
    let mut job: TrainJob = required_config(common)?;
    if let Some(s) = common.seed {
        job.train_config.seed = s;
    }
    let table = load_csv_path(data, &job.schema)?;
    let (dataset, mapping) = one_hot(&table, None)?;
    let model = train(&dataset, &job.train_config)?;
    let mut out = Output::new(&common.out_dir)?;
    out.write("model.json", model.to_json()?.as_bytes())?;
    out.write_with("loss_trace.csv", |w| model.write_loss_trace(w))?;
    out.write("one_hot_mapping.json", serde_json::to_string_pretty(&mapping)?.as_bytes())?;
    out.finish("train", common.seed, &job, json!({ "data": data }))
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = fs::read_to_string(path)?;
    TrainedModel::from_json(&text)
}

fn sample_job(common: &Common) -> Result<SampleJob> {
    let mut job: SampleJob = required_config(common)?;
    if let Some(s) = common.seed {
        job.seed = s;
    }
    if job.x.is_empty() {
        return Err(Error::Config("x must list at least one covariate vector".into()));
    }
    if let Some(t) = &job.truth {
        if t.len() != job.x.len() {
            return Err(Error::Config("truth must have one value per covariate vector".into()));
        }
    }
    Ok(job)
}

fn draw_pools(model: &TrainedModel, job: &SampleJob) -> Result<Vec<Array2<f64>>> {
    let schedule = make_schedule(model.t0, model.t_end, job.steps, job.spacing)?;
    generate_at_points(model, &job.x, &schedule, job.m, job.seed)
}

fn generate_cmd(common: &Common, model_path: &Path) -> Result<()> {
    let job = sample_job(common)?;
    let model = load_model(model_path)?;
    let pools = draw_pools(&model, &job)?;
    let mut out = Output::new(&common.out_dir)?;
    let names: Vec<String> = (1..=model.net.dim_y()).map(|k| format!("y{k}")).collect();
    out.write_with("samples.csv", |w| write_point_samples_csv(w, &pools, &names))?;
    out.finish("generate", common.seed, &job, json!({ "model": model_path }))
}

fn infer_cmd(common: &Common, model_path: &Path) -> Result<()> {
    let job = sample_job(common)?;
    let model = load_model(model_path)?;
    let pools = draw_pools(&model, &job)?;
    let mut records = Vec::new();
    for (i, pool) in pools.iter().enumerate() {
        let moments = sample_moments(pool.view())?;
        for coord in 0..moments.dim() {
            let ci = confidence_interval(&moments, job.alpha, coord)?;
            let covered = job.truth.as_ref().map(|t| ci.contains(t[i]));
            records.push(IntervalRecord {
                point_id: i,
                interval: ci,
                covered,
            });
            records.push(IntervalRecord {
                point_id: i,
                interval: prediction_interval(&moments, job.alpha, coord)?,
                covered: None,
            });
        }
    }
    let mut out = Output::new(&common.out_dir)?;
    out.write_with("intervals.csv", |w| write_intervals_csv(w, &records))?;
    out.finish("infer", common.seed, &job, json!({ "model": model_path }))
}

fn real_data_cmd(common: &Common, data: &Path) -> Result<()> {
    let mut config: RealDataConfig = required_config(common)?;
    if let Some(s) = common.seed {
        config.seed = s;
        config.split.seed = s;
        config.train_config.seed = s;
    }
    let table = load_csv_path(data, &config.schema)?;
    let outcome = real_data_run(&table, &config)?;
    let mut out = Output::new(&common.out_dir)?;
    out.write_with("intervals.csv", |w| write_intervals_csv(w, &outcome.intervals))?;
    out.write_with("coverage.csv", |w| {
        w.extend_from_slice(
            format!("test_rows,coverage,alpha,M\n{},{},{},{}\n", outcome.actual.len(), outcome.coverage, config.alpha, config.m)
                .as_bytes(),
        );
        Ok(())
    })?;
    out.write_with("sample_pools.csv", |w| write_pools_csv(w, &outcome.pools))?;
    out.write_with("test_responses.csv", |w| write_responses_csv(w, &outcome.actual))?;
    out.write("model.json", outcome.model.to_json()?.as_bytes())?;
    out.write_with("loss_trace.csv", |w| outcome.model.write_loss_trace(w))?;
    out.write("one_hot_mapping.json", serde_json::to_string_pretty(&outcome.mapping)?.as_bytes())?;
    eprintln!("prediction-interval coverage on {} test rows: {:.4}", outcome.actual.len(), outcome.coverage);
    out.finish("real-data", common.seed, &config, json!({ "data": data }))
}

fn oracle_cmd(common: &Common) -> Result<()> {
    let config: OracleCheckConfig = read_config(&common.config)?;
    let seed = common.seed.unwrap_or(0);
    let rows = run_oracle_checks(&config, seed)?;
    let mut out = Output::new(&common.out_dir)?;
    out.write_with("oracle_checks.csv", |w| write_checks_csv(w, &rows))?;
    for r in &rows {
        eprintln!("{} {} value={} bound={}", if r.pass { "PASS" } else { "FAIL" }, r.check, r.value, r.bound);
    }
    out.finish("oracle-check", common.seed, &config, json!({}))
}
