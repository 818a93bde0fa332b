//! Simulation harness: the three regression models, the replication loop and
//! CP / MSE / Variance / Bias² reports at fixed or random test points.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffusion::{make_schedule, DiffusionSchedule, Spacing};
use crate::drift::DriftModel;
use crate::error::{Error, Result};
use crate::inference::{coverage_probability, mse_bias_variance, sample_moments, studentized_stat};
use crate::nn::standard_normal;
use crate::oracle::{gaussian_drift, GaussianParams};
use crate::sampler::generate_with;
use crate::training::{train, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    I,
    II,
    III,
}

impl ModelId {
    pub fn dim_x(self) -> usize {
        match self {
            ModelId::I | ModelId::II => 3,
            ModelId::III => 5,
        }
    }

    /// Conditional variance of `Y` given `x`.
    pub fn noise_variance(self, x: &[f64]) -> Result<f64> {
        check_dim(self, x)?;
        Ok(match self {
            ModelId::I => 1.0,
            ModelId::II => 1.0 / 12.0,
            ModelId::III => {
                let s = (1.0 + x[1] * x[1] + x[4] * x[4]) / 8.0;
                s * s
            }
        })
    }

    pub fn draw_covariate<R: Rng + ?Sized>(self, rng: &mut R) -> Vec<f64> {
        match self {
            ModelId::I | ModelId::II => (0..3).map(|_| rng.random::<f64>()).collect(),
            ModelId::III => (0..5).map(|_| standard_normal(rng)).collect(),
        }
    }

    /// One draw of `Y | X = x`.
    pub fn draw_response<R: Rng + ?Sized>(self, x: &[f64], rng: &mut R) -> Result<f64> {
        let f = true_regression(self, x)?;
        Ok(match self {
            ModelId::I => f + standard_normal(rng),
            ModelId::II => f + rng.random::<f64>() - 0.5,
            ModelId::III => f + (1.0 + x[1] * x[1] + x[4] * x[4]) / 8.0 * standard_normal(rng),
        })
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::I => "I",
            ModelId::II => "II",
            ModelId::III => "III",
        })
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(ModelId::I),
            "II" | "2" => Ok(ModelId::II),
            "III" | "3" => Ok(ModelId::III),
            other => Err(Error::Config(format!("unknown model id {other:?}"))),
        }
    }
}

fn check_dim(model: ModelId, x: &[f64]) -> Result<()> {
    if x.len() != model.dim_x() {
        return Err(Error::Shape(format!(
            "model {model} takes {} covariates, got {}",
            model.dim_x(),
            x.len()
        )));
    }
    Ok(())
}

/// The regression function `f0(x) = E[Y | X = x]`.
pub fn true_regression(model: ModelId, x: &[f64]) -> Result<f64> {
    check_dim(model, x)?;
    Ok(match model {
        ModelId::I => (x[0] - 1.0).powi(2) + (x[1] + 1.0).powi(3) - 3.0 * x[2],
        ModelId::II => {
            (x[0] - 2.0 + x[1] * x[1]).powi(2) + (3.0 - x[1]).powi(2) + (x[2] + 1.0).sqrt() * (x[2] - 1.0).powi(2)
        }
        ModelId::III => x[0] * x[0] + 0.5 * (x[1] + x[2] / 3.0).exp() + x[3] - x[4],
    })
}

/// `n` i.i.d. draws of `(X, Y)` from `model`.
pub fn gen_dataset<R: Rng + ?Sized>(model: ModelId, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("dataset size must be at least 1".into()));
    }
    let d = model.dim_x();
    let mut x = Array2::zeros((n, d));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let xi = model.draw_covariate(rng);
        y[[i, 0]] = model.draw_response(&xi, rng)?;
        for (k, v) in xi.into_iter().enumerate() {
            x[[i, k]] = v;
        }
    }
    Dataset::new(x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestPoints {
    Fixed(Vec<Vec<f64>>),
    /// One point per replication, drawn from that replication's held-out split.
    Random,
}

/// Where the drift used for sampling comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftMode {
    /// Train a fresh network in every replication.
    #[default]
    Trained,
    /// Train once on a master dataset; replications repeat only sampling and inference.
    Shared,
    /// Analytic drift of the Gaussian law `N(f0(x), Var(Y | x))`; no training.
    Oracle,
}

/// Sampler grid settings; `T0` and `T` come from the training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub spacing: Spacing,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 500,
            spacing: Spacing::Uniform,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self, train: &TrainConfig) -> Result<DiffusionSchedule> {
        make_schedule(train.t0, train.t_end, self.steps, self.spacing)
    }
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_redraw() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub model: ModelId,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "M_tilde")]
    pub m_tilde: usize,
    pub alpha: f64,
    pub test_points: TestPoints,
    pub master_seed: u64,
    #[serde(default)]
    pub train_config: TrainConfig,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub drift: DriftMode,
    /// Share of each dataset held out as the test split (training uses the rest).
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Draw a fresh dataset per replication; `false` reuses the master dataset.
    #[serde(default = "default_redraw")]
    pub redraw: bool,
}

/// Replications may abort on numerical failure; more than this share fails the run.
pub const MAX_ABORT_FRACTION: f64 = 0.01;

impl SimulationSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SimulationSpec = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("n must be at least 10, got {}", self.n)));
        }
        if self.m < 2 {
            return Err(Error::Config(format!("M must be at least 2, got {}", self.m)));
        }
        if self.m_tilde == 0 {
            return Err(Error::Config("M_tilde must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
        }
        match &self.test_points {
            TestPoints::Fixed(points) => {
                if points.is_empty() {
                    return Err(Error::Config("fixed test point list is empty".into()));
                }
                for p in points {
                    if p.len() != self.model.dim_x() {
                        return Err(Error::Config(format!(
                            "test point {p:?} does not have the {} coordinates of model {}",
                            self.model.dim_x(),
                            self.model
                        )));
                    }
                }
            }
            TestPoints::Random => {
                if self.held_out() == 0 {
                    return Err(Error::Config("random test points need a non-empty test split".into()));
                }
            }
        }
        self.train_config.validate()?;
        self.schedule.build(&self.train_config)?;
        Ok(())
    }

    fn held_out(&self) -> usize {
        (self.test_fraction * self.n as f64).floor() as usize
    }
}

/// RNG for replication `j` (`j >= 1`); stream 0 belongs to the master dataset.
pub fn replication_rng(master_seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(j as u64);
    rng
}

/// A dataset shuffled and cut into (train, test) with `floor(test_fraction n)` test rows.
fn split_train_test<R: Rng + ?Sized>(data: &Dataset, test_fraction: f64, rng: &mut R) -> (Dataset, Dataset) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let n_test = (test_fraction * data.len() as f64).floor() as usize;
    let (test, train) = order.split_at(n_test);
    (data.select(train), data.select(test))
}

/// Per test point: sample mean and studentized statistic of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointOutcome {
    pub x: Vec<f64>,
    pub truth: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub index: usize,
    pub points: Vec<PointOutcome>,
}

struct GaussianOracle {
    target: GaussianParams,
    dim_x: usize,
}

impl DriftModel for GaussianOracle {
    fn dim_y(&self) -> usize {
        1
    }

    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn drift_rows(&self, inputs: ndarray::ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((inputs.nrows(), 1));
        for (row, mut dst) in inputs.rows().into_iter().zip(out.rows_mut()) {
            dst[0] = gaussian_drift(&self.target, row[0], &[row[1]])?[0];
        }
        Ok(out)
    }
}

/// Shared state computed once per run: the master dataset and, in shared mode, its model.
pub struct RunContext {
    spec: SimulationSpec,
    schedule: DiffusionSchedule,
    master: Option<(Dataset, Dataset)>,
    shared_model: Option<TrainedModel>,
}

impl RunContext {
    pub fn new(spec: &SimulationSpec) -> Result<Self> {
        spec.validate()?;
        let schedule = spec.schedule.build(&spec.train_config)?;
        let needs_master = !spec.redraw || spec.drift == DriftMode::Shared;
        let master = if needs_master {
            let mut rng = replication_rng(spec.master_seed, 0);
            let data = gen_dataset(spec.model, spec.n, &mut rng)?;
            Some(split_train_test(&data, spec.test_fraction, &mut rng))
        } else {
            None
        };
        let shared_model = match (spec.drift, &master) {
            (DriftMode::Shared, Some((train_set, _))) => {
                let mut config = spec.train_config.clone();
                config.seed = replication_rng(spec.master_seed, 0).random();
                Some(train(train_set, &config)?)
            }
            _ => None,
        };
        Ok(RunContext {
            spec: spec.clone(),
            schedule,
            master,
            shared_model,
        })
    }

    /// Replication `j` (1-based); a pure function of the spec and `j`.
    pub fn replicate(&self, j: usize) -> Result<ReplicationOutcome> {
        let spec = &self.spec;
        let mut rng = replication_rng(spec.master_seed, j);
        let fresh;
        let (train_set, test_set) = match &self.master {
            Some((a, b)) if !spec.redraw => (a, b),
            _ => {
                let data = gen_dataset(spec.model, spec.n, &mut rng)?;
                fresh = split_train_test(&data, spec.test_fraction, &mut rng);
                (&fresh.0, &fresh.1)
            }
        };
        let points: Vec<Vec<f64>> = match &spec.test_points {
            TestPoints::Fixed(points) => points.clone(),
            TestPoints::Random => {
                let i = rng.random_range(0..test_set.len());
                vec![test_set.x_row(i).to_vec()]
            }
        };
        let train_seed: u64 = rng.random();
        let trained;
        let model: Option<&TrainedModel> = match spec.drift {
            DriftMode::Trained => {
                let mut config = spec.train_config.clone();
                config.seed = train_seed;
                trained = train(train_set, &config)?;
                Some(&trained)
            }
            DriftMode::Shared => self.shared_model.as_ref(),
            DriftMode::Oracle => None,
        };

        let mut outcomes = Vec::with_capacity(points.len());
        for x in points {
            let truth = true_regression(spec.model, &x)?;
            let base: u64 = rng.random();
            let samples = match model {
                Some(m) => generate_with(m, &x, &self.schedule, spec.m, base, Default::default())?,
                None => {
                    let oracle = GaussianOracle {
                        target: GaussianParams::univariate(truth, spec.model.noise_variance(&x)?)?,
                        dim_x: x.len(),
                    };
                    generate_with(&oracle, &x, &self.schedule, spec.m, base, Default::default())?
                }
            };
            let moments = sample_moments(samples.view())?;
            let stat = studentized_stat(&moments, &[truth])?[0];
            outcomes.push(PointOutcome {
                x,
                truth,
                mean: moments.mean[0],
                std_dev: moments.std_dev(0),
                stat,
            });
        }
        Ok(ReplicationOutcome { index: j, points: outcomes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `None` for the random-test-point row.
    pub x: Option<Vec<f64>>,
    #[serde(rename = "CP")]
    pub cp: f64,
    #[serde(rename = "MSE")]
    pub mse: f64,
    #[serde(rename = "Variance")]
    pub variance: f64,
    #[serde(rename = "Bias2")]
    pub bias2: f64,
    /// Mean generated-sample standard deviation across replications.
    pub mean_std_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub model: ModelId,
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    /// Replications that completed and enter the metrics.
    #[serde(rename = "M_tilde")]
    pub m_tilde: usize,
    pub requested_replications: usize,
    pub aborted: usize,
    pub alpha: f64,
    pub master_seed: u64,
    pub drift: DriftMode,
    pub redraw: bool,
    pub wall_time_secs: f64,
    pub rows: Vec<ReportRow>,
}

/// Runs replications `1..=M_tilde` in parallel and aggregates them in index order.
pub fn run_replications(spec: &SimulationSpec) -> Result<SimulationReport> {
    let started = Instant::now();
    let context = RunContext::new(spec)?;
    let results: Vec<Result<ReplicationOutcome>> =
        (1..=spec.m_tilde).into_par_iter().map(|j| context.replicate(j)).collect();
    let mut done = Vec::with_capacity(results.len());
    let mut first_error = None;
    for result in results {
        match result {
            Ok(outcome) => done.push(outcome),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let aborted = spec.m_tilde - done.len();
    if aborted as f64 > MAX_ABORT_FRACTION * spec.m_tilde as f64 || done.is_empty() {
        let cause = first_error.map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::Numerical(format!(
            "{aborted} of {} replications aborted (first failure: {cause})",
            spec.m_tilde
        )));
    }
    let rows = aggregate(spec, &done)?;
    Ok(SimulationReport {
        model: spec.model,
        n: spec.n,
        m: spec.m,
        m_tilde: done.len(),
        requested_replications: spec.m_tilde,
        aborted,
        alpha: spec.alpha,
        master_seed: spec.master_seed,
        drift: spec.drift,
        redraw: spec.redraw,
        wall_time_secs: started.elapsed().as_secs_f64(),
        rows,
    })
}

/// Fixed points: metrics of the sample means around `f0(x)`. Random points:
/// the same formulas applied to the errors `mean_j - f0(x_j)` around zero.
pub fn aggregate(spec: &SimulationSpec, outcomes: &[ReplicationOutcome]) -> Result<Vec<ReportRow>> {
    let per_point = match &spec.test_points {
        TestPoints::Fixed(points) => points.len(),
        TestPoints::Random => 1,
    };
    let mut rows = Vec::with_capacity(per_point);
    for k in 0..per_point {
        let pts: Vec<&PointOutcome> = outcomes.iter().map(|o| &o.points[k]).collect();
        let stats: Vec<f64> = pts.iter().map(|p| p.stat).collect();
        let cp = coverage_probability(&stats, spec.alpha)?;
        let (decomp, x) = match &spec.test_points {
            TestPoints::Fixed(points) => {
                let means: Vec<f64> = pts.iter().map(|p| p.mean).collect();
                (mse_bias_variance(&means, pts[0].truth)?, Some(points[k].clone()))
            }
            TestPoints::Random => {
                let errors: Vec<f64> = pts.iter().map(|p| p.mean - p.truth).collect();
                (mse_bias_variance(&errors, 0.0)?, None)
            }
        };
        let mean_std_dev = pts.iter().map(|p| p.std_dev).sum::<f64>() / pts.len() as f64;
        rows.push(ReportRow {
            x,
            cp,
            mse: decomp.mse,
            variance: decomp.variance,
            bias2: decomp.bias2,
            mean_std_dev,
        });
    }
    Ok(rows)
}

pub const REPORT_COLUMNS: [&str; 11] = ["model", "x", "CP", "MSE", "Variance", "Bias2", "M", "M_tilde", "alpha", "n", "seed"];

fn format_point(x: &Option<Vec<f64>>) -> String {
    match x {
        Some(v) => format!("({})", v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")),
        None => "random".to_string(),
    }
}

impl SimulationReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(REPORT_COLUMNS)?;
        for row in &self.rows {
            w.write_record([
                self.model.to_string(),
                format_point(&row.x),
                row.cp.to_string(),
                row.mse.to_string(),
                row.variance.to_string(),
                row.bias2.to_string(),
                self.m.to_string(),
                self.m_tilde.to_string(),
                self.alpha.to_string(),
                self.n.to_string(),
                self.master_seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
