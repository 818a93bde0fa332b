//! Empirical-risk training of the drift network on denoising score-matching targets.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffusion::{write_state_and_target, TimeNoisePair};
use crate::drift::DriftModel;
use crate::error::{Error, Result};
use crate::nn::{adam_step, init_network, standard_normal, AdamState, Minibatch, ScoreNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of `(t, Z)` pairs in the shared pool.
    pub m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(rename = "T0")]
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    /// Redraw the `(t, Z)` pool at the start of every epoch.
    pub resample_pairs_per_epoch: bool,
    pub val_fraction: f64,
    pub hidden_dims: Vec<usize>,
    /// Feed `(t - T0) / (T - T0)` to the network instead of raw `t`.
    pub time_rescale: bool,
    /// Stop after this many epochs without validation improvement and keep the best weights.
    pub early_stopping_patience: Option<usize>,
    pub input_clamp_radius: Option<f64>,
    pub output_bound: Option<f64>,
    pub lr_schedule: LrSchedule,
    /// Keep an exponential moving average of the weights (per optimizer step)
    /// and return it instead of the last iterate.
    pub ema_decay: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 + cos(pi * epoch / epochs)) / 2`.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 4096,
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            t0: 0.01,
            t_end: 5.0,
            resample_pairs_per_epoch: true,
            val_fraction: 0.1,
            hidden_dims: vec![128, 128, 128],
            time_rescale: false,
            early_stopping_patience: None,
            input_clamp_radius: None,
            output_bound: None,
            lr_schedule: LrSchedule::Constant,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Argument("m (number of time/noise pairs) must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.t0 > 0.0 && self.t0 < self.t_end && self.t_end.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < T0 < T, got T0 = {}, T = {}",
                self.t0, self.t_end
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

/// Per-coordinate affine map `v -> (v - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Column means and (population) standard deviations; constant columns get scale 1.
    pub fn fit(data: ArrayView2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let mut shift = Vec::with_capacity(data.ncols());
        let mut scale = Vec::with_capacity(data.ncols());
        for col in data.columns() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            shift.push(mean);
            scale.push(if sd > 1e-12 && sd.is_finite() { sd } else { 1.0 });
        }
        Standardization { shift, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Standardization {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, v: &mut [f64]) {
        for ((x, s), c) in v.iter_mut().zip(&self.shift).zip(&self.scale) {
            *x = (*x - s) / c;
        }
    }

    pub fn invert(&self, v: &mut [f64]) {
        for ((x, s), c) in v.iter_mut().zip(&self.shift).zip(&self.scale) {
            *x = *x * c + s;
        }
    }

    pub fn apply_rows(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            self.apply(row.as_slice_mut().expect("owned rows are contiguous"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Drift estimator together with the data standardization it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedModel {
    pub net: ScoreNetwork,
    #[serde(rename = "T0")]
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub time_rescale: bool,
    pub x_standardization: Standardization,
    pub y_standardization: Standardization,
    pub loss_trace: Vec<EpochLoss>,
}

impl TrainedModel {
    fn network_time(&self, t: f64) -> f64 {
        if self.time_rescale {
            (t - self.t0) / (self.t_end - self.t0)
        } else {
            t
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(text)?;
        if model.loss_trace.is_empty() {
            return Err(Error::Config("model has an empty loss trace".into()));
        }
        if model.x_standardization.dim() != model.net.dim_x()
            || model.y_standardization.dim() != model.net.dim_y()
        {
            return Err(Error::Shape("standardization does not match network dims".into()));
        }
        Ok(model)
    }

    /// Writes `epoch,train_loss,val_loss`.
    pub fn write_loss_trace<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_loss"])?;
        for e in &self.loss_trace {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl DriftModel for TrainedModel {
    fn dim_y(&self) -> usize {
        self.net.dim_y()
    }

    fn dim_x(&self) -> usize {
        self.net.dim_x()
    }

    fn drift_rows(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.time_rescale {
            let mut rows = inputs.to_owned();
            rows.column_mut(0).mapv_inplace(|t| self.network_time(t));
            self.net.forward_batch(rows.view())
        } else {
            self.net.forward_batch(inputs)
        }
    }

    fn encode_x(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        self.x_standardization.apply(&mut v);
        v
    }

    fn decode_y(&self, y: &mut [f64]) {
        self.y_standardization.invert(y);
    }
}

/// `m` i.i.d. pairs with `t ~ U[T0, T]` and `Z ~ N(0, I_{d_Y})`.
pub fn sample_time_noise<R: Rng + ?Sized>(
    m: usize,
    t0: f64,
    t_end: f64,
    dim_y: usize,
    rng: &mut R,
) -> Result<Vec<TimeNoisePair>> {
    if m == 0 {
        return Err(Error::Argument("need at least one time/noise pair".into()));
    }
    if !(t0 > 0.0 && t0 < t_end) {
        return Err(Error::Config(format!("need 0 < T0 < T, got T0 = {t0}, T = {t_end}")));
    }
    Ok((0..m)
        .map(|_| {
            let t = rng.random_range(t0..=t_end);
            let z = (0..dim_y).map(|_| standard_normal(rng)).collect();
            TimeNoisePair { t, z }
        })
        .collect())
}

/// Trains on `dataset`, holding out `config.val_fraction` of the rows for validation.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_val = (config.val_fraction * dataset.len() as f64).floor() as usize;
    if n_val == 0 {
        return fit(dataset, None, config, &mut rng);
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.is_empty() {
        return Err(Error::Argument("validation split leaves no training rows".into()));
    }
    let train_set = dataset.select(train_idx);
    let val_set = dataset.select(val_idx);
    fit(&train_set, Some(&val_set), config, &mut rng)
}

/// Trains on all of `train_set`, monitoring `val_set` when given (ignores `val_fraction`).
pub fn train_with_validation(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Argument("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    fit(train_set, val_set.filter(|v| !v.is_empty()), config, &mut rng)
}

struct BatchBuffers {
    batch: Minibatch,
    state: Vec<f64>,
    target: Vec<f64>,
}

impl BatchBuffers {
    fn new(rows: usize, dy: usize, dx: usize) -> Self {
        BatchBuffers {
            batch: Minibatch {
                inputs: Array2::zeros((rows, 1 + dy + dx)),
                targets: Array2::zeros((rows, dy)),
            },
            state: vec![0.0; dy],
            target: vec![0.0; dy],
        }
    }

    /// Fills row `r` with the regression example built from data row `(x, y0)` and `pair`.
    fn fill(&mut self, r: usize, x: &[f64], y0: &[f64], pair: &TimeNoisePair, network_t: f64) {
        let dy = y0.len();
        write_state_and_target(y0, pair.t, &pair.z, &mut self.state, &mut self.target);
        let mut row = self.batch.inputs.row_mut(r);
        row[0] = network_t;
        for k in 0..dy {
            row[1 + k] = self.state[k];
            self.batch.targets[[r, k]] = self.target[k];
        }
        for (k, v) in x.iter().enumerate() {
            row[1 + dy + k] = *v;
        }
    }
}

fn fit(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainedModel> {
    let (n, dy, dx) = (train_set.len(), train_set.dim_y(), train_set.dim_x());
    if (config.batch_size as u128) > (n as u128) * (config.m as u128) {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} available (row, pair) combinations",
            config.batch_size,
            n * config.m
        )));
    }
    let x_std = Standardization::fit(train_set.x.view());
    let y_std = Standardization::fit(train_set.y.view());
    let xs = x_std.apply_rows(train_set.x.view());
    let ys = y_std.apply_rows(train_set.y.view());

    let mut dims = vec![1 + dy + dx];
    dims.extend_from_slice(&config.hidden_dims);
    dims.push(dy);
    let mut net = init_network(&dims, rng.random())?;
    if let Some(r) = config.input_clamp_radius {
        net = net.with_input_clamp(r)?;
    }
    if let Some(k) = config.output_bound {
        net = net.with_output_bound(k)?;
    }
    let mut model = TrainedModel {
        net,
        t0: config.t0,
        t_end: config.t_end,
        time_rescale: config.time_rescale,
        x_standardization: x_std,
        y_standardization: y_std,
        loss_trace: Vec::with_capacity(config.epochs),
    };

    // Validation uses one fixed pair per held-out row, drawn once.
    let val_batch = match val_set {
        Some(v) => {
            let vx = model.x_standardization.apply_rows(v.x.view());
            let vy = model.y_standardization.apply_rows(v.y.view());
            let pairs = sample_time_noise(v.len(), config.t0, config.t_end, dy, rng)?;
            let mut buf = BatchBuffers::new(v.len(), dy, dx);
            for (i, pair) in pairs.iter().enumerate() {
                let xr = vx.row(i).to_vec();
                let yr = vy.row(i).to_vec();
                buf.fill(i, &xr, &yr, pair, model.network_time(pair.t));
            }
            Some(buf.batch)
        }
        None => None,
    };

    let mut adam = AdamState::new(&model.net, config.lr);
    let mut pairs = sample_time_noise(config.m, config.t0, config.t_end, dy, rng)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, ScoreNetwork)> = None;
    let mut since_best = 0usize;
    let batch_size = config.batch_size.min(n);
    let mut full = BatchBuffers::new(batch_size, dy, dx);

    let mut ema = config.ema_decay.map(|d| (d, model.net.clone()));

    for epoch in 0..config.epochs {
        adam.lr = config.lr_schedule.rate(config.lr, epoch, config.epochs);
        if epoch > 0 && config.resample_pairs_per_epoch {
            pairs = sample_time_noise(config.m, config.t0, config.t_end, dy, rng)?;
        }
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut tail;
            let buf = if chunk.len() == batch_size {
                &mut full
            } else {
                tail = BatchBuffers::new(chunk.len(), dy, dx);
                &mut tail
            };
            for (r, &i) in chunk.iter().enumerate() {
                let pair = &pairs[rng.random_range(0..pairs.len())];
                let xr = xs.row(i);
                let yr = ys.row(i);
                buf.fill(
                    r,
                    xr.as_slice().expect("contiguous"),
                    yr.as_slice().expect("contiguous"),
                    pair,
                    model.network_time(pair.t),
                );
            }
            let (loss, grads) = model.net.backward(&buf.batch)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDivergence { epoch, loss });
            }
            adam_step(&mut model.net, &grads, &mut adam)?;
            if let Some((decay, avg)) = ema.as_mut() {
                avg.blend_toward(&model.net, *decay)?;
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::TrainingDivergence { epoch, loss: train_loss });
        }
        let val_loss = match &val_batch {
            Some(b) => {
                let v = model.net.mse_loss(b)?;
                if !v.is_finite() {
                    return Err(Error::TrainingDivergence { epoch, loss: v });
                }
                Some(v)
            }
            None => None,
        };
        model.loss_trace.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });

        if let (Some(patience), Some(v)) = (config.early_stopping_patience, val_loss) {
            match &best {
                Some((b, _)) if v >= *b => {
                    since_best += 1;
                    if since_best >= patience {
                        break;
                    }
                }
                _ => {
                    best = Some((v, model.net.clone()));
                    since_best = 0;
                }
            }
        }
    }
    if let Some((_, net)) = best {
        model.net = net;
    } else if let Some((_, avg)) = ema {
        model.net = avg;
    }
    Ok(model)
}

/// Grid analogue of `(1/(T - T0)) \int E||s - b||^2`: for each time, the squared drift
/// error averaged over `y_grid` with weights proportional to the oracle's marginal
/// density; then averaged uniformly over `t_grid`.
///
/// `oracle(t, y)` returns `(b(t, y, x), p_t(y | x))`.
pub fn evaluate_drift_mse(
    model: &dyn DriftModel,
    oracle: &dyn Fn(f64, &[f64]) -> Result<(Vec<f64>, f64)>,
    t_grid: &[f64],
    y_grid: &[Vec<f64>],
    x: &[f64],
) -> Result<f64> {
    if t_grid.is_empty() || y_grid.is_empty() {
        return Err(Error::Argument("drift MSE needs non-empty grids".into()));
    }
    let (dy, dx) = (model.dim_y(), model.dim_x());
    if x.len() != dx || y_grid.iter().any(|y| y.len() != dy) {
        return Err(Error::Shape("grid points do not match model dimensions".into()));
    }
    let mut inputs = Array2::zeros((y_grid.len(), 1 + dy + dx));
    for (mut row, y) in inputs.rows_mut().into_iter().zip(y_grid) {
        for (k, v) in y.iter().enumerate() {
            row[1 + k] = *v;
        }
        for (k, v) in x.iter().enumerate() {
            row[1 + dy + k] = *v;
        }
    }
    let mut total = 0.0;
    for &t in t_grid {
        inputs.column_mut(0).fill(t);
        let out = model.drift_rows(inputs.view())?;
        let mut weighted = 0.0;
        let mut mass = 0.0;
        for (row, y) in out.axis_iter(Axis(0)).zip(y_grid) {
            let (b, w) = oracle(t, y)?;
            let err: f64 = row.iter().zip(&b).map(|(s, b)| (s - b) * (s - b)).sum();
            weighted += w * err;
            mass += w;
        }
        if !(mass > 0.0) {
            return Err(Error::Numerical(format!("oracle weights vanish at t = {t}")));
        }
        total += weighted / mass;
    }
    Ok(total / t_grid.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::FnDrift;
    use ndarray::Array2;

    fn gaussian_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 1), || rng.random::<f64>());
        let y = Array2::from_shape_simple_fn((n, 1), || 0.5 + standard_normal(&mut rng));
        Dataset::new(x, y).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            m: 256,
            epochs: 5,
            batch_size: 64,
            hidden_dims: vec![16, 16],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sample_time_noise_contract() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let p = sample_time_noise(3, 0.01, 1.0, 2, &mut a).unwrap();
        assert_eq!(p, sample_time_noise(3, 0.01, 1.0, 2, &mut b).unwrap());
        assert!(p.iter().all(|q| q.t >= 0.01 && q.t <= 1.0 && q.z.len() == 2));
        assert!(matches!(sample_time_noise(0, 0.01, 1.0, 1, &mut a), Err(Error::Argument(_))));
    }

    #[test]
    fn uniform_time_mean() {
        let (t0, t1, m) = (0.05, 2.0, 100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = sample_time_noise(m, t0, t1, 1, &mut rng).unwrap();
        let mean = p.iter().map(|q| q.t).sum::<f64>() / m as f64;
        let tol = 4.0 * (t1 - t0) / (12.0 * m as f64).sqrt();
        assert!((mean - (t0 + t1) / 2.0).abs() < tol);
    }

    #[test]
    fn standardization_round_trip() {
        let data = gaussian_data(50, 2);
        let s = Standardization::fit(data.y.view());
        for i in 0..data.len() {
            let orig = data.y.row(i).to_vec();
            let mut v = orig.clone();
            s.apply(&mut v);
            s.invert(&mut v);
            assert!((v[0] - orig[0]).abs() <= 1e-14 * (1.0 + orig[0].abs()));
        }
        let constant = Standardization::fit(Array2::from_elem((4, 1), 3.0).view());
        assert_eq!(constant.scale, vec![1.0]);
    }

    #[test]
    fn train_guards() {
        let data = gaussian_data(20, 1);
        assert!(matches!(train(&data.select(&[]), &small_config()), Err(Error::Argument(_))));
        let bad = TrainConfig { m: 0, ..small_config() };
        assert!(matches!(train(&data, &bad), Err(Error::Argument(_))));
        let bad = TrainConfig { t0: 2.0, t_end: 1.0, ..small_config() };
        assert!(matches!(train(&data, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn train_is_deterministic() {
        let data = gaussian_data(200, 3);
        let a = train(&data, &small_config()).unwrap();
        let b = train(&data, &small_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss_trace.len(), 5);
        assert!(a.loss_trace.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_some()));
    }

    #[test]
    fn model_json_round_trip() {
        let data = gaussian_data(100, 4);
        let model = train(&data, &TrainConfig { epochs: 2, ..small_config() }).unwrap();
        let back = TrainedModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn loss_trace_csv_header() {
        let data = gaussian_data(100, 4);
        let model = train(&data, &TrainConfig { epochs: 2, ..small_config() }).unwrap();
        let mut buf = Vec::new();
        model.write_loss_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss\n0,"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn drift_mse_of_self_and_offset() {
        let oracle = |t: f64, y: &[f64]| -> Result<(Vec<f64>, f64)> {
            Ok((vec![-y[0] * t], (-y[0] * y[0] / 2.0).exp()))
        };
        let exact = FnDrift::new(1, 0, |t: f64, y: &[f64], _x: &[f64]| Ok(vec![-y[0] * t]));
        let shifted = FnDrift::new(1, 0, |t: f64, y: &[f64], _x: &[f64]| Ok(vec![-y[0] * t + 0.3]));
        let ts = [0.1, 0.5, 2.0];
        let ys: Vec<Vec<f64>> = (-10..=10).map(|k| vec![k as f64 * 0.3]).collect();
        assert_eq!(evaluate_drift_mse(&exact, &oracle, &ts, &ys, &[]).unwrap(), 0.0);
        let off = evaluate_drift_mse(&shifted, &oracle, &ts, &ys, &[]).unwrap();
        assert!((off - 0.09).abs() < 1e-12);
        assert!(evaluate_drift_mse(&exact, &oracle, &[], &ys, &[]).is_err());
    }
}
