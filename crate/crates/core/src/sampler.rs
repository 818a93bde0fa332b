//! Euler–Maruyama simulation of the learned reverse dynamics.
//!
//! Each chain starts from `N(0, I)` (replacing the intractable `p_T(.|x)`),
//! freezes the drift at the left grid endpoint and stops at `t_N = T - T0`.
//! All `M` chains of a [`generate`] call advance together so the drift network
//! is evaluated once per step on an `M`-row batch, but every chain draws its
//! noise from its own RNG sub-stream: output does not depend on batching.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::DiffusionSchedule;
use crate::drift::DriftModel;
use crate::error::{Error, Result};
use crate::nn::standard_normal;

/// Paths whose de-standardized state exceeds this norm are aborted.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// `y + drift * dt + sqrt(2 dt) * noise`.
pub fn em_step(drift: &[f64], y: &[f64], dt: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("Euler-Maruyama step must be positive, got {dt}")));
    }
    if drift.len() != y.len() || noise.len() != y.len() {
        return Err(Error::Shape("drift, state and noise lengths differ".into()));
    }
    let diffusion = (2.0 * dt).sqrt();
    Ok(y.iter()
        .zip(drift)
        .zip(noise)
        .map(|((y, b), z)| y + b * dt + diffusion * z)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    /// Test hook: zero the Brownian increments (the prior draw is still random).
    pub suppress_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions { suppress_noise: false }
    }
}

/// RNG for chain `index` under master seed `base` (ChaCha stream split).
pub fn path_rng(base: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64);
    rng
}

/// Draws one sample of `Y | X = x` using `rng` for the prior and all increments.
pub fn sample_one<R: Rng>(
    model: &dyn DriftModel,
    x: &[f64],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    sample_one_with(model, x, schedule, rng, SamplerOptions::default())
}

pub fn sample_one_with<R: Rng>(
    model: &dyn DriftModel,
    x: &[f64],
    schedule: &DiffusionSchedule,
    rng: &mut R,
    options: SamplerOptions,
) -> Result<Vec<f64>> {
    let out = integrate(model, x, schedule, std::slice::from_mut(rng), options)?;
    Ok(out.row(0).to_vec())
}

/// `m` independent samples (rows of the result). Chain `i` uses
/// `path_rng(base, i)` where `base` is one draw from `rng`.
pub fn generate<R: Rng>(
    model: &dyn DriftModel,
    x: &[f64],
    schedule: &DiffusionSchedule,
    m: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    generate_with(model, x, schedule, m, rng.random(), SamplerOptions::default())
}

pub fn generate_with(
    model: &dyn DriftModel,
    x: &[f64],
    schedule: &DiffusionSchedule,
    m: usize,
    base_seed: u64,
    options: SamplerOptions,
) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(Error::Argument("need at least one sample".into()));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..m).map(|i| path_rng(base_seed, i)).collect();
    integrate(model, x, schedule, &mut rngs, options)
}

fn integrate<R: Rng>(
    model: &dyn DriftModel,
    x: &[f64],
    schedule: &DiffusionSchedule,
    rngs: &mut [R],
    options: SamplerOptions,
) -> Result<Array2<f64>> {
    let (dy, dx) = (model.dim_y(), model.dim_x());
    if x.len() != dx {
        return Err(Error::Shape(format!("covariate has {} coordinates, model expects {dx}", x.len())));
    }
    if schedule.grid.len() < 2 {
        return Err(Error::Config("schedule has no steps".into()));
    }
    let x_model = model.encode_x(x);
    let paths = rngs.len();
    let mut inputs = Array2::zeros((paths, 1 + dy + dx));
    for (mut row, rng) in inputs.rows_mut().into_iter().zip(rngs.iter_mut()) {
        for k in 0..dy {
            row[1 + k] = standard_normal(rng);
        }
        for (k, v) in x_model.iter().enumerate() {
            row[1 + dy + k] = *v;
        }
    }

    let mut decoded = vec![0.0; dy];
    for (step, w) in schedule.grid.windows(2).enumerate() {
        let dt = w[1] - w[0];
        let diffusion = (2.0 * dt).sqrt();
        inputs.column_mut(0).fill(schedule.t_end - w[0]);
        let drift = model.drift_rows(inputs.view())?;
        for (path, (mut row, rng)) in inputs.rows_mut().into_iter().zip(rngs.iter_mut()).enumerate() {
            for k in 0..dy {
                let noise = if options.suppress_noise { 0.0 } else { standard_normal(rng) };
                row[1 + k] += drift[[path, k]] * dt + diffusion * noise;
                decoded[k] = row[1 + k];
            }
            model.decode_y(&mut decoded);
            let norm = decoded.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= DIVERGENCE_BOUND) {
                return Err(Error::SamplerDivergence { step, path });
            }
        }
    }

    let mut out = Array2::zeros((paths, dy));
    for (src, mut dst) in inputs.rows().into_iter().zip(out.rows_mut()) {
        for k in 0..dy {
            decoded[k] = src[1 + k];
        }
        model.decode_y(&mut decoded);
        for k in 0..dy {
            dst[k] = decoded[k];
        }
    }
    Ok(out)
}

/// Samples at each covariate vector in `xs`. Point `i` takes its base seed
/// from the `i`-th draw of `ChaCha8(seed)`.
pub fn generate_at_points(
    model: &dyn DriftModel,
    xs: &[Vec<f64>],
    schedule: &DiffusionSchedule,
    m: usize,
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xs.iter()
        .map(|x| generate_with(model, x, schedule, m, rng.random(), SamplerOptions::default()))
        .collect()
}

/// Long format: `point_id,sample,<names...>`, one line per generated sample.
pub fn write_point_samples_csv<W: Write>(writer: W, pools: &[Array2<f64>], names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["point_id".to_string(), "sample".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, pool) in pools.iter().enumerate() {
        if pool.ncols() != names.len() {
            return Err(Error::Shape("column names do not match sample width".into()));
        }
        for (k, row) in pool.rows().into_iter().enumerate() {
            let mut record = vec![i.to_string(), k.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per sample, one column per response coordinate.
pub fn write_samples_csv<W: Write>(writer: W, samples: &Array2<f64>, names: &[String]) -> Result<()> {
    if names.len() != samples.ncols() {
        return Err(Error::Shape("column names do not match sample width".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(names)?;
    for row in samples.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
