//! Forward Ornstein–Uhlenbeck process `dY = -Y dt + sqrt(2) dB`, its closed-form
//! Gaussian transition, denoising score-matching targets and the empirical loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::drift::DriftModel;
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// Floor applied to the transition variance `1 - e^{-2t}`.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// `(e^{-t}, max(1 - e^{-2t}, VARIANCE_FLOOR))`.
pub fn ou_coefficients(t: f64) -> Result<(f64, f64)> {
    ou_coefficients_with_floor(t, VARIANCE_FLOOR)
}

pub fn ou_coefficients_with_floor(t: f64, var_floor: f64) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return Err(Error::Argument(format!("diffusion time must be >= 0, got {t}")));
    }
    let mean = (-t).exp();
    let var = (-(-2.0 * t).exp_m1()).max(var_floor);
    Ok((mean, var))
}

fn check_pair(y0: &[f64], z: &[f64]) -> Result<()> {
    if y0.len() != z.len() {
        return Err(Error::Shape(format!(
            "y0 has {} coordinates, z has {}",
            y0.len(),
            z.len()
        )));
    }
    Ok(())
}

/// `y_t = e^{-t} y0 + sqrt(1 - e^{-2t}) z`.
pub fn perturb(y0: &[f64], t: f64, z: &[f64]) -> Result<Vec<f64>> {
    check_pair(y0, z)?;
    let (mean, var) = ou_coefficients(t)?;
    let sd = var.sqrt();
    Ok(y0.iter().zip(z).map(|(a, b)| mean * a + sd * b).collect())
}

/// Regression target of the drift at `(t, perturb(y0, t, z))`:
/// `e^{-t} y0 - (1 + e^{-2t}) z / sqrt(1 - e^{-2t})`.
///
/// The target is singular at `t = 0`, so times below the early-stopping time `t0` are rejected.
pub fn dsm_target(y0: &[f64], t: f64, z: &[f64], t0: f64) -> Result<Vec<f64>> {
    check_pair(y0, z)?;
    if !(t0 > 0.0) || !(t >= t0) {
        return Err(Error::Domain(format!(
            "score-matching target needs t >= T0 > 0, got t = {t}, T0 = {t0}"
        )));
    }
    let mut out = vec![0.0; y0.len()];
    write_target(y0, t, z, &mut out);
    Ok(out)
}

/// Writes the perturbed state and regression target for one `(y0, t, z)` triple.
pub(crate) fn write_state_and_target(y0: &[f64], t: f64, z: &[f64], state: &mut [f64], target: &mut [f64]) {
    let mean = (-t).exp();
    let var = (-(-2.0 * t).exp_m1()).max(VARIANCE_FLOOR);
    let sd = var.sqrt();
    let noise_coef = (1.0 + mean * mean) / sd;
    for k in 0..y0.len() {
        state[k] = mean * y0[k] + sd * z[k];
        target[k] = mean * y0[k] - noise_coef * z[k];
    }
}

fn write_target(y0: &[f64], t: f64, z: &[f64], target: &mut [f64]) {
    let mut state = vec![0.0; y0.len()];
    write_state_and_target(y0, t, z, &mut state, target);
}

/// One `(t_j, Z_j)` draw used by the empirical loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeNoisePair {
    pub t: f64,
    pub z: Vec<f64>,
}

impl TimeNoisePair {
    /// Validates `t0 <= t <= t_end` and a finite noise vector.
    pub fn new(t: f64, z: Vec<f64>, t0: f64, t_end: f64) -> Result<Self> {
        if !(t >= t0 && t <= t_end) {
            return Err(Error::Domain(format!("pair time {t} outside [{t0}, {t_end}]")));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("noise draw is not finite".into()));
        }
        Ok(TimeNoisePair { t, z })
    }
}

/// `(1/mn) sum_j sum_i ||s(t_j, y_{t_j,i}, x_i) - target_{ij}||^2` with the same `m`
/// pairs shared by every data row.
pub fn empirical_loss(
    model: &dyn DriftModel,
    dataset: &Dataset,
    pairs: &[TimeNoisePair],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Argument("empirical loss needs a non-empty dataset".into()));
    }
    if pairs.is_empty() {
        return Err(Error::Argument("empirical loss needs at least one (t, Z) pair".into()));
    }
    let (n, dy, dx) = (dataset.len(), dataset.dim_y(), dataset.dim_x());
    if model.dim_y() != dy || model.dim_x() != dx {
        return Err(Error::Shape(format!(
            "model expects (d_Y, d_X) = ({}, {}), dataset has ({dy}, {dx})",
            model.dim_y(),
            model.dim_x()
        )));
    }
    let width = 1 + dy + dx;
    let mut inputs = Array2::zeros((n, width));
    let mut targets = Array2::zeros((n, dy));
    let mut acc = CompensatedSum::new();
    for pair in pairs {
        if pair.z.len() != dy {
            return Err(Error::Shape(format!("noise has {} coordinates, expected {dy}", pair.z.len())));
        }
        for i in 0..n {
            let y0 = dataset.y.row(i).to_vec();
            let mut row = inputs.row_mut(i);
            row[0] = pair.t;
            let mut state = vec![0.0; dy];
            let mut target = vec![0.0; dy];
            write_state_and_target(&y0, pair.t, &pair.z, &mut state, &mut target);
            for k in 0..dy {
                row[1 + k] = state[k];
                targets[[i, k]] = target[k];
            }
            for k in 0..dx {
                row[1 + dy + k] = dataset.x[[i, k]];
            }
        }
        let out = model.drift_rows(inputs.view())?;
        for (o, t) in out.iter().zip(targets.iter()) {
            acc.add((o - t) * (o - t));
        }
    }
    Ok(acc.total() / (n * pairs.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Uniform,
    Geometric,
}

/// Early-stopping time `T0`, horizon `T` and the integration grid
/// `0 = t_0 < ... < t_N = T - T0`. The drift is evaluated at `T - t_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub t0: f64,
    pub t_end: f64,
    pub grid: Vec<f64>,
    pub spacing: Spacing,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn max_step(&self) -> f64 {
        self.grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// Reverse (diffusion) times at which the drift is evaluated: `T - t_k`, `k < N`.
    pub fn drift_times(&self) -> Vec<f64> {
        self.grid[..self.grid.len() - 1].iter().map(|t| self.t_end - t).collect()
    }
}

/// Builds the reverse-time grid.
///
/// `Uniform` uses `t_k = k (T - T0) / N`. `Geometric` spaces the reverse times
/// `T - t_k` log-uniformly between `T` and `T0`, so steps shrink as the chain
/// approaches the early-stopping time where the drift is stiff.
pub fn make_schedule(t0: f64, t_end: f64, steps: usize, spacing: Spacing) -> Result<DiffusionSchedule> {
    if !(t0 > 0.0 && t0 < t_end && t_end.is_finite()) {
        return Err(Error::Config(format!("need 0 < T0 < T, got T0 = {t0}, T = {t_end}")));
    }
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let span = t_end - t0;
    let mut grid: Vec<f64> = match spacing {
        Spacing::Uniform => (0..=steps).map(|k| k as f64 * span / steps as f64).collect(),
        Spacing::Geometric => {
            let (hi, lo) = (t_end.ln(), t0.ln());
            (0..=steps)
                .map(|k| {
                    let frac = k as f64 / steps as f64;
                    t_end - (hi + frac * (lo - hi)).exp()
                })
                .collect()
        }
    };
    grid[0] = 0.0;
    grid[steps] = span;
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("schedule grid is not strictly increasing".into()));
    }
    Ok(DiffusionSchedule {
        t0,
        t_end,
        grid,
        spacing,
    })
}
