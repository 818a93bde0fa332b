//! The drift abstraction shared by the loss, the sampler and the oracles.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::ScoreNetwork;

/// A (possibly learned) drift `s(t, y, x)` evaluated on rows `[t, y, x]`.
///
/// Implementations may work in a transformed (standardized) space; the
/// sampler maps covariates in with [`DriftModel::encode_x`] and maps final
/// states back out with [`DriftModel::decode_y`].
pub trait DriftModel: Sync {
    fn dim_y(&self) -> usize;

    fn dim_x(&self) -> usize;

    /// `inputs` is `B x (1 + d_Y + d_X)`; returns `B x d_Y`.
    fn drift_rows(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn encode_x(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn decode_y(&self, _y: &mut [f64]) {}
}

impl DriftModel for ScoreNetwork {
    fn dim_y(&self) -> usize {
        ScoreNetwork::dim_y(self)
    }

    fn dim_x(&self) -> usize {
        ScoreNetwork::dim_x(self)
    }

    fn drift_rows(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.forward_batch(inputs)
    }
}

/// Wraps a closure `f(t, y, x) -> drift` as a [`DriftModel`].
pub struct FnDrift<F> {
    dim_y: usize,
    dim_x: usize,
    f: F,
}

impl<F> FnDrift<F>
where
    F: Fn(f64, &[f64], &[f64]) -> Result<Vec<f64>> + Sync,
{
    pub fn new(dim_y: usize, dim_x: usize, f: F) -> Self {
        FnDrift { dim_y, dim_x, f }
    }
}

impl<F> DriftModel for FnDrift<F>
where
    F: Fn(f64, &[f64], &[f64]) -> Result<Vec<f64>> + Sync,
{
    fn dim_y(&self) -> usize {
        self.dim_y
    }

    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn drift_rows(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let width = 1 + self.dim_y + self.dim_x;
        if inputs.ncols() != width {
            return Err(Error::Shape(format!(
                "drift input has {} columns, expected {width}",
                inputs.ncols()
            )));
        }
        let mut out = Array2::zeros((inputs.nrows(), self.dim_y));
        for (row, mut dst) in inputs.rows().into_iter().zip(out.rows_mut()) {
            let row = row.to_vec();
            let value = (self.f)(row[0], &row[1..1 + self.dim_y], &row[1 + self.dim_y..])?;
            if value.len() != self.dim_y {
                return Err(Error::Shape(format!(
                    "drift closure returned {} values, expected {}",
                    value.len(),
                    self.dim_y
                )));
            }
            dst.assign(&ndarray::ArrayView1::from(&value));
        }
        Ok(out)
    }
}
