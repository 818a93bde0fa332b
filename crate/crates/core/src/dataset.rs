use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paired covariate/response records: row `i` of `x` (`n x d_X`) goes with row `i` of `y` (`n x d_Y`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with generated column names (`x1..`, `y1..`).
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        let x_names = (1..=x.ncols()).map(|i| format!("x{i}")).collect();
        let y_names = (1..=y.ncols()).map(|i| format!("y{i}")).collect();
        Self::with_names(x, y, x_names, y_names)
    }

    pub fn with_names(
        x: Array2<f64>,
        y: Array2<f64>,
        x_names: Vec<String>,
        y_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::Shape("response must have at least one column".into()));
        }
        if x_names.len() != x.ncols() || y_names.len() != y.ncols() {
            return Err(Error::Shape("column names do not match column counts".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            x,
            y,
            x_names,
            y_names,
        })
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn dim_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn y_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.y.row(i)
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), indices),
            y: self.y.select(Axis(0), indices),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
        }
    }
}
