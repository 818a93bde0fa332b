//! Dense ReLU network used as the drift estimator `s(t, y, x)`.
//!
//! Inputs are the concatenation `[t, y, x]` (one row per sample), the output
//! lives in `R^{d_Y}`. Hidden layers use ReLU, the last layer is affine.
//! Two optional guards are supported: a coordinatewise clamp of the `y`
//! slice to `[-R, R]` before the first layer, and a radial rescale of the
//! output so its Euclidean norm never exceeds `K`.
//!
//! Backpropagation is exact and never mutates the network; training code
//! owns the single mutable instance and applies [`adam_step`].

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of parameters above which the finite-difference check samples a
/// strided subset instead of visiting every parameter.
const FULL_CHECK_LIMIT: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDoc", into = "NetworkDoc")]
pub struct ScoreNetwork {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    input_clamp_radius: Option<f64>,
    output_bound: Option<f64>,
}

/// Flat JSON form: weights are row-major arrays of length `out * in`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_clamp_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_bound: Option<f64>,
}

impl From<ScoreNetwork> for NetworkDoc {
    fn from(net: ScoreNetwork) -> Self {
        NetworkDoc {
            weights: net.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: net.biases.iter().map(|b| b.to_vec()).collect(),
            layer_dims: net.layer_dims,
            input_clamp_radius: net.input_clamp_radius,
            output_bound: net.output_bound,
        }
    }
}

impl TryFrom<NetworkDoc> for ScoreNetwork {
    type Error = Error;

    fn try_from(doc: NetworkDoc) -> Result<Self> {
        validate_dims(&doc.layer_dims)?;
        let layers = doc.layer_dims.len() - 1;
        if doc.weights.len() != layers || doc.biases.len() != layers {
            return Err(Error::Shape(format!(
                "expected {layers} weight and bias blocks, got {} and {}",
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, (w, b)) in doc.weights.into_iter().zip(doc.biases).enumerate() {
            let (rows, cols) = (doc.layer_dims[l + 1], doc.layer_dims[l]);
            weights.push(
                Array2::from_shape_vec((rows, cols), w)
                    .map_err(|e| Error::Shape(format!("layer {l} weights: {e}")))?,
            );
            if b.len() != rows {
                return Err(Error::Shape(format!(
                    "layer {l} bias has length {}, expected {rows}",
                    b.len()
                )));
            }
            biases.push(Array1::from(b));
        }
        let mut net = ScoreNetwork::from_parts(weights, biases)?;
        if let Some(r) = doc.input_clamp_radius {
            net = net.with_input_clamp(r)?;
        }
        if let Some(k) = doc.output_bound {
            net = net.with_output_bound(k)?;
        }
        Ok(net)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "network needs at least 2 layer dims, got {}",
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("layer dims must be positive: {dims:?}")));
    }
    let (input, output) = (dims[0], dims[dims.len() - 1]);
    if input < 1 + output {
        return Err(Error::Config(format!(
            "input dim {input} cannot hold (t, y) with d_Y = {output}"
        )));
    }
    Ok(())
}

/// Builds a network with fan-in scaled uniform weights `U[-sqrt(6/fan_in), sqrt(6/fan_in)]`
/// and zero biases. Identical `(layer_dims, seed)` give bit-identical parameters.
pub fn init_network(layer_dims: &[usize], seed: u64) -> Result<ScoreNetwork> {
    validate_dims(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(layer_dims.len() - 1);
    let mut biases = Vec::with_capacity(layer_dims.len() - 1);
    for pair in layer_dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((fan_out, fan_in), || {
            rng.random_range(-limit..=limit)
        });
        weights.push(w);
        biases.push(Array1::zeros(fan_out));
    }
    Ok(ScoreNetwork {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
        input_clamp_radius: None,
        output_bound: None,
    })
}

/// Parameter-shaped container used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &ScoreNetwork) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Value at a flat index (layer weights row-major, then biases, layer by layer).
    pub fn flat(&self, mut k: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if k < w.len() {
                return w.as_slice().expect("standard layout")[k];
            }
            k -= w.len();
            if k < b.len() {
                return b[k];
            }
            k -= b.len();
        }
        panic!("flat gradient index out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, net: &ScoreNetwork) -> bool {
        self.weights.len() == net.weights.len()
            && self.biases.len() == net.biases.len()
            && self.weights.iter().zip(&net.weights).all(|(a, b)| a.dim() == b.dim())
            && self.biases.iter().zip(&net.biases).all(|(a, b)| a.len() == b.len())
    }
}

/// A batch of regression rows: `inputs` is `B x (1 + d_Y + d_X)`, `targets` is `B x d_Y`.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

struct ForwardCache {
    /// Input to each layer (post-clamp input for layer 0, post-ReLU activations after).
    activations: Vec<Array2<f64>>,
    /// Output of the last affine layer, before the optional radial bound.
    raw_output: Array2<f64>,
}

impl ScoreNetwork {
    /// Assembles a network from explicit parameters (`weights[l]` is `out x in`).
    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape(format!(
                "{} weight blocks vs {} bias blocks",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].ncols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *dims.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::Shape(format!("layer {l} is inconsistent")));
            }
            dims.push(w.nrows());
        }
        validate_dims(&dims)?;
        let all_finite = weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::Input("network parameters must be finite".into()));
        }
        // Owned arrays may come in any memory order; flat indexing needs row-major.
        let weights = weights
            .into_iter()
            .map(|w| if w.is_standard_layout() { w } else { w.as_standard_layout().into_owned() })
            .collect();
        Ok(ScoreNetwork {
            layer_dims: dims,
            weights,
            biases,
            input_clamp_radius: None,
            output_bound: None,
        })
    }

    pub fn with_input_clamp(mut self, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Config(format!("clamp radius must be positive, got {radius}")));
        }
        self.input_clamp_radius = Some(radius);
        Ok(self)
    }

    pub fn with_output_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::Config(format!("output bound must be positive, got {bound}")));
        }
        self.output_bound = Some(bound);
        Ok(self)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn input_clamp_radius(&self) -> Option<f64> {
        self.input_clamp_radius
    }

    pub fn output_bound(&self) -> Option<f64> {
        self.output_bound
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn dim_y(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn dim_x(&self) -> usize {
        self.input_dim() - 1 - self.dim_y()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// `self <- keep * self + (1 - keep) * other`, parameter by parameter.
    pub fn blend_toward(&mut self, other: &ScoreNetwork, keep: f64) -> Result<()> {
        if self.layer_dims != other.layer_dims {
            return Err(Error::Shape("cannot blend networks of different architecture".into()));
        }
        let mix = |x: &mut f64, y: &f64| *x = keep * *x + (1.0 - keep) * y;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.zip_mut_with(b, mix);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.zip_mut_with(b, mix);
        }
        Ok(())
    }

    fn flat_param_mut(&mut self, mut k: usize) -> &mut f64 {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if k < w.len() {
                return &mut w.as_slice_mut().expect("standard layout")[k];
            }
            k -= w.len();
            if k < b.len() {
                return &mut b[k];
            }
            k -= b.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Coordinatewise clamp of `y` to `[-R, R]`; identity when no radius is set.
    pub fn clamp_y(&self, y: &mut [f64]) {
        if let Some(r) = self.input_clamp_radius {
            for v in y.iter_mut() {
                *v = v.clamp(-r, r);
            }
        }
    }

    /// Single evaluation `s(t, y, x)`.
    pub fn forward(&self, t: f64, y: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim_y() || x.len() != self.dim_x() {
            return Err(Error::Shape(format!(
                "expected y in R^{} and x in R^{}, got {} and {}",
                self.dim_y(),
                self.dim_x(),
                y.len(),
                x.len()
            )));
        }
        let mut row = Vec::with_capacity(self.input_dim());
        row.push(t);
        row.extend_from_slice(y);
        row.extend_from_slice(x);
        let input = Array2::from_shape_vec((1, row.len()), row).expect("row shape");
        Ok(self.forward_batch(input.view())?.row(0).to_vec())
    }

    /// Evaluates every row of `inputs` (`B x (1 + d_Y + d_X)`).
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_inputs(inputs)?;
        let cache = self.forward_cached(inputs);
        Ok(self.bounded(&cache.raw_output))
    }

    fn check_inputs(&self, inputs: ArrayView2<f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("network input contains non-finite values".into()));
        }
        Ok(())
    }

    fn forward_cached(&self, inputs: ArrayView2<f64>) -> ForwardCache {
        let mut a = inputs.to_owned();
        if let Some(r) = self.input_clamp_radius {
            let dy = self.dim_y();
            a.slice_mut(ndarray::s![.., 1..1 + dy]).mapv_inplace(|v| v.clamp(-r, r));
        }
        let last = self.weights.len() - 1;
        let mut activations = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(&w.t());
            z += b;
            activations.push(a);
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        ForwardCache {
            activations,
            raw_output: a,
        }
    }

    fn bounded(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut out = raw.clone();
        if let Some(k) = self.output_bound {
            for mut row in out.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm > k {
                    row *= k / norm;
                }
            }
        }
        out
    }

    /// Mean squared residual `(1/B) sum ||s(input) - target||^2`.
    pub fn mse_loss(&self, batch: &Minibatch) -> Result<f64> {
        self.check_batch(batch)?;
        let out = self.forward_batch(batch.inputs.view())?;
        Ok(squared_residual_mean(&out, &batch.targets))
    }

    fn check_batch(&self, batch: &Minibatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Argument("minibatch is empty".into()));
        }
        if batch.targets.nrows() != batch.inputs.nrows() || batch.targets.ncols() != self.dim_y()
        {
            return Err(Error::Shape(format!(
                "targets are {:?}, expected ({}, {})",
                batch.targets.dim(),
                batch.inputs.nrows(),
                self.dim_y()
            )));
        }
        if batch.targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("targets contain non-finite values".into()));
        }
        Ok(())
    }

    /// Exact gradient of the mean squared residual over `batch`. Returns `(loss, grads)`.
    pub fn backward(&self, batch: &Minibatch) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        self.check_inputs(batch.inputs.view())?;
        let cache = self.forward_cached(batch.inputs.view());
        let out = self.bounded(&cache.raw_output);
        let loss = squared_residual_mean(&out, &batch.targets);
        let scale = 2.0 / batch.len() as f64;
        let mut delta = (&out - &batch.targets) * scale;

        if let Some(k) = self.output_bound {
            // out = k p / |p| when |p| > k; pull the gradient back through the Jacobian
            // (k/|p|)(I - p p^T / |p|^2).
            for (mut d, p) in delta.rows_mut().into_iter().zip(cache.raw_output.rows()) {
                let norm = p.dot(&p).sqrt();
                if norm > k {
                    let proj = d.dot(&p) / (norm * norm);
                    let factor = k / norm;
                    for (di, pi) in d.iter_mut().zip(p.iter()) {
                        *di = factor * (*di - proj * pi);
                    }
                }
            }
        }

        let mut grads = Gradients::zeros_like(self);
        for l in (0..self.weights.len()).rev() {
            let a = &cache.activations[l];
            grads.weights[l] = delta.t().dot(a);
            grads.biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l]);
                ndarray::Zip::from(&mut prev).and(a).for_each(|d, &act| {
                    if act <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        Ok((loss, grads))
    }
}

fn squared_residual_mean(out: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let total: f64 = out
        .iter()
        .zip(targets.iter())
        .map(|(o, t)| (o - t) * (o - t))
        .sum();
    total / out.nrows() as f64
}

/// Adam optimizer state with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
    pub fn new(net: &ScoreNetwork, lr: f64) -> Self {
        AdamState {
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `net`.
pub fn adam_step(net: &mut ScoreNetwork, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !grads.same_shape(net) || !state.first_moment.same_shape(net) || !state.second_moment.same_shape(net) {
        return Err(Error::Shape("gradient/optimizer state does not match network".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.lr;

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for l in 0..net.weights.len() {
        ndarray::Zip::from(&mut net.weights[l])
            .and(&grads.weights[l])
            .and(&mut state.first_moment.weights[l])
            .and(&mut state.second_moment.weights[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut net.biases[l])
            .and(&grads.biases[l])
            .and(&mut state.first_moment.biases[l])
            .and(&mut state.second_moment.biases[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Largest relative disagreement between [`ScoreNetwork::backward`] and central
/// differences of the loss, `|analytic - fd| / (|fd| + 1e-12)`.
///
/// Networks with more than 5000 parameters are checked on an evenly strided subset.
pub fn finite_diff_grad_check(net: &ScoreNetwork, batch: &Minibatch, h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, grads) = net.backward(batch)?;
    let total = net.param_count();
    let stride = total.div_ceil(FULL_CHECK_LIMIT).max(1);
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for k in (0..total).step_by(stride) {
        let orig = *probe.flat_param_mut(k);
        *probe.flat_param_mut(k) = orig + h;
        let up = probe.mse_loss(batch)?;
        *probe.flat_param_mut(k) = orig - h;
        let down = probe.mse_loss(batch)?;
        *probe.flat_param_mut(k) = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (grads.flat(k) - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(net: &ScoreNetwork, n: usize, seed: u64) -> Minibatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Array2::from_shape_simple_fn((n, net.input_dim()), || standard_normal(&mut rng));
        let targets = Array2::from_shape_simple_fn((n, net.dim_y()), || standard_normal(&mut rng));
        Minibatch { inputs, targets }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_network(&[5, 8, 1], 7).unwrap();
        let b = init_network(&[5, 8, 1], 7).unwrap();
        assert_eq!(a, b);
        assert!(a.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let c = init_network(&[5, 8, 1], 8).unwrap();
        assert_ne!(a.weights(), c.weights());
        let limit = (6.0_f64 / 5.0).sqrt();
        assert!(a.weights()[0].iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_network(&[], 1), Err(Error::Config(_))));
        assert!(matches!(init_network(&[5], 1), Err(Error::Config(_))));
        assert!(matches!(init_network(&[5, 0, 1], 1), Err(Error::Config(_))));
        assert!(matches!(init_network(&[1, 4, 1], 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_output_last_bias() {
        let mut net = init_network(&[4, 6, 2], 1).unwrap();
        for w in net.weights.iter_mut() {
            w.fill(0.0);
        }
        net.biases[1] = array![0.25, -3.0];
        for (t, y, x) in [(0.1, [1.0, 2.0], [5.0]), (4.0, [-9.0, 0.0], [-1.0])] {
            assert_eq!(net.forward(t, &y, &x).unwrap(), vec![0.25, -3.0]);
        }
    }

    #[test]
    fn identity_on_y_slice() {
        let net = ScoreNetwork::from_parts(vec![array![[0.0, 1.0]]], vec![array![0.0]]).unwrap();
        assert_eq!(net.forward(0.0, &[2.0], &[]).unwrap(), vec![2.0]);
    }

    #[test]
    fn clamp_makes_large_inputs_equal() {
        let net = init_network(&[3, 16, 16, 1], 3).unwrap().with_input_clamp(1.0).unwrap();
        let a = net.forward(0.4, &[5.0], &[0.3]).unwrap();
        let b = net.forward(0.4, &[1.0], &[0.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_shapes_and_nan() {
        let net = init_network(&[3, 4, 1], 0).unwrap();
        assert!(matches!(net.forward(0.1, &[1.0, 2.0], &[]), Err(Error::Shape(_))));
        assert!(matches!(net.forward(f64::NAN, &[1.0], &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn output_bound_respected() {
        let net = init_network(&[4, 32, 2], 5).unwrap().with_output_bound(0.5).unwrap();
        let batch = random_batch(&net, 64, 9);
        let scaled = batch.inputs.mapv(|v| v * 50.0);
        let out = net.forward_batch(scaled.view()).unwrap();
        for row in out.rows() {
            assert!(row.dot(&row).sqrt() <= 0.5 + 1e-15);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let net = init_network(&[4, 8, 8, 2], 11).unwrap();
        let mut batch = random_batch(&net, 5, 1);
        batch.targets = net.forward_batch(batch.inputs.view()).unwrap();
        let (loss, grads) = net.backward(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn single_layer_gradient_matches_hand_formula() {
        let w = array![[0.5, -1.0, 2.0]];
        let net = ScoreNetwork::from_parts(vec![w.clone()], vec![array![0.0]]).unwrap();
        let u = array![0.3, 1.5, -0.7];
        let v = 0.9;
        let batch = Minibatch {
            inputs: u.clone().insert_axis(Axis(0)),
            targets: array![[v]],
        };
        let (_, grads) = net.backward(&batch).unwrap();
        let residual = w.row(0).dot(&u) - v;
        for j in 0..3 {
            assert!((grads.weights[0][[0, j]] - 2.0 * residual * u[j]).abs() < 1e-14);
        }
        assert!((grads.biases[0][0] - 2.0 * residual).abs() < 1e-14);
    }

    #[test]
    fn backward_rejects_empty_batch() {
        let net = init_network(&[3, 4, 1], 0).unwrap();
        let batch = Minibatch {
            inputs: Array2::zeros((0, 3)),
            targets: Array2::zeros((0, 1)),
        };
        assert!(matches!(net.backward(&batch), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_does_not_mutate() {
        let net = init_network(&[4, 8, 2], 2).unwrap();
        let before = net.clone();
        let batch = random_batch(&net, 3, 4);
        net.backward(&batch).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let net = init_network(&[4, 2], 13).unwrap();
        let batch = random_batch(&net, 6, 2);
        let err = finite_diff_grad_check(&net, &batch, 1e-5).unwrap();
        assert!(err < 1e-8, "linear grad error {err}");
    }

    #[test]
    fn grad_check_bounded_output() {
        let net = init_network(&[4, 6, 2], 21).unwrap().with_output_bound(0.3).unwrap();
        let mut batch = random_batch(&net, 4, 3);
        batch.inputs.mapv_inplace(|v| v * 3.0);
        let err = finite_diff_grad_check(&net, &batch, 1e-6).unwrap();
        assert!(err < 1e-4, "bounded grad error {err}");
    }

    #[test]
    fn grad_check_rejects_zero_step() {
        let net = init_network(&[3, 2, 1], 0).unwrap();
        let batch = random_batch(&net, 2, 0);
        assert!(matches!(finite_diff_grad_check(&net, &batch, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = init_network(&[4, 8, 1], 3).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, 1e-3);
        let grads = Gradients::zeros_like(&net);
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut net = ScoreNetwork::from_parts(vec![array![[0.0, 0.0]]], vec![array![0.0]]).unwrap();
        let mut state = AdamState::new(&net, 0.1);
        let mut grads = Gradients::zeros_like(&net);
        grads.biases[0][0] = 1.0;
        adam_step(&mut net, &grads, &mut state).unwrap();
        assert!((net.biases()[0][0] + 0.1).abs() < 1e-8);
        assert_eq!(net.weights()[0][[0, 0]], 0.0);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut net = init_network(&[4, 8, 1], 3).unwrap();
        let other = init_network(&[4, 6, 1], 3).unwrap();
        let mut state = AdamState::new(&net, 1e-3);
        let grads = Gradients::zeros_like(&other);
        assert!(matches!(adam_step(&mut net, &grads, &mut state), Err(Error::Shape(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let net = init_network(&[5, 7, 3, 2], 99)
            .unwrap()
            .with_input_clamp(2.5)
            .unwrap()
            .with_output_bound(4.0)
            .unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: ScoreNetwork = serde_json::from_str(&text).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn json_rejects_unknown_keys_and_bad_shapes() {
        let bad = r#"{"layer_dims":[2,1],"weights":[[1.0,2.0]],"biases":[[0.0]],"extra":1}"#;
        assert!(serde_json::from_str::<ScoreNetwork>(bad).is_err());
        let ragged = r#"{"layer_dims":[2,1],"weights":[[1.0]],"biases":[[0.0]]}"#;
        assert!(serde_json::from_str::<ScoreNetwork>(ragged).is_err());
    }
}
