//! Closed-form and brute-force references: analytic drifts of Gaussian, mixture
//! and bounded targets under the OU forward process, the Gaussian KL divergence,
//! a Kolmogorov–Smirnov distance, a numeric Lipschitz probe of the drift and a
//! Monte-Carlo check of the score-matching loss decomposition.
//!
//! For a target `p_0`, the diffused law is `p_t(y) = \int N(y; e^{-t} y0, 1 - e^{-2t}) p_0(y0) dy0`
//! and the drift is `b(t, y) = y + 2 \nabla log p_t(y)`.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{dsm_target, ou_coefficients, perturb};
use crate::error::{Error, Result};
use crate::nn::standard_normal;
use crate::numeric::{log_sum_exp, mean_and_se};
use crate::stats::normal_cdf;

const LN_2PI: f64 = 1.8378770664093453;

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Argument(format!("oracle drift needs t > 0, got {t}")));
    }
    Ok(())
}

/// Multivariate normal `N(mean, cov)` with a symmetric positive-definite covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub cov: Array2<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, cov: Array2<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.dim() != (d, d) {
            return Err(Error::Shape(format!("mean has {d} coordinates, covariance is {:?}", cov.dim())));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 {
                    return Err(Error::Argument("covariance is not symmetric".into()));
                }
            }
        }
        let params = GaussianParams { mean, cov };
        params.cholesky()?;
        Ok(params)
    }

    pub fn univariate(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean], Array2::from_elem((1, 1), var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.cov[[i, j]])
    }

    fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        self.cov_matrix()
            .cholesky()
            .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))
    }

    fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
        2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(Error::Shape("point dimension does not match".into()));
        }
        let chol = self.cholesky()?;
        let diff = DVector::from_iterator(self.dim(), y.iter().zip(&self.mean).map(|(a, b)| a - b));
        let white = chol.l().solve_lower_triangular(&diff).expect("positive diagonal");
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + Self::log_det(&chol) + white.norm_squared()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let chol = self.cholesky()?;
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| standard_normal(rng)));
        let x = chol.l() * z;
        Ok(x.iter().zip(&self.mean).map(|(a, b)| a + b).collect())
    }

    /// `n` draws as rows, factorizing the covariance once.
    pub fn sample_rows<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let l = self.cholesky()?.l();
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut z = vec![0.0; d];
        for mut row in out.rows_mut() {
            z.iter_mut().for_each(|v| *v = standard_normal(rng));
            for i in 0..d {
                row[i] = self.mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
            }
        }
        Ok(out)
    }

    /// Log-density of every row of `points`, factorizing the covariance once.
    pub fn log_density_rows(&self, points: ndarray::ArrayView2<f64>) -> Result<Vec<f64>> {
        let d = self.dim();
        if points.ncols() != d {
            return Err(Error::Shape("point dimension does not match".into()));
        }
        let chol = self.cholesky()?;
        let l = chol.l();
        let constant = -0.5 * (d as f64 * LN_2PI + Self::log_det(&chol));
        let mut white = vec![0.0; d];
        Ok(points
            .rows()
            .into_iter()
            .map(|row| {
                for i in 0..d {
                    let partial: f64 = (0..i).map(|j| l[(i, j)] * white[j]).sum();
                    white[i] = (row[i] - self.mean[i] - partial) / l[(i, i)];
                }
                constant - 0.5 * white.iter().map(|w| w * w).sum::<f64>()
            })
            .collect())
    }

    fn diagonal(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                if i != j && self.cov[[i, j]] != 0.0 {
                    return Err(Error::Argument("analytic drift needs a diagonal covariance".into()));
                }
            }
        }
        Ok((0..d).map(|i| self.cov[[i, i]]).collect())
    }
}

/// Drift of a Gaussian (diagonal) target: per coordinate
/// `b = y - 2 (y - e^{-t} mu) / v_t` with `v_t = e^{-2t} sigma^2 + 1 - e^{-2t}`.
pub fn gaussian_drift(target: &GaussianParams, t: f64, y: &[f64]) -> Result<Vec<f64>> {
    check_time(t)?;
    if y.len() != target.dim() {
        return Err(Error::Shape("state dimension does not match target".into()));
    }
    let var = target.diagonal()?;
    let (decay, noise) = ou_coefficients(t)?;
    Ok(y.iter()
        .zip(&target.mean)
        .zip(&var)
        .map(|((y, mu), s2)| {
            let v = decay * decay * s2 + noise;
            y - 2.0 * (y - decay * mu) / v
        })
        .collect())
}

/// Finite mixture of one-dimensional Gaussians given as `(mean, variance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTarget {
    pub weights: Vec<f64>,
    pub components: Vec<(f64, f64)>,
}

impl MixtureTarget {
    pub fn new(weights: Vec<f64>, components: Vec<(f64, f64)>) -> Result<Self> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(Error::Shape("mixture weights and components differ in length".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Argument("mixture weights must be positive".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Argument("mixture weights must sum to 1".into()));
        }
        if components.iter().any(|(m, v)| !(m.is_finite() && *v > 0.0)) {
            return Err(Error::Argument("mixture variances must be positive".into()));
        }
        Ok(MixtureTarget { weights, components })
    }

    /// Diffused components at time `t`: `(weight, e^{-t} mu, v_t)`.
    fn diffused(&self, t: f64) -> Result<Vec<(f64, f64, f64)>> {
        let (decay, noise) = if t == 0.0 { (1.0, 0.0) } else { ou_coefficients(t)? };
        Ok(self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, (m, s2))| (*w, decay * m, decay * decay * s2 + noise))
            .collect())
    }

    /// `log p_t(y)`; `t = 0` gives the target itself.
    pub fn log_density(&self, t: f64, y: f64) -> Result<f64> {
        let terms: Vec<f64> = self
            .diffused(t)?
            .into_iter()
            .map(|(w, m, v)| w.ln() - 0.5 * (LN_2PI + v.ln() + (y - m) * (y - m) / v))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.components)
            .map(|(w, (m, v))| w * normal_cdf((y - m) / v.sqrt()))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (m, v) = self.components[pick];
        m + v.sqrt() * standard_normal(rng)
    }
}

/// Mixture drift `y + 2 sum_k r_k(y) (-(y - e^{-t} mu_k) / v_{k,t})` with
/// responsibilities `r_k` computed in log space.
pub fn mixture_drift(target: &MixtureTarget, t: f64, y: f64) -> Result<f64> {
    check_time(t)?;
    let comps = target.diffused(t)?;
    let logs: Vec<f64> = comps
        .iter()
        .map(|(w, m, v)| w.ln() - 0.5 * (v.ln() + (y - m) * (y - m) / v))
        .collect();
    let norm = log_sum_exp(&logs);
    let score: f64 = comps
        .iter()
        .zip(&logs)
        .map(|((_, m, v), l)| (l - norm).exp() * (-(y - m) / v))
        .sum();
    Ok(y + 2.0 * score)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = nf * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Density supported on `[0, 1]`, integrated with fixed-order Gauss–Legendre.
#[derive(Clone)]
pub struct BoundedDensity1D {
    density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl std::fmt::Debug for BoundedDensity1D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundedDensity1D").field("nodes", &self.nodes.len()).finish()
    }
}

pub const DEFAULT_QUADRATURE_NODES: usize = 128;

impl BoundedDensity1D {
    /// Checks non-negativity at the nodes and unit mass within 1e-6.
    pub fn new<F>(density: F, quadrature_nodes: usize) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if quadrature_nodes < 16 {
            return Err(Error::Config(format!("need at least 16 quadrature nodes, got {quadrature_nodes}")));
        }
        let (x, w) = gauss_legendre(quadrature_nodes);
        let mut nodes = Vec::with_capacity(quadrature_nodes);
        let mut log_weights = Vec::with_capacity(quadrature_nodes);
        let mut mass = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            let u = 0.5 * (xi + 1.0);
            let p = density(u);
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::Argument(format!("density is negative or non-finite at {u}")));
            }
            mass += 0.5 * wi * p;
            nodes.push(u);
            log_weights.push((0.5 * wi * p).ln());
        }
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::Argument(format!("density integrates to {mass}, not 1")));
        }
        Ok(BoundedDensity1D {
            density: Arc::new(density),
            nodes,
            log_weights,
        })
    }

    pub fn uniform() -> Self {
        Self::new(|_| 1.0, DEFAULT_QUADRATURE_NODES).expect("uniform density is valid")
    }

    pub fn quadrature_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn density(&self, y: f64) -> f64 {
        (self.density)(y)
    }

    /// `E[Y0 | Y_t = y]` under the diffused bounded target.
    pub fn posterior_mean(&self, t: f64, y: f64) -> Result<f64> {
        check_time(t)?;
        let (decay, var) = ou_coefficients(t)?;
        let logs: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.log_weights)
            .map(|(u, lw)| lw - (y - decay * u).powi(2) / (2.0 * var))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Numerical("posterior weights underflow".into()));
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (u, l) in self.nodes.iter().zip(&logs) {
            let w = (l - max).exp();
            num += w * u;
            den += w;
        }
        Ok(num / den)
    }
}

/// Drift of a bounded target by quadrature of the posterior mean:
/// `b = y + 2 (e^{-t} E[Y0 | y] - y) / (1 - e^{-2t})`.
pub fn quadrature_drift(target: &BoundedDensity1D, t: f64, y: f64) -> Result<f64> {
    let mean = target.posterior_mean(t, y)?;
    let (decay, var) = ou_coefficients(t)?;
    Ok(y + 2.0 * (decay * mean - y) / var)
}

/// `KL(p || q) = 0.5 [ (mu_p - mu_q)^T S_q^{-1} (mu_p - mu_q) - log|S_q^{-1} S_p| + tr(S_q^{-1} S_p) - d ]`.
pub fn kl_gaussians(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    let d = p.dim();
    if q.dim() != d {
        return Err(Error::Shape("KL between Gaussians of different dimension".into()));
    }
    let cp = p.cholesky()?;
    let cq = q.cholesky()?;
    let diff = DVector::from_iterator(d, p.mean.iter().zip(&q.mean).map(|(a, b)| a - b));
    let maha = cq.solve(&diff).dot(&diff);
    let trace = cq.solve(&p.cov_matrix()).trace();
    let log_ratio = GaussianParams::log_det(&cp) - GaussianParams::log_det(&cq);
    Ok((0.5 * (maha - log_ratio + trace - d as f64)).max(0.0))
}

/// Two-sided Kolmogorov–Smirnov distance `sup |F_n - F|` against a reference CDF.
pub fn ks_distance(samples: &[f64], reference_cdf: &dyn Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("KS distance needs at least one sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, x) in sorted.iter().enumerate() {
        let f = reference_cdf(*x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// Largest central-difference `|db/dy|` over a `grid_size x grid_size` lattice
/// of `t_range x y_range`; the step is `1e-4 (1 + |y|)`.
pub fn lipschitz_probe(
    drift: &dyn Fn(f64, f64) -> Result<f64>,
    t_range: (f64, f64),
    y_range: (f64, f64),
    grid_size: usize,
) -> Result<f64> {
    if grid_size < 2 {
        return Err(Error::Argument("probe grid needs at least 2 points per axis".into()));
    }
    if !(t_range.0 > 0.0 && t_range.0 <= t_range.1) || !(y_range.0 <= y_range.1) {
        return Err(Error::Argument("probe ranges must be ordered with t > 0".into()));
    }
    let lin = |(a, b): (f64, f64), k: usize| a + (b - a) * k as f64 / (grid_size - 1) as f64;
    let mut worst = 0.0_f64;
    for i in 0..grid_size {
        let t = lin(t_range, i);
        for j in 0..grid_size {
            let y = lin(y_range, j);
            let h = 1e-4 * (1.0 + y.abs());
            let slope = (drift(t, y + h)? - drift(t, y - h)?) / (2.0 * h);
            if !slope.is_finite() {
                return Err(Error::Numerical(format!("non-finite drift slope at t = {t}, y = {y}")));
            }
            worst = worst.max(slope.abs());
        }
    }
    Ok(worst)
}

/// Two independent Monte-Carlo estimates that should agree when the
/// score-matching loss differs from the drift L2 error only by a constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGapEstimate {
    /// `L(s) - L(b)` from paired denoising score-matching residuals.
    pub gap: f64,
    pub gap_se: f64,
    /// `E ||s - b||^2` over `t ~ U[T0, T]` and `Y_t ~ p_t`.
    pub l2: f64,
    pub l2_se: f64,
}

impl LossGapEstimate {
    pub fn combined_se(&self) -> f64 {
        (self.gap_se * self.gap_se + self.l2_se * self.l2_se).sqrt()
    }
}

pub type VectorField<'a> = &'a dyn Fn(f64, &[f64]) -> Result<Vec<f64>>;

pub fn loss_gap_check<R: Rng + ?Sized>(
    candidate: VectorField<'_>,
    true_drift: VectorField<'_>,
    target_sampler: &mut dyn FnMut(&mut R) -> Vec<f64>,
    t0: f64,
    t_end: f64,
    mc_size: usize,
    rng: &mut R,
) -> Result<LossGapEstimate> {
    if mc_size < 1000 {
        return Err(Error::Argument(format!("mc_size must be at least 1000, got {mc_size}")));
    }
    if !(t0 > 0.0 && t0 < t_end) {
        return Err(Error::Config(format!("need 0 < T0 < T, got T0 = {t0}, T = {t_end}")));
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut draw = |rng: &mut R| -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let y0 = target_sampler(rng);
        let t = rng.random_range(t0..=t_end);
        let z: Vec<f64> = (0..y0.len()).map(|_| standard_normal(rng)).collect();
        let yt = perturb(&y0, t, &z)?;
        let target = dsm_target(&y0, t, &z, t0)?;
        Ok((t, y0, yt, target))
    };

    let mut gaps = Vec::with_capacity(mc_size);
    for _ in 0..mc_size {
        let (t, _, yt, target) = draw(rng)?;
        let s = candidate(t, &yt)?;
        let b = true_drift(t, &yt)?;
        gaps.push(sq(&s, &target) - sq(&b, &target));
    }
    let mut l2 = Vec::with_capacity(mc_size);
    for _ in 0..mc_size {
        let (t, _, yt, _) = draw(rng)?;
        l2.push(sq(&candidate(t, &yt)?, &true_drift(t, &yt)?));
    }
    let (gap, gap_se) = mean_and_se(&gaps);
    let (l2, l2_se) = mean_and_se(&l2);
    if ![gap, gap_se, l2, l2_se].iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("loss-gap estimates are not finite".into()));
    }
    Ok(LossGapEstimate { gap, gap_se, l2, l2_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn gaussian_drift_examples() {
        let std = GaussianParams::univariate(0.0, 1.0).unwrap();
        for (t, y) in [(0.01, 1.3), (1.0, -2.0), (4.0, 0.5)] {
            assert!((gaussian_drift(&std, t, &[y]).unwrap()[0] + y).abs() < 1e-12);
        }
        let shifted = GaussianParams::univariate(1.0, 1.0).unwrap();
        assert!((gaussian_drift(&shifted, LN2, &[0.0]).unwrap()[0] - 1.0).abs() < 1e-14);
        let narrow = GaussianParams::univariate(3.0, 0.1).unwrap();
        assert!((gaussian_drift(&narrow, 40.0, &[0.7]).unwrap()[0] + 0.7).abs() < 1e-12);
        assert!(gaussian_drift(&std, 0.0, &[0.0]).is_err());
        let full = GaussianParams::new(vec![0.0, 0.0], array![[1.0, 0.2], [0.2, 1.0]]).unwrap();
        assert!(gaussian_drift(&full, 1.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gaussian_params_validation() {
        assert!(GaussianParams::new(vec![0.0, 0.0], array![[1.0, 0.5], [0.4, 1.0]]).is_err());
        assert!(matches!(
            GaussianParams::new(vec![0.0, 0.0], array![[1.0, 1.0], [1.0, 1.0]]),
            Err(Error::Singular(_))
        ));
    }

    fn bimodal() -> MixtureTarget {
        MixtureTarget::new(vec![0.5, 0.5], vec![(-1.0, 0.25), (1.0, 0.25)]).unwrap()
    }

    #[test]
    fn mixture_drift_reductions() {
        let single = MixtureTarget::new(vec![1.0], vec![(0.7, 0.4)]).unwrap();
        let g = GaussianParams::univariate(0.7, 0.4).unwrap();
        for (t, y) in [(0.1, 0.3), (1.5, -2.0)] {
            let a = mixture_drift(&single, t, y).unwrap();
            let b = gaussian_drift(&g, t, &[y]).unwrap()[0];
            assert!((a - b).abs() < 1e-12);
        }
        for t in [0.05, 0.5, 3.0] {
            assert!(mixture_drift(&bimodal(), t, 0.0).unwrap().abs() < 1e-14);
        }
        assert!(mixture_drift(&bimodal(), -0.1, 0.0).is_err());
    }

    #[test]
    fn mixture_drift_matches_log_density_derivative() {
        let target = bimodal();
        for t in [0.05, 0.5, 1.0, 2.5] {
            for k in -12..=12 {
                let y = k as f64 * 0.25;
                let h = 1e-5;
                let fd = (target.log_density(t, y + h).unwrap() - target.log_density(t, y - h).unwrap()) / (2.0 * h);
                let expected = y + 2.0 * fd;
                let got = mixture_drift(&target, t, y).unwrap();
                assert!((got - expected).abs() < 1e-6, "t {t} y {y}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        // Exact for degree <= 19.
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((integral - 2.0 / 19.0).abs() < 1e-14);
        let (x1, w1) = gauss_legendre(1);
        assert_eq!((x1[0], w1[0]), (0.0, 2.0));
    }

    fn truncated_normal_mean(mu: f64, s: f64) -> f64 {
        let (a, b) = (-mu / s, (1.0 - mu) / s);
        let phi = |v: f64| (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
        mu + s * (phi(a) - phi(b)) / (normal_cdf(b) - normal_cdf(a))
    }

    #[test]
    fn uniform_posterior_matches_truncated_normal() {
        let uniform = BoundedDensity1D::uniform();
        for t in [0.1, 0.3, 1.0, 2.0] {
            for y in [-0.5, 0.0, 0.2, 0.6, 1.1] {
                let (decay, var) = ou_coefficients(t).unwrap();
                let expected = truncated_normal_mean(y / decay, var.sqrt() / decay);
                let got = uniform.posterior_mean(t, y).unwrap();
                assert!((got - expected).abs() < 1e-7, "t {t} y {y}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn uniform_symmetry_fixed_point() {
        let uniform = BoundedDensity1D::uniform();
        for t in [0.2, 0.7, 3.0] {
            let y = (-t as f64).exp() * 0.5;
            assert!((quadrature_drift(&uniform, t, y).unwrap() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        let coarse = BoundedDensity1D::new(|u| 6.0 * u * (1.0 - u), 128).unwrap();
        let fine = BoundedDensity1D::new(|u| 6.0 * u * (1.0 - u), 256).unwrap();
        for t in [0.2, 0.5, 1.0] {
            for y in [-1.0, 0.0, 0.4, 0.9, 2.0] {
                let a = quadrature_drift(&coarse, t, y).unwrap();
                let b = quadrature_drift(&fine, t, y).unwrap();
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn bounded_density_validation() {
        assert!(BoundedDensity1D::new(|_| 2.0, 64).is_err());
        assert!(BoundedDensity1D::new(|_| 1.0, 8).is_err());
        assert!(BoundedDensity1D::new(|u| u - 0.5 + 1.0 - 0.5, 64).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = GaussianParams::new(vec![1.0, 0.0], array![[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let q = GaussianParams::new(vec![0.0, 0.0], array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((kl_gaussians(&p, &q).unwrap() - 0.5 * (1.0 - 4f64.ln() + 4.0 - 2.0)).abs() < 1e-12);
        assert!((kl_gaussians(&p, &q).unwrap() - 0.80685).abs() < 1e-5);
        assert!(kl_gaussians(&p, &p).unwrap().abs() < 1e-12);
        let a = GaussianParams::univariate(1.0, 1.0).unwrap();
        let b = GaussianParams::univariate(0.0, 4.0).unwrap();
        assert!((kl_gaussians(&a, &b).unwrap() - 0.44315).abs() < 1e-5);
        assert!(kl_gaussians(&a, &p).is_err());
    }

    #[test]
    fn batched_density_matches_single() {
        let g = GaussianParams::new(vec![0.5, -1.0], array![[2.0, 0.6], [0.6, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = g.sample_rows(50, &mut rng).unwrap();
        let batch = g.log_density_rows(rows.view()).unwrap();
        for (row, v) in rows.rows().into_iter().zip(batch) {
            assert!((g.log_density(&row.to_vec()).unwrap() - v).abs() < 1e-12);
        }
        let big = g.sample_rows(200_000, &mut rng).unwrap();
        let mean0 = big.column(0).mean().unwrap();
        let cov01 = big.column(0).iter().zip(big.column(1)).map(|(a, b)| (a - 0.5) * (b + 1.0)).sum::<f64>() / 200_000.0;
        assert!((mean0 - 0.5).abs() < 0.02 && (cov01 - 0.6).abs() < 0.03);
    }

    #[test]
    fn ks_examples() {
        let n = 999;
        let quantile_sample: Vec<f64> = (1..=n).map(|i| i as f64 / (n as f64 + 1.0)).collect();
        let d = ks_distance(&quantile_sample, &|u: f64| u.clamp(0.0, 1.0)).unwrap();
        assert!(d <= 1.0 / n as f64 + 1e-12);
        let far = vec![-50.0; 10];
        assert!(ks_distance(&far, &normal_cdf).unwrap() > 0.999);
        assert!(ks_distance(&[], &normal_cdf).is_err());
    }

    #[test]
    fn ks_of_own_draws_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws: Vec<f64> = (0..100_000).map(|_| standard_normal(&mut rng)).collect();
        assert!(ks_distance(&draws, &normal_cdf).unwrap() < 0.006);
    }

    #[test]
    fn lipschitz_probe_linear() {
        let slope = lipschitz_probe(&|_t, y| Ok(-y), (0.1, 2.0), (-3.0, 3.0), 7).unwrap();
        assert!((slope - 1.0).abs() < 1e-8);
        assert!(lipschitz_probe(&|_t, y| Ok(-y), (0.1, 2.0), (-3.0, 3.0), 1).is_err());
    }

    #[test]
    fn lipschitz_probe_shrinks_with_t0() {
        let uniform = BoundedDensity1D::uniform();
        let drift = |t: f64, y: f64| quadrature_drift(&uniform, t, y);
        let mut previous = f64::INFINITY;
        for t0 in [0.1, 0.2, 0.3, 0.4, 0.5] {
            let probe = lipschitz_probe(&drift, (t0, 3.0), (-3.0, 3.0), 41).unwrap();
            assert!(probe <= 2.0 / (t0 * t0));
            assert!(probe <= previous * (1.0 + 1e-6));
            previous = probe;
        }
    }

    #[test]
    fn loss_gap_identical_and_offset() {
        let target = GaussianParams::univariate(0.5, 0.25).unwrap();
        let b = |t: f64, y: &[f64]| gaussian_drift(&target, t, y);
        let mut sampler = |rng: &mut ChaCha8Rng| target.sample(rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let same = loss_gap_check(&b, &b, &mut sampler, 0.05, 2.0, 2000, &mut rng).unwrap();
        assert_eq!((same.gap, same.l2), (0.0, 0.0));

        let shifted = |t: f64, y: &[f64]| Ok(gaussian_drift(&target, t, y)?.iter().map(|v| v + 0.5).collect());
        let est = loss_gap_check(&shifted, &b, &mut sampler, 0.05, 2.0, 20_000, &mut rng).unwrap();
        assert!((est.l2 - 0.25).abs() < 1e-12);
        assert!((est.gap - 0.25).abs() < 3.0 * est.combined_se());
        assert!(loss_gap_check(&b, &b, &mut sampler, 0.05, 2.0, 10, &mut rng).is_err());
    }
}
