use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Target, LN_2PI};
use crate::autodiff::{logsumexp, Tensor};
use crate::error::{Error, Result};

/// One Gaussian component, stored through the Cholesky factor of its covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    chol: Vec<f64>,
    log_coef: f64,
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if v <= 0.0 || !v.is_finite() {
                    return None;
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Some(l)
}

impl Component {
    pub fn new(weight: f64, mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.len() != d * d {
            return Err(Error::InvalidArgument("covariance must be d x d".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument("covariance must be symmetric".into()));
                }
            }
        }
        let chol = cholesky(&covariance, d)
            .ok_or_else(|| Error::InvalidArgument("covariance must be positive definite".into()))?;
        let log_det: f64 = (0..d).map(|i| 2.0 * chol[i * d + i].ln()).sum();
        Ok(Component {
            weight,
            log_coef: weight.ln() - 0.5 * (d as f64 * LN_2PI + log_det),
            mean,
            covariance,
            chol,
        })
    }

    /// Whitened offset `L⁻¹ (x - μ)`.
    fn whiten(&self, x: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        for i in 0..d {
            let s: f64 = (0..i).map(|k| self.chol[i * d + k] * out[k]).sum();
            out[i] = (x[i] - self.mean[i] - s) / self.chol[i * d + i];
        }
    }

    /// `Σ⁻¹ (x - μ)` from the whitened offset, via `L⁻ᵀ y`.
    fn precision_times(&self, y: &[f64], out: &mut [f64]) {
        let d = self.mean.len();
        for i in (0..d).rev() {
            let s: f64 = (i + 1..d).map(|k| self.chol[k * d + i] * out[k]).sum();
            out[i] = (y[i] - s) / self.chol[i * d + i];
        }
    }
}

/// Finite Gaussian mixture with exact density and sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureOfGaussians {
    dim: usize,
    components: Vec<Component>,
}

impl MixtureOfGaussians {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::InvalidArgument("mixture needs at least one component".into()))?;
        if components.iter().any(|c| c.mean.len() != dim) {
            return Err(Error::InvalidArgument("components differ in dimension".into()));
        }
        if components.iter().any(|c| !(c.weight > 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(MixtureOfGaussians { dim, components })
    }

    /// `k` equal-weight components with covariance `variance · I` and means
    /// drawn uniformly from `[-half_width, half_width]^dim`.
    pub fn random_layout(dim: usize, k: usize, half_width: f64, variance: f64, seed: u64) -> Result<Self> {
        if k == 0 || !(half_width > 0.0) {
            return Err(Error::InvalidArgument("mixture layout needs k >= 1 and half_width > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cov = vec![0.0; dim * dim];
        for i in 0..dim {
            cov[i * dim + i] = variance;
        }
        let comps = (0..k)
            .map(|_| {
                let mean = (0..dim).map(|_| rng.random_range(-half_width..=half_width)).collect();
                Component::new(1.0 / k as f64, mean, cov.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(comps)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    fn component_logs(&self, x: &[f64], scratch: &mut [f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.whiten(x, scratch);
                c.log_coef - 0.5 * scratch.iter().map(|v| v * v).sum::<f64>()
            })
            .collect()
    }
}

impl Target for MixtureOfGaussians {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_prob(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.dim];
        logsumexp(&self.component_logs(x, &mut scratch))
    }

    fn log_prob_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut y = vec![0.0; d];
        let mut py = vec![0.0; d];
        let logs = self.component_logs(x, &mut y);
        let total = logsumexp(&logs);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (c, l) in self.components.iter().zip(&logs) {
            let r = (l - total).exp();
            if r == 0.0 {
                continue;
            }
            c.whiten(x, &mut y);
            c.precision_times(&y, &mut py);
            for (g, v) in grad.iter_mut().zip(&py) {
                *g -= r * v;
            }
        }
        total
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Option<Tensor> {
        let d = self.dim;
        let pick = WeightedIndex::new(self.components.iter().map(|c| c.weight)).ok()?;
        let mut data = Vec::with_capacity(n * d);
        let mut eps = vec![0.0; d];
        for _ in 0..n {
            let c = &self.components[pick.sample(rng)];
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            for i in 0..d {
                let s: f64 = (0..=i).map(|k| c.chol[i * d + k] * eps[k]).sum();
                data.push(c.mean[i] + s);
            }
        }
        Some(Tensor::matrix(n, d, data))
    }

    fn modes(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    fn pair_log_marginal(&self, i: usize, j: usize, xi: f64, xj: f64) -> Option<f64> {
        if self.dim == 2 && i == 0 && j == 1 {
            Some(self.log_prob(&[xi, xj]))
        } else {
            None
        }
    }
}
