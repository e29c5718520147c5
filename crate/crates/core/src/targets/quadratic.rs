use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::MixtureOfGaussians;

/// `f(x) = aᵀ(x − 2b) + 2 (x − 2b)ᵀ C (x − 2b)` with `a`, `b`, `C` drawn once
/// from a unit Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTestFunction {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Row-major `d × d`.
    pub c: Vec<f64>,
}

impl QuadraticTestFunction {
    pub fn sample(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let a = draw(dim);
        let b = draw(dim);
        let c = draw(dim * dim);
        QuadraticTestFunction { a, b, c }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    fn quad(&self, u: &[f64], v: &[f64]) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| u[i] * self.c[i * d + j] * v[j]).sum::<f64>())
            .sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let u: Vec<f64> = x.iter().zip(&self.b).map(|(xi, bi)| xi - 2.0 * bi).collect();
        let lin: f64 = self.a.iter().zip(&u).map(|(a, u)| a * u).sum();
        lin + 2.0 * self.quad(&u, &u)
    }

    /// Closed-form `E_p[f]` under a Gaussian mixture.
    pub fn expectation_under(&self, mog: &MixtureOfGaussians) -> f64 {
        let d = self.dim();
        mog.components()
            .iter()
            .map(|comp| {
                let u: Vec<f64> = comp.mean.iter().zip(&self.b).map(|(m, b)| m - 2.0 * b).collect();
                let lin: f64 = self.a.iter().zip(&u).map(|(a, u)| a * u).sum();
                let trace: f64 = (0..d)
                    .map(|i| (0..d).map(|j| self.c[i * d + j] * comp.covariance[j * d + i]).sum::<f64>())
                    .sum();
                comp.weight * (lin + 2.0 * (trace + self.quad(&u, &u)))
            })
            .sum()
    }
}
