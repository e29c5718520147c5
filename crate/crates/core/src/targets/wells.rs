use super::Target;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Boltzmann density `p̃(x) = exp(−u(x))` with
/// `u(x₁, x₂) = a·x₁⁴ + b·x₁² + c·x₁ + ½·x₂²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoubleWell {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl DoubleWell {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && b < 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "double well needs a > 0 and b < 0 (got a={a}, b={b}, c={c})"
            )));
        }
        Ok(DoubleWell { a, b, c })
    }

    pub fn energy(&self, x1: f64, x2: f64) -> f64 {
        self.quartic(x1) + 0.5 * x2 * x2
    }

    /// The `x₁` part of the energy.
    pub fn quartic(&self, x1: f64) -> f64 {
        let s = x1 * x1;
        self.a * s * s + self.b * s + self.c * x1
    }

    pub fn quartic_derivative(&self, x1: f64) -> f64 {
        4.0 * self.a * x1 * x1 * x1 + 2.0 * self.b * x1 + self.c
    }

    /// The two minimizers `(m₋, m₊)` of the quartic, refined by Newton's method
    /// from the minimizers of the `c = 0` polynomial.
    pub fn minima(&self) -> (f64, f64) {
        let start = (-self.b / (2.0 * self.a)).sqrt();
        let refine = |mut x: f64| {
            for _ in 0..100 {
                let g = self.quartic_derivative(x);
                let h = 12.0 * self.a * x * x + 2.0 * self.b;
                let step = g / h;
                x -= step;
                if step.abs() < 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
            x
        };
        (refine(-start), refine(start))
    }

    /// Checked single-point `log p̃`.
    pub fn log_prob_unnorm(&self, x: &[f64]) -> Result<f64> {
        if x.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: x.len(),
            });
        }
        Ok(-self.energy(x[0], x[1]))
    }
}

impl Target for DoubleWell {
    fn dim(&self) -> usize {
        2
    }

    fn log_prob(&self, x: &[f64]) -> f64 {
        -self.energy(x[0], x[1])
    }

    fn log_prob_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = -self.quartic_derivative(x[0]);
        grad[1] = -x[1];
        self.log_prob(x)
    }

    fn pair_log_marginal(&self, i: usize, j: usize, xi: f64, xj: f64) -> Option<f64> {
        (i == 0 && j == 1).then(|| -self.energy(xi, xj))
    }
}

/// Independent copies of a [`DoubleWell`] over coordinate pairs
/// `(x₁, x₂), (x₃, x₄), …`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManyWell {
    pub well: DoubleWell,
    pub blocks: usize,
}

impl ManyWell {
    pub fn new(well: DoubleWell, blocks: usize) -> Result<Self> {
        if blocks == 0 || blocks > 20 {
            return Err(Error::InvalidArgument("many well needs 1..=20 blocks".into()));
        }
        Ok(ManyWell { well, blocks })
    }

    /// Checked single-point `log p̃`.
    pub fn log_prob_unnorm(&self, x: &[f64]) -> Result<f64> {
        if x.len() != 2 * self.blocks {
            return Err(Error::DimensionMismatch {
                expected: 2 * self.blocks,
                got: x.len(),
            });
        }
        Ok(self.log_prob(x))
    }

    /// One point on every mode: `x₂ᵢ = 0` and `x₂ᵢ₋₁ ∈ {m₋, m₊}`; bit `i` of
    /// the row index selects `m₊` for block `i`.
    pub fn mode_test_set(&self) -> Tensor {
        let (lo, hi) = self.well.minima();
        let d = 2 * self.blocks;
        let n = 1usize << self.blocks;
        let mut data = vec![0.0; n * d];
        for k in 0..n {
            for i in 0..self.blocks {
                data[k * d + 2 * i] = if (k >> i) & 1 == 1 { hi } else { lo };
            }
        }
        Tensor::matrix(n, d, data)
    }
}

impl Target for ManyWell {
    fn dim(&self) -> usize {
        2 * self.blocks
    }

    fn log_prob(&self, x: &[f64]) -> f64 {
        x.chunks(2).map(|p| -self.well.energy(p[0], p[1])).sum()
    }

    fn log_prob_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut total = 0.0;
        for (p, g) in x.chunks(2).zip(grad.chunks_mut(2)) {
            total += self.well.log_prob_and_grad(p, g);
        }
        total
    }

    fn modes(&self) -> Vec<Vec<f64>> {
        self.mode_test_set().iter_rows().map(<[f64]>::to_vec).collect()
    }

    fn pair_log_marginal(&self, i: usize, j: usize, xi: f64, xj: f64) -> Option<f64> {
        if i >= self.dim() || j >= self.dim() || i == j {
            return None;
        }
        let marginal = |k: usize, v: f64| {
            if k % 2 == 0 {
                -self.well.quartic(v)
            } else {
                -0.5 * v * v
            }
        };
        Some(marginal(i, xi) + marginal(j, xj))
    }
}
