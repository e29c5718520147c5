//! Benchmark target densities.
//!
//! Every target exposes an (possibly unnormalized) log-density with its
//! gradient. Only targets that report [`Target::is_normalized`] may be used
//! where a normalizer matters; the Double and Many Well energies never do.

mod mog;
mod quadratic;
mod wells;

pub use mog::{Component, MixtureOfGaussians};
pub use quadratic::QuadraticTestFunction;
pub use wells::{DoubleWell, ManyWell};

use std::fmt::Debug;
use std::io::Write;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows evaluated per parallel task; each row is independent, so results do
/// not depend on the thread count.
const ROWS_PER_TASK: usize = 256;

pub trait Target: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// `log p̃(x)` for one point of length [`Target::dim`].
    fn log_prob(&self, x: &[f64]) -> f64;

    /// `log p̃(x)`, writing `∇ log p̃(x)` into `grad`.
    fn log_prob_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn is_normalized(&self) -> bool {
        false
    }

    /// Exact samples, when the target supports them.
    fn sample(&self, _n: usize, _rng: &mut dyn RngCore) -> Option<Tensor> {
        None
    }

    /// Locations of the target's modes, when known in closed form.
    fn modes(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }

    /// Unnormalized log-density of the marginal over coordinates `(i, j)`.
    fn pair_log_marginal(&self, _i: usize, _j: usize, _xi: f64, _xj: f64) -> Option<f64> {
        None
    }
}

fn check_batch(target: &dyn Target, x: &Tensor) -> Result<()> {
    match *x.shape() {
        [_, c] if c == target.dim() => Ok(()),
        [_, c] => Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: c,
        }),
        _ => Err(Error::InvalidArgument(format!("expected a [n, {}] batch", target.dim()))),
    }
}

/// Row-wise `log p̃`, rejecting a batch of the wrong width.
pub fn log_prob_batch(target: &dyn Target, x: &Tensor) -> Result<Vec<f64>> {
    check_batch(target, x)?;
    let mut out = vec![0.0; x.rows()];
    out.par_iter_mut()
        .with_min_len(ROWS_PER_TASK)
        .enumerate()
        .for_each(|(i, v)| *v = target.log_prob(x.row(i)));
    Ok(out)
}

/// Row-wise `log p̃` together with its gradient.
pub fn log_prob_and_grad_batch(target: &dyn Target, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    check_batch(target, x)?;
    let d = target.dim();
    let mut grad = Tensor::zeros(&[x.rows(), d]);
    let mut vals = vec![0.0; x.rows()];
    grad.data_mut()
        .par_chunks_mut(d)
        .zip(vals.par_iter_mut())
        .with_min_len(ROWS_PER_TASK)
        .enumerate()
        .for_each(|(i, (g, v))| *v = target.log_prob_and_grad(x.row(i), g));
    Ok((vals, grad))
}

/// Records `log p̃(x)` per row of a tape node, differentiable with respect to `x`.
pub fn log_prob_on(tape: &mut Tape, target: &dyn Target, x: Var) -> Result<Var> {
    let (vals, grad) = log_prob_and_grad_batch(target, tape.value(x))?;
    Ok(tape.row_function(x, vals, grad)?)
}

/// Isotropic Gaussian `N(mean, variance · I)`, normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    mean: Vec<f64>,
    variance: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if mean.is_empty() || !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidArgument("gaussian needs dim >= 1 and variance > 0".into()));
        }
        Ok(Gaussian { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        Gaussian {
            mean: vec![0.0; dim],
            variance: 1.0,
        }
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

impl Target for Gaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_prob(&self, x: &[f64]) -> f64 {
        let d = self.mean.len() as f64;
        let sq: f64 = x.iter().zip(&self.mean).map(|(a, m)| (a - m) * (a - m)).sum();
        -0.5 * sq / self.variance - 0.5 * d * (LN_2PI + self.variance.ln())
    }

    fn log_prob_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for ((g, a), m) in grad.iter_mut().zip(x).zip(&self.mean) {
            *g = -(a - m) / self.variance;
        }
        self.log_prob(x)
    }

    fn is_normalized(&self) -> bool {
        true
    }

    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Option<Tensor> {
        use rand::Rng;
        let sd = self.variance.sqrt();
        let d = self.mean.len();
        let data = (0..n * d)
            .map(|k| self.mean[k % d] + sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Some(Tensor::matrix(n, d, data))
    }

    fn modes(&self) -> Vec<Vec<f64>> {
        vec![self.mean.clone()]
    }

    fn pair_log_marginal(&self, i: usize, j: usize, xi: f64, xj: f64) -> Option<f64> {
        let (mi, mj) = (*self.mean.get(i)?, *self.mean.get(j)?);
        Some(-0.5 * ((xi - mi).powi(2) + (xj - mj).powi(2)) / self.variance)
    }
}

fn default_components() -> usize {
    20
}
fn default_half_width() -> f64 {
    20.0
}
fn default_component_variance() -> f64 {
    1.0
}
fn default_blocks() -> usize {
    8
}
fn default_quartic() -> f64 {
    1.0
}
fn default_quadratic() -> f64 {
    -6.0
}
fn default_linear() -> f64 {
    -0.5
}
fn default_gaussian_variance() -> f64 {
    1.0
}

/// Target selection as written in an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Equal-weight isotropic mixture with means uniform in `[-half_width, half_width]^dim`.
    Mog {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_half_width")]
        half_width: f64,
        #[serde(default = "default_component_variance")]
        component_variance: f64,
        layout_seed: u64,
        /// Seed for the quadratic test function's `a`, `b`, `C`.
        #[serde(default)]
        test_function_seed: u64,
    },
    DoubleWell {
        #[serde(default = "default_quartic")]
        a: f64,
        #[serde(default = "default_quadratic")]
        b: f64,
        #[serde(default = "default_linear")]
        c: f64,
    },
    ManyWell {
        #[serde(default = "default_blocks")]
        blocks: usize,
        #[serde(default = "default_quartic")]
        a: f64,
        #[serde(default = "default_quadratic")]
        b: f64,
        #[serde(default = "default_linear")]
        c: f64,
    },
    Gaussian {
        dim: usize,
        #[serde(default = "default_gaussian_variance")]
        variance: f64,
    },
}

/// A constructed target plus the problem-specific extras used by evaluation.
#[derive(Debug)]
pub struct Problem {
    pub target: Box<dyn Target>,
    pub mixture: Option<MixtureOfGaussians>,
    pub test_function: Option<QuadraticTestFunction>,
    pub many_well: Option<ManyWell>,
}

impl TargetSpec {
    pub fn build(&self) -> Result<Problem> {
        Ok(match *self {
            TargetSpec::Mog {
                components,
                half_width,
                component_variance,
                layout_seed,
                test_function_seed,
            } => {
                let mog = MixtureOfGaussians::random_layout(2, components, half_width, component_variance, layout_seed)?;
                let f = QuadraticTestFunction::sample(2, test_function_seed);
                Problem {
                    target: Box::new(mog.clone()),
                    mixture: Some(mog),
                    test_function: Some(f),
                    many_well: None,
                }
            }
            TargetSpec::DoubleWell { a, b, c } => Problem {
                target: Box::new(DoubleWell::new(a, b, c)?),
                mixture: None,
                test_function: None,
                many_well: None,
            },
            TargetSpec::ManyWell { blocks, a, b, c } => {
                let mw = ManyWell::new(DoubleWell::new(a, b, c)?, blocks)?;
                Problem {
                    target: Box::new(mw.clone()),
                    mixture: None,
                    test_function: None,
                    many_well: Some(mw),
                }
            }
            TargetSpec::Gaussian { dim, variance } => Problem {
                target: Box::new(Gaussian::new(vec![0.0; dim], variance)?),
                mixture: None,
                test_function: None,
                many_well: None,
            },
        })
    }
}

/// Writes points as CSV with a `x1,...,xd` header.
pub fn write_points_csv<W: Write>(points: &Tensor, mut out: W) -> std::io::Result<()> {
    let header: Vec<String> = (1..=points.cols()).map(|i| format!("x{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for r in points.iter_rows() {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}
