//! Hamiltonian Monte Carlo with a unit mass matrix, batched over chains.
//!
//! Every chain in a batch shares one step size. Random draws are taken in
//! chain order from a single stream, so a batch is reproducible for a given
//! seed no matter how the density evaluates its rows.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn default_outer() -> usize {
    1
}
fn default_inner() -> usize {
    5
}
fn default_step() -> f64 {
    0.1
}
fn default_target_acceptance() -> f64 {
    0.65
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    /// Metropolis proposals per transition.
    #[serde(default = "default_outer")]
    pub n_outer: usize,
    /// Leapfrog steps per proposal.
    #[serde(default = "default_inner")]
    pub n_inner: usize,
    /// Initial step size, before any tuning.
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_target_acceptance")]
    pub target_acceptance: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            n_outer: default_outer(),
            n_inner: default_inner(),
            step_size: default_step(),
            target_acceptance: default_target_acceptance(),
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 || self.n_inner == 0 {
            return Err(Error::InvalidArgument("hmc n_outer and n_inner must be >= 1".into()));
        }
        check_step(self.step_size)?;
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::InvalidArgument("hmc target_acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("step size must be positive and finite, got {step}")))
    }
}

/// Log-density and gradient of a batch, plus per-row values the caller wants
/// carried along with accepted states.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub log_density: Vec<f64>,
    pub grad: Tensor,
    /// `[n, k]` side values; `k` may be zero.
    pub aux: Tensor,
}

impl Evaluation {
    fn row_ok(&self, i: usize) -> bool {
        self.log_density[i].is_finite() && self.grad.row(i).iter().all(|g| g.is_finite())
    }

    fn copy_row_from(&mut self, other: &Evaluation, i: usize) {
        self.log_density[i] = other.log_density[i];
        self.grad.row_mut(i).copy_from_slice(other.grad.row(i));
        if self.aux.cols() > 0 {
            self.aux.row_mut(i).copy_from_slice(other.aux.row(i));
        }
    }
}

pub trait BatchDensity {
    fn dim(&self) -> usize;

    /// Evaluates every row of a finite `[n, dim]` batch. Rows may come back
    /// with non-finite values; those count as rejections.
    fn evaluate(&self, x: &Tensor) -> Result<Evaluation>;
}

/// Evaluates `x`, routing rows with non-finite coordinates around the density.
fn evaluate_guarded(density: &dyn BatchDensity, x: &Tensor) -> Result<Evaluation> {
    if x.all_finite() {
        return density.evaluate(x);
    }
    let bad: Vec<bool> = x.iter_rows().map(|r| r.iter().any(|v| !v.is_finite())).collect();
    let mut clean = x.clone();
    for (i, &b) in bad.iter().enumerate() {
        if b {
            clean.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut eval = density.evaluate(&clean)?;
    for (i, &b) in bad.iter().enumerate() {
        if b {
            eval.log_density[i] = f64::NAN;
        }
    }
    Ok(eval)
}

/// Current positions of a batch of chains with their cached evaluation.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub x: Tensor,
    pub eval: Evaluation,
}

impl ChainState {
    pub fn new(density: &dyn BatchDensity, x: Tensor) -> Result<Self> {
        if x.rank() != 2 || x.cols() != density.dim() {
            return Err(Error::DimensionMismatch {
                expected: density.dim(),
                got: if x.rank() == 2 { x.cols() } else { x.len() },
            });
        }
        let eval = evaluate_guarded(density, &x)?;
        Ok(ChainState { x, eval })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Leapfrog integration of `n_inner` steps from `(x, p)` where `start` is the
/// evaluation at `x`. Returns the end point, the end momentum and the
/// evaluation there.
pub fn leapfrog(
    density: &dyn BatchDensity,
    x: &Tensor,
    p: &Tensor,
    start: &Evaluation,
    step: f64,
    n_inner: usize,
) -> Result<(Tensor, Tensor, Evaluation)> {
    check_step(step)?;
    let mut x = x.clone();
    let mut p = p.clone();
    axpy(p.data_mut(), 0.5 * step, start.grad.data());
    let mut eval = None;
    for i in 0..n_inner {
        axpy(x.data_mut(), step, p.data());
        let e = evaluate_guarded(density, &x)?;
        let scale = if i + 1 == n_inner { 0.5 * step } else { step };
        axpy(p.data_mut(), scale, e.grad.data());
        eval = Some(e);
    }
    let eval = eval.unwrap_or_else(|| start.clone());
    Ok((x, p, eval))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `H = -log π(x) + |p|²/2` per chain.
pub fn hamiltonian(eval: &Evaluation, p: &Tensor) -> Vec<f64> {
    p.iter_rows()
        .zip(&eval.log_density)
        .map(|(r, l)| -l + 0.5 * r.iter().map(|v| v * v).sum::<f64>())
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransitionStats {
    pub proposals: usize,
    pub accepted: usize,
    /// Proposals rejected because the trajectory left the finite region.
    pub non_finite: usize,
    /// Sum over proposals of `min(1, exp(-ΔH))`, zero for non-finite ones.
    pub accept_prob_sum: f64,
}

impl TransitionStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub fn mean_accept_prob(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accept_prob_sum / self.proposals as f64
        }
    }

    pub fn merge(&mut self, other: &TransitionStats) {
        self.proposals += other.proposals;
        self.accepted += other.accepted;
        self.non_finite += other.non_finite;
        self.accept_prob_sum += other.accept_prob_sum;
    }
}

/// One HMC transition per chain: `n_outer` Metropolis-corrected proposals.
pub fn transition<R: Rng + ?Sized>(
    density: &dyn BatchDensity,
    state: &mut ChainState,
    cfg: &HmcConfig,
    step: f64,
    rng: &mut R,
) -> Result<TransitionStats> {
    let n = state.len();
    let d = density.dim();
    let mut stats = TransitionStats::default();
    for _ in 0..cfg.n_outer {
        let p = Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect());
        let log_u: Vec<f64> = (0..n).map(|_| rng.random::<f64>().ln()).collect();
        let h0 = hamiltonian(&state.eval, &p);
        let (x1, p1, eval1) = leapfrog(density, &state.x, &p, &state.eval, step, cfg.n_inner)?;
        let h1 = hamiltonian(&eval1, &p1);
        for i in 0..n {
            stats.proposals += 1;
            let finite = eval1.row_ok(i) && x1.row(i).iter().all(|v| v.is_finite()) && h1[i].is_finite();
            if !finite {
                stats.non_finite += 1;
                continue;
            }
            let log_ratio = h0[i] - h1[i];
            stats.accept_prob_sum += log_ratio.min(0.0).exp();
            if log_u[i] < log_ratio {
                stats.accepted += 1;
                state.x.row_mut(i).copy_from_slice(x1.row(i));
                state.eval.copy_row_from(&eval1, i);
            }
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub step_size: f64,
    /// Mean acceptance probability measured at `step_size` after adaptation.
    pub acceptance: f64,
    pub converged: bool,
}

/// Dual-averaging step-size adaptation on throwaway chains.
///
/// `state` is advanced during warm-up; the caller decides whether to keep it.
/// Adaptation runs for `iterations` transitions, then the averaged step is
/// checked over a few more. If the acceptance is not within 0.15 of the
/// target, a warning is logged and the best step seen is returned.
pub fn tune_step_size<R: Rng + ?Sized>(
    density: &dyn BatchDensity,
    state: &mut ChainState,
    cfg: &HmcConfig,
    initial_step: f64,
    iterations: usize,
    rng: &mut R,
) -> Result<TuneResult> {
    check_step(initial_step)?;
    let target = cfg.target_acceptance;
    let (gamma, t0, kappa) = (0.05, 10.0, 0.75);
    let mu = initial_step.ln();
    let mut h_bar = 0.0;
    let mut log_step = initial_step.ln();
    let mut log_step_bar = initial_step.ln();
    let mut best = (f64::INFINITY, initial_step, 0.0);
    for m in 1..=iterations {
        let step = log_step.exp();
        let a = transition(density, state, cfg, step, rng)?.mean_accept_prob();
        if (a - target).abs() < best.0 {
            best = ((a - target).abs(), step, a);
        }
        let m = m as f64;
        let w = 1.0 / (m + t0);
        h_bar = (1.0 - w) * h_bar + w * (target - a);
        log_step = mu - m.sqrt() / gamma * h_bar;
        let eta = m.powf(-kappa);
        log_step_bar = eta * log_step + (1.0 - eta) * log_step_bar;
    }
    let step = log_step_bar.exp();
    let mut check = TransitionStats::default();
    for _ in 0..iterations.clamp(1, 5) {
        check.merge(&transition(density, state, cfg, step, rng)?);
    }
    let acceptance = check.mean_accept_prob();
    if (acceptance - target).abs() <= 0.15 {
        return Ok(TuneResult {
            step_size: step,
            acceptance,
            converged: true,
        });
    }
    log::warn!("step size tuning reached acceptance {acceptance:.3} (target {target}); keeping best step {:.4e}", best.1);
    Ok(TuneResult {
        step_size: best.1,
        acceptance: if best.0.is_finite() { best.2 } else { acceptance },
        converged: false,
    })
}

/// Isotropic Gaussian `N(0, variance · I)` as a batch density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsotropicGaussian {
    pub dim: usize,
    pub variance: f64,
}

impl BatchDensity for IsotropicGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &Tensor) -> Result<Evaluation> {
        let log_density = x
            .iter_rows()
            .map(|r| -0.5 * r.iter().map(|v| v * v).sum::<f64>() / self.variance)
            .collect();
        Ok(Evaluation {
            log_density,
            grad: x.map(|v| -v / self.variance),
            aux: Tensor::zeros(&[x.rows(), 0]),
        })
    }
}
