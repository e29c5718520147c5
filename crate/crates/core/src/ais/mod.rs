//! Annealed importance sampling seeded by the flow.
//!
//! The path runs from the normalized flow density `q` to the target `p̃`
//! through geometric intermediates `(1-β)·log q + β·log p̃`. Each chain starts
//! at an exact flow sample and moves through one HMC transition per
//! intermediate. Weights stay in log space, and every output is a plain
//! tensor, so nothing downstream can differentiate through the sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::hmc::{self, BatchDensity, ChainState, Evaluation, HmcConfig, TuneResult};
use crate::targets::{log_prob_and_grad_batch, log_prob_batch, Target};

/// Strictly increasing interpolation exponents from exactly 0 to exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnealSchedule {
    betas: Vec<f64>,
}

impl AnnealSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas[0] != 0.0 || *betas.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument("schedule must start at 0 and end at 1".into()));
        }
        if betas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("schedule must be strictly increasing".into()));
        }
        Ok(AnnealSchedule { betas })
    }

    /// Evenly spaced betas with `intermediates` distributions strictly inside `(0, 1)`.
    pub fn linear(intermediates: usize) -> Self {
        let n = intermediates + 1;
        let mut betas: Vec<f64> = (0..=n).map(|j| j as f64 / n as f64).collect();
        betas[n] = 1.0;
        AnnealSchedule { betas }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn intermediates(&self) -> usize {
        self.betas.len() - 2
    }
}

/// `(1-β)·log q + β·log p̃`, exact at both endpoints even when one side is infinite.
pub fn intermediate_log_prob(beta: f64, log_q: f64, log_p: f64) -> f64 {
    if beta == 0.0 {
        log_q
    } else if beta == 1.0 {
        log_p
    } else {
        (1.0 - beta) * log_q + beta * log_p
    }
}

/// Annealed density at one `β`.
///
/// `aux` holds `[log q, log p̃, ∇log q, ∇log p̃]` per row, so a state can move
/// to the next `β` without another evaluation.
pub struct AnnealedDensity<'a> {
    pub flow: &'a FlowModel,
    pub target: &'a dyn Target,
    pub beta: f64,
}

impl AnnealedDensity<'_> {
    fn combine(&self, aux: Tensor) -> Evaluation {
        let d = self.flow.dim();
        let b = self.beta;
        let n = aux.rows();
        let mut log_density = Vec::with_capacity(n);
        let mut grad = Vec::with_capacity(n * d);
        for r in aux.iter_rows() {
            log_density.push(intermediate_log_prob(b, r[0], r[1]));
            let (gq, gp) = r[2..].split_at(d);
            grad.extend(gq.iter().zip(gp).map(|(q, p)| (1.0 - b) * q + b * p));
        }
        Evaluation {
            log_density,
            grad: Tensor::matrix(n, d, grad),
            aux,
        }
    }

    /// Re-targets a state evaluated at another `β` to this density.
    pub fn reweight(&self, state: ChainState) -> ChainState {
        let eval = self.combine(state.eval.aux);
        ChainState { x: state.x, eval }
    }
}

impl BatchDensity for AnnealedDensity<'_> {
    fn dim(&self) -> usize {
        self.flow.dim()
    }

    fn evaluate(&self, x: &Tensor) -> Result<Evaluation> {
        let (lq, gq) = self.flow.log_prob_and_grad(x)?;
        let (lp, gp) = log_prob_and_grad_batch(self.target, x)?;
        let d = self.flow.dim();
        let mut aux = Vec::with_capacity(x.rows() * (2 + 2 * d));
        for i in 0..x.rows() {
            aux.push(lq[i]);
            aux.push(lp[i]);
            aux.extend_from_slice(gq.row(i));
            aux.extend_from_slice(gp.row(i));
        }
        Ok(self.combine(Tensor::matrix(x.rows(), 2 + 2 * d, aux)))
    }
}

/// Output of one AIS run, with non-finite chains already removed.
#[derive(Clone, Debug, PartialEq)]
pub struct AisBatch {
    /// Final states.
    pub x: Tensor,
    pub log_w: Vec<f64>,
    /// `log q` at the final states.
    pub log_q: Vec<f64>,
    /// `log p̃` at the final states.
    pub log_p: Vec<f64>,
    /// Acceptance rate of each intermediate's transition.
    pub acceptance: Vec<f64>,
    /// Chains dropped for a non-finite weight.
    pub dropped: usize,
}

impl AisBatch {
    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    pub fn mean_acceptance(&self) -> f64 {
        if self.acceptance.is_empty() {
            f64::NAN
        } else {
            self.acceptance.iter().sum::<f64>() / self.acceptance.len() as f64
        }
    }

    fn retain_finite(x: Tensor, log_w: Vec<f64>, log_q: Vec<f64>, log_p: Vec<f64>, acceptance: Vec<f64>) -> Self {
        let keep: Vec<usize> = (0..log_w.len())
            .filter(|&i| log_w[i].is_finite() && log_q[i].is_finite())
            .collect();
        let dropped = log_w.len() - keep.len();
        if dropped == 0 {
            return AisBatch { x, log_w, log_q, log_p, acceptance, dropped };
        }
        log::debug!("dropping {dropped} chains with non-finite weights");
        AisBatch {
            x: x.select_rows(&keep),
            log_w: keep.iter().map(|&i| log_w[i]).collect(),
            log_q: keep.iter().map(|&i| log_q[i]).collect(),
            log_p: keep.iter().map(|&i| log_p[i]).collect(),
            acceptance,
            dropped,
        }
    }
}

fn check_dims(flow: &FlowModel, target: &dyn Target) -> Result<()> {
    if flow.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: target.dim(),
            got: flow.dim(),
        });
    }
    Ok(())
}

/// Plain importance sampling from the flow: `log w = log p̃ - log q`.
pub fn importance_sample<R: Rng + ?Sized>(
    flow: &FlowModel,
    target: &dyn Target,
    n: usize,
    rng: &mut R,
) -> Result<AisBatch> {
    check_dims(flow, target)?;
    let (x, log_q) = flow.sample_with_log_prob(n, rng)?;
    let log_p = log_prob_batch(target, &x)?;
    let log_w = log_p.iter().zip(&log_q).map(|(p, q)| p - q).collect();
    Ok(AisBatch::retain_finite(x, log_w, log_q, log_p, Vec::new()))
}

/// A schedule with one frozen HMC step size per intermediate.
#[derive(Clone, Debug, PartialEq)]
pub struct AisSampler {
    schedule: AnnealSchedule,
    hmc: HmcConfig,
    step_sizes: Vec<f64>,
}

impl AisSampler {
    pub fn new(schedule: AnnealSchedule, hmc: HmcConfig) -> Result<Self> {
        hmc.validate()?;
        let step_sizes = vec![hmc.step_size; schedule.intermediates()];
        Ok(AisSampler { schedule, hmc, step_sizes })
    }

    pub fn schedule(&self) -> &AnnealSchedule {
        &self.schedule
    }

    pub fn hmc(&self) -> &HmcConfig {
        &self.hmc
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.step_sizes
    }

    pub fn set_step_sizes(&mut self, steps: Vec<f64>) -> Result<()> {
        if steps.len() != self.step_sizes.len() || steps.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("one positive step size per intermediate required".into()));
        }
        self.step_sizes = steps;
        Ok(())
    }

    /// Re-tunes every intermediate's step size on `n_chains` throwaway chains.
    ///
    /// The chains walk the annealing path like a real run, each stage starting
    /// from where the previous stage's warm-up ended. None of their samples
    /// are kept.
    pub fn tune<R: Rng + ?Sized>(
        &mut self,
        flow: &FlowModel,
        target: &dyn Target,
        n_chains: usize,
        iterations: usize,
        rng: &mut R,
    ) -> Result<Vec<TuneResult>> {
        check_dims(flow, target)?;
        if self.step_sizes.is_empty() || iterations == 0 {
            return Ok(Vec::new());
        }
        let (x, _) = flow.sample_with_log_prob(n_chains, rng)?;
        let mut results = Vec::with_capacity(self.step_sizes.len());
        let mut carried: Option<ChainState> = None;
        for j in 0..self.step_sizes.len() {
            let density = AnnealedDensity {
                flow,
                target,
                beta: self.schedule.betas[j + 1],
            };
            let mut state = match carried.take() {
                Some(s) => density.reweight(s),
                None => ChainState::new(&density, x.clone())?,
            };
            let r = hmc::tune_step_size(&density, &mut state, &self.hmc, self.step_sizes[j], iterations, rng)?;
            self.step_sizes[j] = r.step_size;
            results.push(r);
            carried = Some(state);
        }
        Ok(results)
    }

    /// Runs `n` chains along the annealing path.
    pub fn run<R: Rng + ?Sized>(&self, flow: &FlowModel, target: &dyn Target, n: usize, rng: &mut R) -> Result<AisBatch> {
        check_dims(flow, target)?;
        let (x0, lq0) = flow.sample_with_log_prob(n, rng)?;
        let lp0 = log_prob_batch(target, &x0)?;
        let betas = &self.schedule.betas;
        let mut log_w = vec![0.0; n];
        accumulate(&mut log_w, betas[1] - betas[0], &lq0, &lp0);
        if self.step_sizes.is_empty() {
            return Ok(AisBatch::retain_finite(x0, log_w, lq0, lp0, Vec::new()));
        }
        let mut acceptance = Vec::with_capacity(self.step_sizes.len());
        let mut carried: Option<ChainState> = None;
        let mut x0 = Some(x0);
        let mut last = (Vec::new(), Vec::new());
        for (j, &step) in self.step_sizes.iter().enumerate() {
            let density = AnnealedDensity {
                flow,
                target,
                beta: betas[j + 1],
            };
            let mut state = match (carried.take(), x0.take()) {
                (Some(s), _) => density.reweight(s),
                (None, Some(x)) => ChainState::new(&density, x)?,
                (None, None) => unreachable!("state is carried between stages"),
            };
            let stats = hmc::transition(&density, &mut state, &self.hmc, step, rng)?;
            acceptance.push(stats.acceptance_rate());
            let lq: Vec<f64> = state.eval.aux.iter_rows().map(|r| r[0]).collect();
            let lp: Vec<f64> = state.eval.aux.iter_rows().map(|r| r[1]).collect();
            accumulate(&mut log_w, betas[j + 2] - betas[j + 1], &lq, &lp);
            last = (lq, lp);
            carried = Some(state);
        }
        let x = carried.expect("at least one intermediate").x;
        Ok(AisBatch::retain_finite(x, log_w, last.0, last.1, acceptance))
    }
}

fn accumulate(log_w: &mut [f64], delta: f64, log_q: &[f64], log_p: &[f64]) {
    for ((w, q), p) in log_w.iter_mut().zip(log_q).zip(log_p) {
        *w += delta * (p - q);
    }
}

/// Post-training refinement: tunes a fresh sampler with `intermediates`
/// distributions against the trained flow, then draws `n` weighted samples.
pub fn refine_after_training<R: Rng + ?Sized>(
    flow: &FlowModel,
    target: &dyn Target,
    intermediates: usize,
    hmc: &HmcConfig,
    tuning: &TuneSettings,
    n: usize,
    rng: &mut R,
) -> Result<AisBatch> {
    let mut sampler = AisSampler::new(AnnealSchedule::linear(intermediates), hmc.clone())?;
    sampler.tune(flow, target, tuning.chains, tuning.iterations, rng)?;
    sampler.run(flow, target, n, rng)
}

fn default_intermediates() -> usize {
    2
}
fn default_tune_chains() -> usize {
    128
}
fn default_tune_iterations() -> usize {
    30
}
fn default_retune_every() -> usize {
    100
}

/// Warm-up budget for step-size tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSettings {
    #[serde(default = "default_tune_chains")]
    pub chains: usize,
    #[serde(default = "default_tune_iterations")]
    pub iterations: usize,
}

impl Default for TuneSettings {
    fn default() -> Self {
        TuneSettings {
            chains: default_tune_chains(),
            iterations: default_tune_iterations(),
        }
    }
}

/// AIS settings as written in an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AisConfig {
    /// Intermediate distributions used during training.
    #[serde(default = "default_intermediates")]
    pub intermediates: usize,
    /// Training iterations between step-size re-tunes; 0 tunes only once.
    #[serde(default = "default_retune_every")]
    pub retune_every: usize,
    #[serde(default)]
    pub tuning: TuneSettings,
}

impl Default for AisConfig {
    fn default() -> Self {
        AisConfig {
            intermediates: default_intermediates(),
            retune_every: default_retune_every(),
            tuning: TuneSettings::default(),
        }
    }
}

#[cfg(test)]
mod tests;
