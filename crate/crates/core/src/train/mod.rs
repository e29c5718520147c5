//! Training loops: FAB with AIS-estimated gradients, and the reverse-KL baseline.

mod adam;
mod loss;

pub use adam::{Adam, AdamConfig, StepOutcome};
pub use loss::{fab_loss, kld_loss, KldTerms};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ais::{importance_sample, AisConfig, AisSampler, AnnealSchedule};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::{Binding, FlowModel};
use crate::hmc::HmcConfig;
use crate::metrics;
use crate::targets::Target;

/// Consecutive skipped updates that abort a run.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Fab,
    Kld,
}

fn default_batch() -> usize {
    128
}
fn default_eval_every() -> usize {
    100
}
fn default_eval_samples() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub objective: Objective,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    /// Iterations between metrics records; the final iteration is always recorded.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Flow and AIS samples behind the ESS columns of each record.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Iterations between checkpoints; 0 disables them.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(objective: Objective, iterations: usize) -> Self {
        TrainConfig {
            objective,
            iterations,
            batch_size: default_batch(),
            optimizer: AdamConfig::default(),
            eval_every: default_eval_every(),
            eval_samples: default_eval_samples(),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("train batch_size must be >= 2".into()));
        }
        if self.eval_samples < 2 {
            return Err(Error::InvalidArgument("train eval_samples must be >= 2".into()));
        }
        self.optimizer.validate()
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    /// Updates attempted so far.
    pub iteration: usize,
    /// Loss of the last iteration; FAB losses are shifted by `-log L`.
    pub loss: f64,
    pub ess_flow: f64,
    pub ess_ais: f64,
    pub mean_log_q: Option<f64>,
    pub grad_norm: f64,
    pub acceptance: f64,
    pub dropped: usize,
    /// Updates skipped so far.
    pub skipped: usize,
}

/// Column order of [`write_metrics_csv`].
pub const METRICS_CSV_HEADER: &str = "iteration,loss,ess_flow,ess_ais,mean_log_q,grad_norm,acceptance,dropped,skipped";

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.loss,
            r.ess_flow,
            r.ess_ais,
            r.mean_log_q.map(|v| v.to_string()).unwrap_or_default(),
            r.grad_norm,
            r.acceptance,
            r.dropped,
            r.skipped
        )?;
    }
    Ok(())
}

/// What one iteration did.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub dropped: usize,
}

/// Owns the optimizer, sampler and random streams of one training run.
#[derive(Debug)]
pub struct Trainer<'a> {
    cfg: TrainConfig,
    ais_cfg: AisConfig,
    target: &'a dyn Target,
    eval_points: Option<Tensor>,
    sampler: AisSampler,
    adam: Adam,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    iteration: usize,
    consecutive_skips: usize,
    total_skips: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, ais_cfg: AisConfig, hmc: HmcConfig, target: &'a dyn Target, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sampler = AisSampler::new(AnnealSchedule::linear(ais_cfg.intermediates), hmc)?;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
        eval_rng.set_stream(1);
        Ok(Trainer {
            adam: Adam::new(cfg.optimizer.clone()),
            cfg,
            ais_cfg,
            target,
            eval_points: None,
            sampler,
            rng,
            eval_rng,
            iteration: 0,
            consecutive_skips: 0,
            total_skips: 0,
        })
    }

    /// Points on which each record reports the mean `log q`.
    pub fn with_eval_points(mut self, points: Tensor) -> Self {
        self.eval_points = Some(points);
        self
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn sampler(&self) -> &AisSampler {
        &self.sampler
    }

    fn retune_due(&self) -> bool {
        match self.ais_cfg.retune_every {
            0 => self.iteration == 0,
            k => self.iteration % k == 0,
        }
    }

    /// One sample-loss-update cycle.
    pub fn step(&mut self, flow: &mut FlowModel) -> Result<IterationReport> {
        if self.retune_due() {
            let t = &self.ais_cfg.tuning;
            self.sampler.tune(flow, self.target, t.chains, t.iterations, &mut self.rng)?;
        }
        let l = self.cfg.batch_size;
        let mut tape = Tape::new();
        let vars = flow.bind(&mut tape, Binding::Trainable);
        let (loss_var, reported, dropped) = match self.cfg.objective {
            Objective::Fab => {
                let batch = self.sampler.run(flow, self.target, l, &mut self.rng)?;
                if batch.is_empty() {
                    (None, f64::NAN, batch.dropped)
                } else {
                    let x = tape.constant(batch.x.clone());
                    let log_q = flow.log_prob_on(&mut tape, &vars, x)?;
                    match fab_loss(&mut tape, &batch.log_w, &batch.log_p, log_q) {
                        Ok(v) => {
                            let shift = (batch.len() as f64).ln();
                            (Some(v), tape.value(v).item() - shift, batch.dropped)
                        }
                        Err(Error::DegenerateBatch) => (None, f64::NAN, batch.dropped),
                        Err(e) => return Err(e),
                    }
                }
            }
            Objective::Kld => {
                let z = flow.sample_base(l, &mut self.rng);
                let z = tape.constant(z);
                let (x, log_q) = flow.sample_on(&mut tape, &vars, z)?;
                let terms = kld_loss(&mut tape, self.target, x, log_q)?;
                match terms.loss {
                    Some(v) => (Some(v), tape.value(v).item(), terms.dropped),
                    None => (None, f64::NAN, terms.dropped),
                }
            }
        };
        self.iteration += 1;
        let outcome = match loss_var {
            Some(v) if tape.value(v).item().is_finite() => {
                let grads = tape.backward(v)?.into_params();
                self.adam.step(&mut flow.parameters_mut(), &grads)?
            }
            _ => StepOutcome::Skipped { grad_norm: f64::NAN },
        };
        let (skipped, grad_norm) = match outcome {
            StepOutcome::Applied { grad_norm, .. } => (false, grad_norm),
            StepOutcome::Skipped { grad_norm } => (true, grad_norm),
        };
        if skipped {
            self.consecutive_skips += 1;
            self.total_skips += 1;
            log::warn!("iteration {}: non-finite loss or gradient, update skipped", self.iteration);
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::TrainingAborted {
                    iteration: self.iteration,
                    skips: self.consecutive_skips,
                });
            }
        } else {
            self.consecutive_skips = 0;
        }
        Ok(IterationReport {
            loss: reported,
            grad_norm,
            skipped,
            dropped,
        })
    }

    /// Builds a metrics record on the evaluation stream, leaving the training
    /// stream untouched.
    pub fn record(&mut self, flow: &FlowModel, last: &IterationReport) -> Result<MetricsRecord> {
        let n = self.cfg.eval_samples;
        let is = importance_sample(flow, self.target, n, &mut self.eval_rng)?;
        let ais = self.sampler.run(flow, self.target, n, &mut self.eval_rng)?;
        let ess_or_zero = |lw: &[f64]| if lw.is_empty() { Ok(0.0) } else { metrics::ess(lw) };
        Ok(MetricsRecord {
            iteration: self.iteration,
            loss: last.loss,
            ess_flow: ess_or_zero(&is.log_w)?,
            ess_ais: ess_or_zero(&ais.log_w)?,
            mean_log_q: self.eval_points.as_ref().map(|p| metrics::mean_log_q(flow, p)).transpose()?,
            grad_norm: last.grad_norm,
            acceptance: ais.mean_acceptance(),
            dropped: last.dropped,
            skipped: self.total_skips,
        })
    }

    /// Runs the configured number of iterations. `on_checkpoint` is called
    /// with the iteration count at the configured cadence.
    pub fn run(
        &mut self,
        flow: &mut FlowModel,
        on_checkpoint: &mut dyn FnMut(usize, &FlowModel) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        self.run_for(flow, self.cfg.iterations, on_checkpoint)
    }

    /// Runs `iterations` more iterations.
    pub fn run_for(
        &mut self,
        flow: &mut FlowModel,
        iterations: usize,
        on_checkpoint: &mut dyn FnMut(usize, &FlowModel) -> Result<()>,
    ) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        for k in 0..iterations {
            let report = self.step(flow)?;
            let i = self.iteration;
            if (self.cfg.eval_every > 0 && i % self.cfg.eval_every == 0) || k + 1 == iterations {
                let r = self.record(flow, &report)?;
                log::info!(
                    "iter {i}: loss {:.4} ess(flow) {:.2}% ess(ais) {:.2}% grad {:.3e}",
                    r.loss,
                    r.ess_flow,
                    r.ess_ais,
                    r.grad_norm
                );
                records.push(r);
            }
            if self.cfg.checkpoint_every > 0 && i % self.cfg.checkpoint_every == 0 {
                on_checkpoint(i, flow)?;
            }
        }
        Ok(records)
    }
}

fn train_with(
    objective: Objective,
    mut cfg: TrainConfig,
    ais: AisConfig,
    hmc: HmcConfig,
    mut flow: FlowModel,
    target: &dyn Target,
    seed: u64,
) -> Result<(FlowModel, Vec<MetricsRecord>)> {
    cfg.objective = objective;
    let mut trainer = Trainer::new(cfg, ais, hmc, target, seed)?;
    let records = trainer.run(&mut flow, &mut |_, _| Ok(()))?;
    Ok((flow, records))
}

/// Trains with the AIS-estimated α=2 objective.
pub fn train_fab(
    cfg: TrainConfig,
    ais: AisConfig,
    hmc: HmcConfig,
    flow: FlowModel,
    target: &dyn Target,
    seed: u64,
) -> Result<(FlowModel, Vec<MetricsRecord>)> {
    train_with(Objective::Fab, cfg, ais, hmc, flow, target, seed)
}

/// Trains by reverse KL along reparameterized flow samples.
pub fn train_kld(
    cfg: TrainConfig,
    ais: AisConfig,
    hmc: HmcConfig,
    flow: FlowModel,
    target: &dyn Target,
    seed: u64,
) -> Result<(FlowModel, Vec<MetricsRecord>)> {
    train_with(Objective::Kld, cfg, ais, hmc, flow, target, seed)
}

#[cfg(test)]
mod tests;
