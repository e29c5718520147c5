use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{bias_std_study, ess_report, mean_log_q, weighted_expectation, EssReport, EstimatorReport, WeightSource};
use crate::ais::{importance_sample, AisSampler, AnnealSchedule, TuneSettings};
use crate::error::Result;
use crate::flow::FlowModel;
use crate::hmc::HmcConfig;
use crate::targets::{Problem, Target};

fn default_ess_samples() -> usize {
    100_000
}
fn default_bias_runs() -> usize {
    20
}
fn default_bias_samples() -> usize {
    1000
}
fn default_mean_log_q_samples() -> usize {
    10_000
}
fn default_refine_intermediates() -> usize {
    4
}
fn default_truth_check_samples() -> usize {
    10_000_000
}

/// Sample counts for evaluation. The defaults are desk scale; see
/// [`EvalConfig::paper_scale`] for the full counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_ess_samples")]
    pub ess_samples: usize,
    #[serde(default = "default_bias_runs")]
    pub bias_runs: usize,
    #[serde(default = "default_bias_samples")]
    pub bias_samples: usize,
    /// Exact target samples for the mean `log q` (ignored when a fixed test set exists).
    #[serde(default = "default_mean_log_q_samples")]
    pub mean_log_q_samples: usize,
    /// Intermediate distributions for post-training AIS.
    #[serde(default = "default_refine_intermediates")]
    pub refine_intermediates: usize,
    #[serde(default)]
    pub tuning: TuneSettings,
    /// Exact samples used to cross-check a closed-form expectation; 0 skips the check.
    #[serde(default = "default_truth_check_samples")]
    pub truth_check_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ess_samples: default_ess_samples(),
            bias_runs: default_bias_runs(),
            bias_samples: default_bias_samples(),
            mean_log_q_samples: default_mean_log_q_samples(),
            refine_intermediates: default_refine_intermediates(),
            tuning: TuneSettings::default(),
            truth_check_samples: default_truth_check_samples(),
        }
    }
}

impl EvalConfig {
    /// `10⁶` ESS samples and 100 bias runs.
    pub fn paper_scale(mut self) -> Self {
        self.ess_samples = 1_000_000;
        self.bias_runs = 100;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub ess_flow: EssReport,
    pub ess_ais: EssReport,
    pub mean_log_q: Option<f64>,
    /// Ground truth of the test expectation, when the problem has one.
    pub truth: Option<f64>,
    /// Self-normalized flow importance sampling.
    pub bias_flow: Option<EstimatorReport>,
    /// Plain average over raw flow samples.
    pub bias_flow_unweighted: Option<EstimatorReport>,
    pub bias_ais: Option<EstimatorReport>,
    pub ais_acceptance: f64,
    pub ais_dropped: usize,
}

/// Column order of [`write_eval_csv`].
pub const EVAL_CSV_HEADER: &str = "label,ess_flow,ess_ais,n_ess,mean_log_q,truth,bias_flow,std_flow,bias_flow_unweighted,std_flow_unweighted,bias_ais,std_ais,n_runs,n_per_run,ais_acceptance,ais_dropped";

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the header and one row per labelled report.
pub fn write_eval_csv<W: Write>(rows: &[(&str, &EvalReport)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{EVAL_CSV_HEADER}")?;
    for (label, r) in rows {
        let b = |e: &Option<EstimatorReport>| (cell(e.as_ref().map(|e| e.bias_percent)), cell(e.as_ref().map(|e| e.std_percent)));
        let (bf, sf) = b(&r.bias_flow);
        let (bu, su) = b(&r.bias_flow_unweighted);
        let (ba, sa) = b(&r.bias_ais);
        let (runs, per) = r
            .bias_flow
            .as_ref()
            .map(|e| (e.n_runs.to_string(), e.n_samples_per_run.to_string()))
            .unwrap_or_default();
        writeln!(
            out,
            "{label},{},{},{},{},{},{bf},{sf},{bu},{su},{ba},{sa},{runs},{per},{},{}",
            r.ess_flow.ess_percent,
            r.ess_ais.ess_percent,
            r.ess_flow.n_samples,
            cell(r.mean_log_q),
            cell(r.truth),
            r.ais_acceptance,
            r.ais_dropped
        )?;
    }
    Ok(())
}

impl EvalReport {
    /// Human-readable table, after-AIS values in brackets.
    pub fn summary_table(rows: &[(&str, &EvalReport)]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>12} {:>18} {:>18} {:>18}", "model", "mean log q", "ESS (%)", "bias (%)", "std (%)");
        for (label, r) in rows {
            let pair = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => format!("{a:.2} ({b:.2})"),
                (Some(a), None) => format!("{a:.2}"),
                _ => "-".to_string(),
            };
            let bias = pair(r.bias_flow.as_ref().map(|e| e.bias_percent), r.bias_ais.as_ref().map(|e| e.bias_percent));
            let std = pair(r.bias_flow.as_ref().map(|e| e.std_percent), r.bias_ais.as_ref().map(|e| e.std_percent));
            let _ = writeln!(
                s,
                "{:<10} {:>12} {:>18} {:>18} {:>18}",
                label,
                r.mean_log_q.map_or("-".to_string(), |v| format!("{v:.2}")),
                pair(Some(r.ess_flow.ess_percent), Some(r.ess_ais.ess_percent)),
                bias,
                std
            );
        }
        s
    }
}

/// Evaluation points for the mean `log q`: a fixed test set when the problem
/// has one, exact target samples otherwise.
pub fn eval_points(problem: &Problem, n: usize, rng: &mut dyn RngCore) -> Option<crate::autodiff::Tensor> {
    if let Some(mw) = &problem.many_well {
        return Some(mw.mode_test_set());
    }
    problem.target.sample(n, rng)
}

/// Full evaluation of a trained flow on `problem`.
pub fn evaluate<R: Rng>(
    flow: &FlowModel,
    problem: &Problem,
    hmc: &HmcConfig,
    cfg: &EvalConfig,
    rng: &mut R,
) -> Result<EvalReport> {
    let target: &dyn Target = problem.target.as_ref();
    let is = importance_sample(flow, target, cfg.ess_samples, rng)?;
    let ess_flow = ess_report(&is.log_w, WeightSource::Flow)?;

    let mut sampler = AisSampler::new(AnnealSchedule::linear(cfg.refine_intermediates), hmc.clone())?;
    sampler.tune(flow, target, cfg.tuning.chains, cfg.tuning.iterations, rng)?;
    let ais = sampler.run(flow, target, cfg.ess_samples, rng)?;
    let ess_ais = ess_report(&ais.log_w, WeightSource::Ais)?;

    let points = eval_points(problem, cfg.mean_log_q_samples, rng);
    let mean_log_q = points.map(|p| mean_log_q(flow, &p)).transpose()?;

    let (mut truth, mut bias_flow, mut bias_flow_unweighted, mut bias_ais) = (None, None, None, None);
    if let (Some(mog), Some(f)) = (&problem.mixture, &problem.test_function) {
        let t = f.expectation_under(mog);
        if cfg.truth_check_samples > 0 {
            check_truth(t, cfg.truth_check_samples, |n, rng| {
                mog.sample(n, rng).map(|x| x.iter_rows().map(|r| f.eval(r)).collect())
            }, rng);
        }
        truth = Some(t);
        let mut unweighted = Vec::with_capacity(cfg.bias_runs);
        bias_flow = Some(bias_std_study(t, cfg.bias_runs, cfg.bias_samples, |_| {
            let b = importance_sample(flow, target, cfg.bias_samples, rng)?;
            let fx: Vec<f64> = b.x.iter_rows().map(|r| f.eval(r)).collect();
            unweighted.push(fx.iter().sum::<f64>() / fx.len() as f64);
            weighted_expectation(&fx, &b.log_w)
        })?);
        let mut it = unweighted.into_iter();
        bias_flow_unweighted = Some(bias_std_study(t, cfg.bias_runs, cfg.bias_samples, |_| {
            Ok(it.next().expect("one estimate per run"))
        })?);
        bias_ais = Some(bias_std_study(t, cfg.bias_runs, cfg.bias_samples, |_| {
            let b = sampler.run(flow, target, cfg.bias_samples, rng)?;
            let fx: Vec<f64> = b.x.iter_rows().map(|r| f.eval(r)).collect();
            weighted_expectation(&fx, &b.log_w)
        })?);
    }

    Ok(EvalReport {
        ess_flow,
        ess_ais,
        mean_log_q,
        truth,
        bias_flow,
        bias_flow_unweighted,
        bias_ais,
        ais_acceptance: ais.mean_acceptance(),
        ais_dropped: is.dropped + ais.dropped,
    })
}

/// Warns when Monte Carlo disagrees with a closed-form expectation by more
/// than five standard errors.
fn check_truth<R: Rng>(
    truth: f64,
    n: usize,
    mut draw: impl FnMut(usize, &mut dyn RngCore) -> Option<Vec<f64>>,
    rng: &mut R,
) {
    let (mut s, mut s2, mut m) = (0.0, 0.0, 0usize);
    while m < n {
        let k = (n - m).min(100_000);
        let Some(v) = draw(k, rng) else { return };
        for x in v {
            s += x;
            s2 += x * x;
        }
        m += k;
    }
    let mean = s / m as f64;
    let se = ((s2 / m as f64 - mean * mean).max(0.0) / m as f64).sqrt();
    if (mean - truth).abs() > 5.0 * se {
        log::warn!("closed-form expectation {truth} disagrees with Monte Carlo {mean} (se {se})");
    } else {
        log::debug!("closed-form expectation {truth} agrees with Monte Carlo {mean} (se {se})");
    }
}
