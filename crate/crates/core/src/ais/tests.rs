use super::*;
use crate::flow::FlowConfig;
use crate::targets::Gaussian;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn identity_flow(dim: usize) -> FlowModel {
    let cfg = FlowConfig {
        layers: 2,
        hidden: vec![4],
        init_log_scale_bound: 1.0,
        output_scale: 1.0,
    };
    FlowModel::new(dim, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

/// `σ² · N(x; 0, σ²I)`, whose normalizer is exactly `σ²`.
#[derive(Debug)]
struct ScaledGaussian {
    dim: usize,
    variance: f64,
}

impl Target for ScaledGaussian {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_prob(&self, x: &[f64]) -> f64 {
        let inner = Gaussian::new(vec![0.0; self.dim], self.variance).unwrap();
        inner.log_prob(x) + self.variance.ln()
    }
    fn log_prob_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        for (g, v) in grad.iter_mut().zip(x) {
            *g = -v / self.variance;
        }
        self.log_prob(x)
    }
}

/// Standard normal that vanishes for `x₀ > 1`.
#[derive(Debug)]
struct Truncated;

impl Target for Truncated {
    fn dim(&self) -> usize {
        2
    }
    fn log_prob(&self, x: &[f64]) -> f64 {
        if x[0] > 1.0 {
            f64::NEG_INFINITY
        } else {
            -0.5 * (x[0] * x[0] + x[1] * x[1])
        }
    }
    fn log_prob_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad[0] = -x[0];
        grad[1] = -x[1];
        self.log_prob(x)
    }
}

fn mean_and_se_of_weights(log_w: &[f64]) -> (f64, f64) {
    let n = log_w.len() as f64;
    let w: Vec<f64> = log_w.iter().map(|v| v.exp()).collect();
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[test]
fn schedule_validation_and_linear_spacing() {
    let s = AnnealSchedule::linear(2);
    assert_eq!(s.betas(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    assert_eq!(s.intermediates(), 2);
    assert_eq!(AnnealSchedule::linear(0).betas(), &[0.0, 1.0]);
    assert!(AnnealSchedule::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    assert!(AnnealSchedule::new(vec![0.1, 1.0]).is_err());
    assert!(AnnealSchedule::new(vec![0.0, 0.9]).is_err());
    assert!(AnnealSchedule::new(vec![0.0, 0.2, 1.0]).is_ok());
}

#[test]
fn intermediate_endpoints() {
    assert_eq!(intermediate_log_prob(0.0, -1.5, f64::NEG_INFINITY), -1.5);
    assert_eq!(intermediate_log_prob(1.0, f64::NEG_INFINITY, -2.5), -2.5);
    assert_eq!(intermediate_log_prob(0.5, -3.0, -3.0), -3.0);
    assert_eq!(intermediate_log_prob(0.5, -3.0, -1.0), -2.0);
}

#[test]
fn zero_intermediates_is_plain_importance_sampling_bit_for_bit() {
    let flow = crate::flow::tests::random_flow(2, 4, 1);
    let target = ScaledGaussian { dim: 2, variance: 4.0 };
    let sampler = AisSampler::new(AnnealSchedule::linear(0), HmcConfig::default()).unwrap();
    let a = sampler.run(&flow, &target, 500, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = importance_sample(&flow, &target, 500, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.log_w), bits(&b.log_w));
    assert_eq!(bits(a.x.data()), bits(b.x.data()));
    assert_eq!(a, b);
}

#[test]
fn proposal_equal_to_target_gives_zero_log_weights() {
    let flow = identity_flow(2);
    let target = Gaussian::standard(2);
    for k in [0, 1, 3] {
        let sampler = AisSampler::new(AnnealSchedule::linear(k), HmcConfig::default()).unwrap();
        let batch = sampler.run(&flow, &target, 200, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(batch.len(), 200);
        assert!(batch.log_w.iter().all(|w| w.abs() < 1e-12), "k={k}");
    }
}

#[test]
fn importance_weights_are_unbiased_for_normalizer_ratio() {
    let flow = identity_flow(2);
    let target = ScaledGaussian { dim: 2, variance: 4.0 };
    let sampler = AisSampler::new(AnnealSchedule::linear(0), HmcConfig::default()).unwrap();
    let batch = sampler.run(&flow, &target, 100_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (mean, se) = mean_and_se_of_weights(&batch.log_w);
    assert!((mean - 4.0).abs() < 3.0 * se, "{mean} ± {se}");
}

#[test]
fn annealed_weights_are_unbiased_for_normalizer_ratio() {
    let flow = identity_flow(2);
    let target = ScaledGaussian { dim: 2, variance: 4.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sampler = AisSampler::new(AnnealSchedule::linear(2), HmcConfig::default()).unwrap();
    sampler.tune(&flow, &target, 256, 50, &mut rng).unwrap();
    let batch = sampler.run(&flow, &target, 100_000, &mut rng).unwrap();
    assert_eq!(batch.dropped, 0);
    let (mean, se) = mean_and_se_of_weights(&batch.log_w);
    assert!((mean - 4.0).abs() < 3.0 * se, "{mean} ± {se}");
}

#[test]
fn log_weight_variance_shrinks_with_more_intermediates() {
    let flow = identity_flow(2);
    let target = ScaledGaussian { dim: 2, variance: 4.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vars = Vec::new();
    for k in [0, 1, 3, 7] {
        let mut sampler = AisSampler::new(AnnealSchedule::linear(k), HmcConfig::default()).unwrap();
        sampler.tune(&flow, &target, 256, 30, &mut rng).unwrap();
        let batch = sampler.run(&flow, &target, 100_000, &mut rng).unwrap();
        vars.push(variance(&batch.log_w));
    }
    assert!(vars.windows(2).all(|w| w[1] <= w[0]), "{vars:?}");
}

#[test]
fn tuning_sets_one_positive_step_per_intermediate() {
    let flow = identity_flow(2);
    let target = ScaledGaussian { dim: 2, variance: 4.0 };
    let mut sampler = AisSampler::new(AnnealSchedule::linear(3), HmcConfig::default()).unwrap();
    let results = sampler.tune(&flow, &target, 128, 40, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(results.len(), 3);
    assert_eq!(sampler.step_sizes().len(), 3);
    assert!(sampler.step_sizes().iter().all(|s| *s > 0.0 && *s != 0.1));
    // the wider tempered densities get longer steps
    assert!(sampler.step_sizes()[2] > sampler.step_sizes()[0]);
    assert!(sampler.set_step_sizes(vec![0.1]).is_err());
}

#[test]
fn chains_with_vanishing_target_are_dropped_and_counted() {
    let flow = identity_flow(2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = importance_sample(&flow, &Truncated, 10_000, &mut rng).unwrap();
    assert!(batch.dropped > 1000 && batch.dropped < 2200, "{}", batch.dropped);
    assert_eq!(batch.len() + batch.dropped, 10_000);
    assert!(batch.log_w.iter().all(|w| w.is_finite()));
    let sampler = AisSampler::new(AnnealSchedule::linear(2), HmcConfig::default()).unwrap();
    let batch = sampler.run(&flow, &Truncated, 2000, &mut rng).unwrap();
    assert!(batch.dropped > 0);
    assert!(batch.x.iter_rows().all(|r| r[0] <= 1.0));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let flow = identity_flow(3);
    let sampler = AisSampler::new(AnnealSchedule::linear(1), HmcConfig::default()).unwrap();
    let err = sampler.run(&flow, &Gaussian::standard(2), 10, &mut ChaCha8Rng::seed_from_u64(9));
    assert!(matches!(err, Err(Error::DimensionMismatch { expected: 2, got: 3 })));
}

#[test]
fn final_log_q_and_log_p_match_fresh_evaluations() {
    let flow = crate::flow::tests::random_flow(2, 3, 10);
    let target = ScaledGaussian { dim: 2, variance: 2.0 };
    let mut sampler = AisSampler::new(AnnealSchedule::linear(2), HmcConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    sampler.tune(&flow, &target, 64, 20, &mut rng).unwrap();
    let batch = sampler.run(&flow, &target, 300, &mut rng).unwrap();
    let lq = flow.log_prob(&batch.x).unwrap();
    let lp = log_prob_batch(&target, &batch.x).unwrap();
    for i in 0..batch.len() {
        assert!((lq[i] - batch.log_q[i]).abs() < 1e-10);
        assert_eq!(lp[i], batch.log_p[i]);
    }
    assert_eq!(batch.acceptance.len(), 2);
    assert!(batch.acceptance.iter().all(|a| (0.0..=1.0).contains(a)));
}
