use super::*;
use crate::autodiff::logsumexp;
use crate::flow::tests::random_flow;
use crate::flow::FlowConfig;
use crate::targets::{log_prob_batch, Gaussian};
use rand::Rng;
use rand_distr::StandardNormal;

fn identity_flow(dim: usize, layers: usize) -> FlowModel {
    let cfg = FlowConfig {
        layers,
        hidden: vec![16, 16],
        init_log_scale_bound: 1.0,
        output_scale: 1.0,
    };
    FlowModel::new(dim, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

/// Gradient of `Σ c_l log q(x_l)` for fixed coefficients, one row at a time.
fn weighted_log_q_grad(flow: &FlowModel, x: &Tensor, coef: &[f64]) -> Vec<Tensor> {
    let mut total: Vec<Tensor> = flow.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (i, c) in coef.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = flow.bind(&mut tape, Binding::Trainable);
        let xi = tape.constant(x.select_rows(&[i]));
        let lq = flow.log_prob_on(&mut tape, &vars, xi).unwrap();
        let s = tape.sum(lq, crate::autodiff::Reduce::All).unwrap();
        for (t, g) in total.iter_mut().zip(tape.backward(s).unwrap().into_params()) {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += c * b;
            }
        }
    }
    total
}

fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    let scale = b.iter().flat_map(|t| t.data().iter().map(|v| v.abs())).fold(0.0, f64::max);
    diff / scale.max(1e-300)
}

fn fab_instance(seed: u64, l: usize) -> (FlowModel, Tensor, Vec<f64>, Vec<f64>) {
    let flow = random_flow(2, 4, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Tensor::matrix(l, 2, (0..2 * l).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect());
    let log_w: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
    let log_p = log_prob_batch(&Gaussian::new(vec![0.5, -0.5], 2.0).unwrap(), &x).unwrap();
    (flow, x, log_w, log_p)
}

#[test]
fn fab_gradient_equals_softmax_weighted_score() {
    for seed in 0..5 {
        let (flow, x, log_w, log_p) = fab_instance(seed, 8);
        let mut tape = Tape::new();
        let vars = flow.bind(&mut tape, Binding::Trainable);
        let xv = tape.constant(x.clone());
        let lq = flow.log_prob_on(&mut tape, &vars, xv).unwrap();
        let lq_vals = tape.value(lq).data().to_vec();
        let loss = fab_loss(&mut tape, &log_w, &log_p, lq).unwrap();
        let engine = tape.backward(loss).unwrap().into_params();

        let logits: Vec<f64> = (0..8).map(|i| log_w[i] + log_p[i] - lq_vals[i]).collect();
        let lse = logsumexp(&logits);
        let coef: Vec<f64> = logits.iter().map(|v| -(v - lse).exp()).collect();
        let analytic = weighted_log_q_grad(&flow, &x, &coef);
        let err = max_relative_error(&engine, &analytic);
        assert!(err < 1e-8, "seed {seed}: {err}");
        assert_eq!(tape.value(loss).item(), lse);
    }
}

#[test]
fn single_sample_loss_and_gradient() {
    let (flow, x, log_w, log_p) = fab_instance(7, 1);
    let mut tape = Tape::new();
    let vars = flow.bind(&mut tape, Binding::Trainable);
    let xv = tape.constant(x.clone());
    let lq = flow.log_prob_on(&mut tape, &vars, xv).unwrap();
    let q = tape.value(lq).item();
    let loss = fab_loss(&mut tape, &log_w, &log_p, lq).unwrap();
    assert!((tape.value(loss).item() - (log_w[0] + log_p[0] - q)).abs() < 1e-12);
    let engine = tape.backward(loss).unwrap().into_params();
    let analytic = weighted_log_q_grad(&flow, &x, &[-1.0]);
    assert!(max_relative_error(&engine, &analytic) < 1e-10);
}

#[test]
fn zero_logits_give_log_batch_size() {
    let mut tape = Tape::new();
    let lq = tape.variable(Tensor::vector(vec![-1.3, 0.2, -4.0, 2.5, -0.7]));
    let log_p = tape.value(lq).data().to_vec();
    let loss = fab_loss(&mut tape, &[0.0; 5], &log_p, lq).unwrap();
    assert!((tape.value(loss).item() - 5f64.ln()).abs() < 1e-15);
}

#[test]
fn degenerate_batch_is_an_error() {
    let mut tape = Tape::new();
    let lq = tape.variable(Tensor::vector(vec![0.0, 0.0]));
    let err = fab_loss(&mut tape, &[f64::NEG_INFINITY; 2], &[0.0; 2], lq);
    assert!(matches!(err, Err(Error::DegenerateBatch)));
    assert!(fab_loss(&mut tape, &[0.0; 3], &[0.0; 2], lq).is_err());
}

#[test]
fn loss_from_sampler_outputs_alone_has_zero_gradient() {
    let flow = random_flow(2, 3, 3);
    let target = Gaussian::standard(2);
    let sampler = AisSampler::new(AnnealSchedule::linear(2), HmcConfig::default()).unwrap();
    let batch = sampler.run(&flow, &target, 16, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut tape = Tape::new();
    let _vars = flow.bind(&mut tape, Binding::Trainable);
    let w = tape.constant(Tensor::vector(batch.log_w.clone()));
    let x = tape.constant(batch.x.clone());
    let sx = tape.sum(x, crate::autodiff::Reduce::All).unwrap();
    let sw = tape.logsumexp(w, crate::autodiff::Reduce::All).unwrap();
    let loss = tape.add(sx, sw).unwrap();
    let grads = tape.backward(loss).unwrap().into_params();
    assert!(grads.iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn kld_is_zero_when_flow_equals_target() {
    let flow = identity_flow(2, 2);
    let target = Gaussian::standard(2);
    let mut tape = Tape::new();
    let vars = flow.bind(&mut tape, Binding::Trainable);
    let z = tape.constant(flow.sample_base(16_384, &mut ChaCha8Rng::seed_from_u64(5)));
    let (x, lq) = flow.sample_on(&mut tape, &vars, z).unwrap();
    let terms = kld_loss(&mut tape, &target, x, lq).unwrap();
    let loss = terms.loss.unwrap();
    assert!(tape.value(loss).item().abs() < 1e-12);
    // zero in expectation only; per-sample terms are O(1)
    let grads = tape.backward(loss).unwrap().into_params();
    let norm: f64 = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    assert!(norm < 0.1, "{norm}");
}

/// Identity flow whose two layers each add a constant shift.
fn shift_flow(mu: [f64; 2]) -> FlowModel {
    let mut flow = identity_flow(2, 2);
    for (layer, m) in flow.layers.iter_mut().zip([mu[1], mu[0]]) {
        layer.shift_net.layers.last_mut().unwrap().bias = Tensor::vector(vec![m]);
    }
    flow
}

#[test]
fn shift_only_kld_is_half_squared_norm() {
    let mu = [1.2, -0.7];
    let flow = shift_flow(mu);
    let n = 100_000;
    let mut tape = Tape::new();
    let vars = flow.bind(&mut tape, Binding::Frozen);
    let z = tape.constant(flow.sample_base(n, &mut ChaCha8Rng::seed_from_u64(7)));
    let (xv, lq) = flow.sample_on(&mut tape, &vars, z).unwrap();
    let terms = kld_loss(&mut tape, &Gaussian::standard(2), xv, lq).unwrap();
    let est = tape.value(terms.loss.unwrap()).item();
    let sq = mu[0] * mu[0] + mu[1] * mu[1];
    // per-sample term is μ·z + |μ|²/2, with standard deviation |μ|
    let se = sq.sqrt() / (n as f64).sqrt();
    assert!((est - sq / 2.0).abs() < 3.0 * se, "{est} vs {}", sq / 2.0);
}

#[test]
fn kld_gradient_matches_finite_differences() {
    let flow = random_flow(2, 2, 8);
    let target = Gaussian::new(vec![1.0, -1.0], 1.5).unwrap();
    let z = flow.sample_base(32, &mut ChaCha8Rng::seed_from_u64(9));
    let loss_of = |f: &FlowModel| {
        let mut tape = Tape::new();
        let vars = f.bind(&mut tape, Binding::Trainable);
        let zv = tape.constant(z.clone());
        let (x, lq) = f.sample_on(&mut tape, &vars, zv).unwrap();
        let l = kld_loss(&mut tape, &target, x, lq).unwrap().loss.unwrap();
        let v = tape.value(l).item();
        (v, tape.backward(l).unwrap().into_params())
    };
    let (_, grads) = loss_of(&flow);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let base: Vec<Tensor> = flow.parameters().into_iter().cloned().collect();
    for p in 0..base.len() {
        for k in 0..base[p].len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[p].data_mut()[k] += h;
            minus[p].data_mut()[k] -= h;
            let mut fp = flow.clone();
            fp.set_parameters(&plus).unwrap();
            let mut fm = flow.clone();
            fm.set_parameters(&minus).unwrap();
            let fd = (loss_of(&fp).0 - loss_of(&fm).0) / (2.0 * h);
            worst = worst.max((fd - grads[p].data()[k]).abs());
            scale = scale.max(fd.abs());
        }
    }
    assert!(worst / scale < 1e-4, "{}", worst / scale);
}

#[derive(Debug)]
struct HalfPlane;

impl Target for HalfPlane {
    fn dim(&self) -> usize {
        2
    }
    fn log_prob(&self, x: &[f64]) -> f64 {
        if x[0] < 0.0 {
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

#[test]
fn kld_drops_samples_outside_support() {
    let flow = identity_flow(2, 2);
    let mut tape = Tape::new();
    let vars = flow.bind(&mut tape, Binding::Trainable);
    let z = tape.constant(flow.sample_base(1000, &mut ChaCha8Rng::seed_from_u64(10)));
    let (x, lq) = flow.sample_on(&mut tape, &vars, z).unwrap();
    let terms = kld_loss(&mut tape, &HalfPlane, x, lq).unwrap();
    assert!(terms.dropped > 400 && terms.dropped < 600);
    let loss = terms.loss.unwrap();
    assert!(tape.value(loss).item().is_finite());
    assert!(tape.backward(loss).unwrap().into_params().iter().all(|g| g.all_finite()));
}

fn adam(lr: f64) -> Adam {
    Adam::new(AdamConfig {
        learning_rate: lr,
        ..AdamConfig::default()
    })
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = Tensor::vector(vec![1.0, -2.0]);
    let mut opt = adam(0.1);
    for _ in 0..10 {
        opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
    }
    assert_eq!(p.data(), &[1.0, -2.0]);
}

#[test]
fn adam_descends_against_a_constant_gradient() {
    let mut p = Tensor::vector(vec![0.0, 0.0]);
    let mut opt = adam(0.01);
    for _ in 0..100 {
        opt.step(&mut [&mut p], &[Tensor::vector(vec![3.0, -0.2])]).unwrap();
    }
    assert!(p.data()[0] < -0.5 && p.data()[1] > 0.5);
}

#[test]
fn adam_converges_on_a_quadratic_bowl() {
    let mut p = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
    let mut opt = adam(1e-2);
    for _ in 0..2000 {
        let g = p.clone();
        opt.step(&mut [&mut p], &[g]).unwrap();
    }
    assert!(p.norm_sq().sqrt() < 1e-3, "{}", p.norm_sq().sqrt());
}

#[test]
fn adam_skips_non_finite_and_clips_large_gradients() {
    let mut p = Tensor::vector(vec![1.0]);
    let mut opt = adam(0.1);
    let out = opt.step(&mut [&mut p], &[Tensor::vector(vec![f64::NAN])]).unwrap();
    assert!(matches!(out, StepOutcome::Skipped { .. }));
    assert_eq!(p.data(), &[1.0]);
    assert_eq!(opt.steps_taken(), 0);
    let out = opt.step(&mut [&mut p], &[Tensor::vector(vec![1e6])]).unwrap();
    assert!(matches!(out, StepOutcome::Applied { clipped: true, grad_norm } if grad_norm == 1e6));
}

fn quick_cfg(objective: Objective, iterations: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        optimizer: AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
        eval_every: 50,
        eval_samples: 500,
        ..TrainConfig::new(objective, iterations)
    }
}

fn quick_ais() -> AisConfig {
    AisConfig {
        intermediates: 2,
        retune_every: 100,
        tuning: crate::ais::TuneSettings { chains: 64, iterations: 15 },
    }
}

#[test]
fn zero_iterations_return_the_initial_flow() {
    let flow = random_flow(2, 2, 11);
    let target = Gaussian::standard(2);
    let (out, records) = train_fab(quick_cfg(Objective::Fab, 0), quick_ais(), HmcConfig::default(), flow.clone(), &target, 0).unwrap();
    assert_eq!(out, flow);
    assert!(records.is_empty());
}

/// `KL(p ‖ N(m, S))` for `p = N(μ, σ²I)` in 2-D, from fitted moments `m`, `S`.
fn gaussian_kl_to_fit(flow: &FlowModel, mu: [f64; 2], var: f64) -> f64 {
    let n = 20_000;
    let (x, _) = flow.sample_with_log_prob(n, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let mut m = [0.0; 2];
    for r in x.iter_rows() {
        m[0] += r[0] / n as f64;
        m[1] += r[1] / n as f64;
    }
    let mut s = [[0.0; 2]; 2];
    for r in x.iter_rows() {
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += (r[i] - m[i]) * (r[j] - m[j]) / (n - 1) as f64;
            }
        }
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let tr = var * (inv[0][0] + inv[1][1]);
    let d = [m[0] - mu[0], m[1] - mu[1]];
    let quad = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    0.5 * (tr + quad - 2.0 + (det / (var * var)).ln())
}

#[test]
fn fab_fits_a_gaussian_target() {
    let target = Gaussian::new(vec![1.0, -1.0], 2.0).unwrap();
    let flow = identity_flow(2, 4);
    let (flow, records) = train_fab(quick_cfg(Objective::Fab, 500), quick_ais(), HmcConfig::default(), flow, &target, 1).unwrap();
    let kl = gaussian_kl_to_fit(&flow, [1.0, -1.0], 2.0);
    assert!(kl < 0.05, "{kl}");
    assert_eq!(records.len(), 10);
    assert_eq!(records.last().unwrap().iteration, 500);
    assert!(records.last().unwrap().ess_flow > 90.0);
}

#[test]
fn kld_fits_a_gaussian_target() {
    let target = Gaussian::new(vec![1.0, -1.0], 2.0).unwrap();
    let flow = identity_flow(2, 4);
    let (flow, _) = train_kld(quick_cfg(Objective::Kld, 500), quick_ais(), HmcConfig::default(), flow, &target, 2).unwrap();
    let kl = gaussian_kl_to_fit(&flow, [1.0, -1.0], 2.0);
    assert!(kl < 0.05, "{kl}");
}

#[test]
fn fab_loss_moving_average_decreases() {
    let target = Gaussian::new(vec![1.0, -1.0], 2.0).unwrap();
    let mut flow = identity_flow(2, 4);
    let mut trainer = Trainer::new(quick_cfg(Objective::Fab, 400), quick_ais(), HmcConfig::default(), &target, 3).unwrap();
    let mut ema = None;
    let mut checkpoints = Vec::new();
    for i in 0..400 {
        let r = trainer.step(&mut flow).unwrap();
        let e = ema.map_or(r.loss, |e: f64| 0.95 * e + 0.05 * r.loss);
        ema = Some(e);
        if (i + 1) % 100 == 0 {
            checkpoints.push(e);
        }
    }
    let last = *checkpoints.last().unwrap();
    assert!(last < 0.5 * checkpoints[0] && last < 0.05, "{checkpoints:?}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let target = Gaussian::new(vec![1.0, -1.0], 2.0).unwrap();
    let run = || {
        train_fab(quick_cfg(Objective::Fab, 30), quick_ais(), HmcConfig::default(), identity_flow(2, 2), &target, 4).unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    for (p, q) in a.parameters().iter().zip(b.parameters()) {
        assert!(p.data().iter().zip(q.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut csv = Vec::new();
    write_metrics_csv(&ra, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with(METRICS_CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + ra.len());
}

#[derive(Debug)]
struct Broken;

impl Target for Broken {
    fn dim(&self) -> usize {
        2
    }
    fn log_prob(&self, _: &[f64]) -> f64 {
        f64::NAN
    }
    fn log_prob_and_grad(&self, _: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = f64::NAN);
        f64::NAN
    }
}

#[test]
fn persistent_failures_abort_after_ten_skips() {
    for objective in [Objective::Fab, Objective::Kld] {
        let mut ais = quick_ais();
        ais.tuning.iterations = 2;
        let err = train_with(objective, quick_cfg(objective, 50), ais, HmcConfig::default(), identity_flow(2, 2), &Broken, 0);
        assert!(matches!(err, Err(Error::TrainingAborted { iteration: 10, skips: 10 })), "{err:?}");
    }
}

#[test]
fn checkpoints_fire_at_the_configured_cadence() {
    let target = Gaussian::standard(2);
    let mut cfg = quick_cfg(Objective::Kld, 25);
    cfg.checkpoint_every = 10;
    let mut trainer = Trainer::new(cfg, quick_ais(), HmcConfig::default(), &target, 5).unwrap();
    let mut flow = identity_flow(2, 2);
    let mut seen = Vec::new();
    trainer.run(&mut flow, &mut |i, _| {
        seen.push(i);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![10, 20]);
}
