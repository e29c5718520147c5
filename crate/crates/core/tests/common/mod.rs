#![allow(dead_code)]

use std::sync::Arc;

use fab::autodiff::{AutodiffError, Reduce, Tape, Tensor, Var};
use fab::flow::{FlowConfig, FlowModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Side of the square node values; square so row reductions broadcast.
pub const SIDE: usize = 4;
pub const MAX_DEPTH: usize = 6;

#[derive(Clone, Copy, Debug)]
enum Unary {
    Tanh,
    Relu,
    /// `exp(tanh(a))`, keeping chained exponentials bounded.
    Exp,
    /// `log(1 + a²)`.
    Log,
    Neg,
    Scale(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    /// `a / (1 + b²)`.
    Div,
}

#[derive(Clone, Debug)]
enum Step {
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Matmul(usize, usize),
    Affine(usize, usize),
    /// `a + reduce_rows(b)`, broadcast along rows.
    AddRowReduction(usize, usize, u8),
    /// Splits columns and concatenates them back in a shuffled order.
    Shuffle(usize, Vec<usize>),
}

/// A random expression over square parameter matrices, stored as a program
/// so it can be replayed on fresh tapes for finite differences.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub params: Vec<Tensor>,
    steps: Vec<Step>,
    reductions: Vec<u8>,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_params = rng.random_range(2..=4);
        let mut params: Vec<Tensor> = (0..n_params)
            .map(|_| Tensor::matrix(SIDE, SIDE, (0..SIDE * SIDE).map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal)).collect()))
            .collect();
        // bias vector for affine steps
        params.push(Tensor::vector((0..SIDE).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()));
        let mut depth = vec![0usize; n_params];
        let mut steps = Vec::new();
        let target_depth = rng.random_range(1..=MAX_DEPTH);
        while depth.iter().copied().max().unwrap() < target_depth || steps.len() < 3 {
            let pick = |rng: &mut ChaCha8Rng, depth: &[usize]| loop {
                let i = rng.random_range(0..depth.len());
                if depth[i] < MAX_DEPTH {
                    return i;
                }
            };
            let a = pick(&mut rng, &depth);
            let b = pick(&mut rng, &depth);
            let step = match rng.random_range(0..13) {
                0 => Step::Unary(Unary::Tanh, a),
                1 => Step::Unary(Unary::Relu, a),
                2 => Step::Unary(Unary::Exp, a),
                3 => Step::Unary(Unary::Log, a),
                4 => Step::Unary(Unary::Neg, a),
                5 => Step::Unary(Unary::Scale(rng.random_range(-2.0..2.0)), a),
                6 => Step::Binary(Binary::Add, a, b),
                7 => Step::Binary(Binary::Sub, a, b),
                8 => Step::Binary(Binary::Mul, a, b),
                9 => Step::Binary(Binary::Div, a, b),
                10 => {
                    if rng.random_bool(0.5) {
                        Step::Matmul(a, b)
                    } else {
                        Step::Affine(a, b)
                    }
                }
                11 => Step::AddRowReduction(a, b, rng.random_range(0..3)),
                _ => {
                    let mut perm: Vec<usize> = (0..SIDE).collect();
                    for i in (1..SIDE).rev() {
                        perm.swap(i, rng.random_range(0..=i));
                    }
                    Step::Shuffle(a, perm)
                }
            };
            let d = match step {
                Step::Unary(_, x) | Step::Shuffle(x, _) => depth[x],
                Step::Binary(_, x, y) | Step::Matmul(x, y) | Step::Affine(x, y) | Step::AddRowReduction(x, y, _) => depth[x].max(depth[y]),
            } + 1;
            depth.push(d);
            steps.push(step);
        }
        let reductions = (0..n_params + steps.len()).map(|_| rng.random_range(0..3)).collect();
        RandomGraph { params, steps, reductions }
    }

    fn reduce(tape: &mut Tape, v: Var, kind: u8, axis: Reduce) -> Result<Var, AutodiffError> {
        match kind {
            0 => tape.sum(v, axis),
            1 => tape.mean(v, axis),
            _ => tape.logsumexp(v, axis),
        }
    }

    /// Records the graph; the loss sums a reduction of every node.
    pub fn build(&self, tape: &mut Tape, params: &[Tensor]) -> Result<Var, AutodiffError> {
        let leaves: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let bias = *leaves.last().unwrap();
        let mut nodes: Vec<Var> = leaves[..leaves.len() - 1].to_vec();
        for step in &self.steps {
            let v = match *step {
                Step::Unary(op, a) => {
                    let a = nodes[a];
                    match op {
                        Unary::Tanh => tape.tanh(a),
                        Unary::Relu => tape.relu(a),
                        Unary::Exp => {
                            let t = tape.tanh(a);
                            tape.exp(t)
                        }
                        Unary::Log => {
                            let sq = tape.mul(a, a)?;
                            let one = tape.constant(Tensor::filled(&[SIDE, SIDE], 1.0));
                            let s = tape.add(sq, one)?;
                            tape.log(s)
                        }
                        Unary::Neg => tape.neg(a),
                        Unary::Scale(c) => tape.scale(a, c),
                    }
                }
                Step::Binary(op, a, b) => {
                    let (a, b) = (nodes[a], nodes[b]);
                    match op {
                        Binary::Add => tape.add(a, b)?,
                        Binary::Sub => tape.sub(a, b)?,
                        Binary::Mul => tape.mul(a, b)?,
                        Binary::Div => {
                            let sq = tape.mul(b, b)?;
                            let one = tape.constant(Tensor::filled(&[SIDE, SIDE], 1.0));
                            let den = tape.add(sq, one)?;
                            tape.div(a, den)?
                        }
                    }
                }
                Step::Matmul(a, b) => {
                    let m = tape.matmul(nodes[a], nodes[b])?;
                    tape.scale(m, 0.5)
                }
                Step::Affine(a, b) => {
                    let m = tape.affine(nodes[a], nodes[b], bias)?;
                    tape.scale(m, 0.5)
                }
                Step::AddRowReduction(a, b, kind) => {
                    let r = Self::reduce(tape, nodes[b], kind, Reduce::Rows)?;
                    tape.add(nodes[a], r)?
                }
                Step::Shuffle(a, ref perm) => {
                    let half = SIDE / 2;
                    let left: Arc<[usize]> = perm[..half].into();
                    let right: Arc<[usize]> = perm[half..].into();
                    let (l, r) = tape.split(nodes[a], left, right)?;
                    let back_l: Arc<[usize]> = perm[half..].into();
                    let back_r: Arc<[usize]> = perm[..half].into();
                    tape.concat(&[(l, back_l), (r, back_r)], SIDE)?
                }
            };
            nodes.push(v);
        }
        let mut total = None;
        for (node, &kind) in nodes.iter().zip(&self.reductions) {
            let r = Self::reduce(tape, *node, kind, Reduce::All)?;
            total = Some(match total {
                None => r,
                Some(t) => tape.add(t, r)?,
            });
        }
        Ok(total.unwrap())
    }
}

/// Flow whose parameters are all perturbed away from the identity.
pub fn random_flow(dim: usize, layers: usize, seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FlowConfig {
        layers,
        hidden: vec![8, 8],
        init_log_scale_bound: 1.0,
        output_scale: 1.0,
    };
    let mut flow = FlowModel::new(dim, &cfg, &mut rng).unwrap();
    for p in flow.parameters_mut() {
        for v in p.data_mut() {
            *v += 0.4 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    flow
}

/// Determinant by partial-pivot elimination.
pub fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d
}
