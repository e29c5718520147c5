use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{AutodiffError, Reduce, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)),
            bias: Tensor::vector(draw(fan_out)),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Fully connected tanh network whose last layer starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Linear::uniform(fan_in, h, rng));
            fan_in = h;
        }
        layers.push(Linear::zeros(fan_in, output));
        Mlp { layers }
    }

    fn apply(&self, tape: &mut Tape, vars: &mut std::slice::Iter<'_, Var>, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let w = *vars.next().expect("weight var");
            let b = *vars.next().expect("bias var");
            h = tape.affine(h, w, b)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Affine coupling: coordinates in `transformed` are scaled and shifted by
/// functions of the coordinates in `conditioner`.
///
/// The log-scale is `bound ⊙ tanh(scale_net(x_cond))`, so `|log s| ≤ |bound|`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub(crate) conditioner: Arc<[usize]>,
    pub(crate) transformed: Arc<[usize]>,
    pub(crate) scale_net: Mlp,
    pub(crate) shift_net: Mlp,
    pub(crate) log_scale_bound: Tensor,
}

/// Even/odd coordinate split, swapped on odd layers.
pub(crate) fn alternating_mask(dim: usize, layer: usize) -> (Vec<usize>, Vec<usize>) {
    let even: Vec<usize> = (0..dim).step_by(2).collect();
    let odd: Vec<usize> = (1..dim).step_by(2).collect();
    if layer % 2 == 0 {
        (even, odd)
    } else {
        (odd, even)
    }
}

impl CouplingLayer {
    pub(crate) fn new<R: Rng + ?Sized>(dim: usize, index: usize, hidden: &[usize], bound: f64, rng: &mut R) -> Self {
        let (cond, trans) = alternating_mask(dim, index);
        let scale_net = Mlp::new(cond.len(), hidden, trans.len(), rng);
        let shift_net = Mlp::new(cond.len(), hidden, trans.len(), rng);
        CouplingLayer {
            log_scale_bound: Tensor::filled(&[trans.len()], bound),
            conditioner: cond.into(),
            transformed: trans.into(),
            scale_net,
            shift_net,
        }
    }

    pub fn conditioner(&self) -> &[usize] {
        &self.conditioner
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub(crate) fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for net in [&self.scale_net, &self.shift_net] {
            for l in &net.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out.push(&self.log_scale_bound);
        out
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for net in [&mut self.scale_net, &mut self.shift_net] {
            for l in &mut net.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.log_scale_bound);
        out
    }

    fn scale_and_shift(
        &self,
        tape: &mut Tape,
        vars: &mut std::slice::Iter<'_, Var>,
        cond: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let raw = self.scale_net.apply(tape, vars, cond)?;
        let shift = self.shift_net.apply(tape, vars, cond)?;
        let bound = *vars.next().expect("bound var");
        let squashed = tape.tanh(raw);
        let log_scale = tape.mul(squashed, bound)?;
        Ok((log_scale, shift))
    }

    /// Returns the transformed batch and the per-row log-determinant.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        vars: &mut std::slice::Iter<'_, Var>,
        z: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let width = tape.shape(z)[1];
        let (cond, moving) = tape.split(z, self.conditioner.clone(), self.transformed.clone())?;
        let (log_scale, shift) = self.scale_and_shift(tape, vars, cond)?;
        let scale = tape.exp(log_scale);
        let scaled = tape.mul(moving, scale)?;
        let out = tape.add(scaled, shift)?;
        let x = tape.concat(
            &[(cond, self.conditioner.clone()), (out, self.transformed.clone())],
            width,
        )?;
        let log_det = tape.sum(log_scale, Reduce::Rows)?;
        Ok((x, log_det))
    }

    pub(crate) fn inverse(
        &self,
        tape: &mut Tape,
        vars: &mut std::slice::Iter<'_, Var>,
        x: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let width = tape.shape(x)[1];
        let (cond, moving) = tape.split(x, self.conditioner.clone(), self.transformed.clone())?;
        let (log_scale, shift) = self.scale_and_shift(tape, vars, cond)?;
        let centred = tape.sub(moving, shift)?;
        let neg = tape.neg(log_scale);
        let inv_scale = tape.exp(neg);
        let out = tape.mul(centred, inv_scale)?;
        let z = tape.concat(
            &[(cond, self.conditioner.clone()), (out, self.transformed.clone())],
            width,
        )?;
        let ld = tape.sum(log_scale, Reduce::Rows)?;
        let log_det = tape.neg(ld);
        Ok((z, log_det))
    }
}
