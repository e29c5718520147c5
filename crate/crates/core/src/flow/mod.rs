//! RealNVP normalizing flow with a standard Gaussian base.
//!
//! The flow maps base samples `z ~ N(0, I)` to `x = c · F(z)`, where `F` is a
//! stack of affine coupling layers with alternating even/odd masks and `c`
//! is a fixed output scale (1 by default). The density follows from the
//! change of variables,
//!
//! ```text
//! log q(x) = log N(F⁻¹(x/c); 0, I) + log |det J_{F⁻¹}(x/c)| - d·log c
//! ```
//!
//! Every network's last layer is initialised to zero, so a fresh flow is
//! exactly its base Gaussian.

mod checkpoint;
mod coupling;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use coupling::CouplingLayer;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Tensor, Var};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows processed per tape when evaluating large batches.
pub const EVAL_CHUNK: usize = 2048;

fn default_bound() -> f64 {
    1.0
}

fn default_output_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of coupling layers.
    pub layers: usize,
    /// Hidden widths of each scale/shift network.
    pub hidden: Vec<usize>,
    /// Initial value of the learnable log-scale bound.
    #[serde(default = "default_bound")]
    pub init_log_scale_bound: f64,
    /// Fixed multiplier applied after the last coupling layer.
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("flow.hidden widths must be positive".into()));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::InvalidArgument("flow.output_scale must be positive".into()));
        }
        if !self.init_log_scale_bound.is_finite() {
            return Err(Error::InvalidArgument("flow.init_log_scale_bound must be finite".into()));
        }
        Ok(())
    }
}

/// Whether a bound flow's parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

/// Parameter nodes of a flow registered on one tape.
#[derive(Clone, Debug)]
pub struct FlowVars(Vec<Var>);

impl FlowVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    config: FlowConfig,
    pub(crate) layers: Vec<CouplingLayer>,
}

fn check_finite(x: &Tensor, what: &'static str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(dim: usize, config: &FlowConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.layers > 0 && dim < 2 {
            return Err(Error::InvalidArgument("coupling layers need dim >= 2".into()));
        }
        let layers = (0..config.layers)
            .map(|i| CouplingLayer::new(dim, i, &config.hidden, config.init_log_scale_bound, rng))
            .collect();
        Ok(FlowModel {
            dim,
            config: config.clone(),
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn output_scale(&self) -> f64 {
        self.config.output_scale
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, binding: Binding) -> FlowVars {
        FlowVars(
            self.parameters()
                .into_iter()
                .map(|p| match binding {
                    Binding::Trainable => tape.param(p.clone()),
                    Binding::Frozen => tape.constant(p.clone()),
                })
                .collect(),
        )
    }

    fn rows_constant(&self, tape: &mut Tape, rows: usize, value: f64) -> Var {
        tape.constant(Tensor::filled(&[rows], value))
    }

    /// `x = F(z)` and `log |det J_F(z)|` on the tape.
    pub fn forward_on(&self, tape: &mut Tape, vars: &FlowVars, z: Var) -> Result<(Var, Var)> {
        self.check_width(tape.shape(z))?;
        let rows = tape.shape(z)[0];
        let mut it = vars.0.iter();
        let mut h = z;
        let mut log_det = self.rows_constant(tape, rows, self.dim as f64 * self.output_scale().ln());
        for layer in &self.layers {
            let (next, ld) = layer.forward(tape, &mut it, h)?;
            h = next;
            log_det = tape.add(log_det, ld)?;
        }
        let x = if self.output_scale() == 1.0 {
            h
        } else {
            tape.scale(h, self.output_scale())
        };
        Ok((x, log_det))
    }

    /// `z = F⁻¹(x)` and `log |det J_{F⁻¹}(x)|` on the tape.
    pub fn inverse_on(&self, tape: &mut Tape, vars: &FlowVars, x: Var) -> Result<(Var, Var)> {
        self.check_width(tape.shape(x))?;
        let rows = tape.shape(x)[0];
        let mut h = if self.output_scale() == 1.0 {
            x
        } else {
            tape.scale(x, 1.0 / self.output_scale())
        };
        let mut log_det = self.rows_constant(tape, rows, -(self.dim as f64) * self.output_scale().ln());
        let per_layer = self.layers.first().map_or(0, |l| l.parameters().len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut it = vars.0[i * per_layer..(i + 1) * per_layer].iter();
            let (next, ld) = layer.inverse(tape, &mut it, h)?;
            h = next;
            log_det = tape.add(log_det, ld)?;
        }
        Ok((h, log_det))
    }

    fn base_log_prob_on(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let rows = tape.shape(z)[0];
        let sq = tape.mul(z, z)?;
        let ss = tape.sum(sq, Reduce::Rows)?;
        let half = tape.scale(ss, -0.5);
        let norm = self.rows_constant(tape, rows, -0.5 * self.dim as f64 * LN_2PI);
        Ok(tape.add(half, norm)?)
    }

    /// `log q(x)` per row on the tape.
    pub fn log_prob_on(&self, tape: &mut Tape, vars: &FlowVars, x: Var) -> Result<Var> {
        let (z, log_det) = self.inverse_on(tape, vars, x)?;
        let base = self.base_log_prob_on(tape, z)?;
        Ok(tape.add(base, log_det)?)
    }

    /// Reparameterized sample path: `x = F(z)` with `log q(x) = log N(z) - log|det J_F(z)|`.
    pub fn sample_on(&self, tape: &mut Tape, vars: &FlowVars, z: Var) -> Result<(Var, Var)> {
        let base = self.base_log_prob_on(tape, z)?;
        let (x, log_det) = self.forward_on(tape, vars, z)?;
        let log_q = tape.sub(base, log_det)?;
        Ok((x, log_q))
    }

    fn check_width(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c] if c == self.dim => Ok(()),
            [_, c] => Err(Error::DimensionMismatch {
                expected: self.dim,
                got: c,
            }),
            _ => Err(Error::InvalidArgument(format!("expected a [n, {}] batch, got {shape:?}", self.dim))),
        }
    }

    fn chunked<T>(
        &self,
        x: &Tensor,
        mut f: impl FnMut(&Tensor) -> Result<T>,
        mut merge: impl FnMut(T),
    ) -> Result<()> {
        let n = x.rows();
        if n <= EVAL_CHUNK {
            merge(f(x)?);
            return Ok(());
        }
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            merge(f(&x.slice_rows(start, end))?);
            start = end;
        }
        Ok(())
    }

    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        check_finite(z, "flow forward")?;
        self.check_width(z.shape())?;
        let mut xs = Vec::new();
        let mut lds = Vec::with_capacity(z.rows());
        self.chunked(
            z,
            |chunk| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, Binding::Frozen);
                let zv = tape.constant(chunk.clone());
                let (x, ld) = self.forward_on(&mut tape, &vars, zv)?;
                Ok((tape.value(x).clone(), tape.value(ld).data().to_vec()))
            },
            |(x, ld)| {
                xs.push(x);
                lds.extend(ld);
            },
        )?;
        Ok((Tensor::concat_rows(&xs), lds))
    }

    pub fn inverse(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        check_finite(x, "flow inverse")?;
        self.check_width(x.shape())?;
        let mut zs = Vec::new();
        let mut lds = Vec::with_capacity(x.rows());
        self.chunked(
            x,
            |chunk| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, Binding::Frozen);
                let xv = tape.constant(chunk.clone());
                let (z, ld) = self.inverse_on(&mut tape, &vars, xv)?;
                Ok((tape.value(z).clone(), tape.value(ld).data().to_vec()))
            },
            |(z, ld)| {
                zs.push(z);
                lds.extend(ld);
            },
        )?;
        Ok((Tensor::concat_rows(&zs), lds))
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        check_finite(x, "flow log_prob")?;
        self.check_width(x.shape())?;
        let mut out = Vec::with_capacity(x.rows());
        self.chunked(
            x,
            |chunk| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, Binding::Frozen);
                let xv = tape.constant(chunk.clone());
                let lq = self.log_prob_on(&mut tape, &vars, xv)?;
                Ok(tape.value(lq).data().to_vec())
            },
            |v| out.extend(v),
        )?;
        Ok(out)
    }

    /// `log q(x)` and `∇ₓ log q(x)` per row.
    pub fn log_prob_and_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        check_finite(x, "flow log_prob_and_grad")?;
        self.check_width(x.shape())?;
        let mut vals = Vec::with_capacity(x.rows());
        let mut grads = Vec::new();
        self.chunked(
            x,
            |chunk| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, Binding::Frozen);
                let xv = tape.variable(chunk.clone());
                let lq = self.log_prob_on(&mut tape, &vars, xv)?;
                let total = tape.sum(lq, Reduce::All)?;
                let g = tape.backward(total)?.wrt(xv);
                Ok((tape.value(lq).data().to_vec(), g))
            },
            |(v, g)| {
                vals.extend(v);
                grads.push(g);
            },
        )?;
        Ok((vals, Tensor::concat_rows(&grads)))
    }

    /// Draws `n` base samples.
    pub fn sample_base<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let data = (0..n * self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::matrix(n, self.dim, data)
    }

    /// `n` samples with their log-density evaluated along the sampling path.
    pub fn sample_with_log_prob<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be >= 1".into()));
        }
        let z = self.sample_base(n, rng);
        let mut xs = Vec::new();
        let mut lqs = Vec::with_capacity(n);
        self.chunked(
            &z,
            |chunk| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape, Binding::Frozen);
                let zv = tape.constant(chunk.clone());
                let (x, lq) = self.sample_on(&mut tape, &vars, zv)?;
                Ok((tape.value(x).clone(), tape.value(lq).data().to_vec()))
            },
            |(x, lq)| {
                xs.push(x);
                lqs.extend(lq);
            },
        )?;
        Ok((Tensor::concat_rows(&xs), lqs))
    }

    /// Replaces every parameter, in [`FlowModel::parameters`] order.
    pub fn set_parameters(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.parameters_mut();
        if slots.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter shape {:?} does not match {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
        }
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = v.clone();
        }
        Ok(())
    }
}

/// Standard normal log-density of each row.
pub fn standard_normal_log_prob(x: &Tensor) -> Vec<f64> {
    let d = x.cols() as f64;
    x.iter_rows()
        .map(|r| -0.5 * r.iter().map(|v| v * v).sum::<f64>() - 0.5 * d * LN_2PI)
        .collect()
}
