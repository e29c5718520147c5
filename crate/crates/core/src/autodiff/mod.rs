//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every loss evaluation. Leaves are registered as
//! trainable parameters, gradient-carrying variables, or constants; every
//! other node records the elementary operation that produced it. A single
//! reverse sweep from a scalar loss yields [`Gradients`] for every leaf.
//!
//! Broadcasting is limited to a `[rows, cols]` tensor combined with a `[cols]`
//! vector on the right-hand side. Everything else must match exactly.

mod gemm;
mod tape;
mod tensor;

pub use tape::{logsumexp, ElementaryOp, Gradients, Reduce, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: column {column} out of range for width {width}")]
    ColumnOutOfRange {
        op: &'static str,
        column: usize,
        width: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
}

/// Outcome of checking engine gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub gradients: Vec<Tensor>,
    /// `max |g - fd| / max(max |fd|, 1e-12)` over all parameters.
    pub max_relative_error: f64,
}

/// Compares [`Tape::backward`] with central differences of step `h`.
///
/// `build` records the loss on a fresh tape from the given parameter values
/// and returns the loss node; the parameter leaves must be registered with
/// [`Tape::param`] in the order of `params`.
pub fn check_gradients<F>(params: &[Tensor], h: f64, build: F) -> Result<GradientReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let gradients = tape.backward(loss)?.into_params();
    let eval = |ps: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let l = build(&mut t, ps)?;
        Ok(t.value(l).item())
    };
    let mut worst = 0.0_f64;
    let mut scale = 0.0_f64;
    let mut work = params.to_vec();
    for (p, g) in gradients.iter().enumerate() {
        for k in 0..work[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let hi = eval(&work)?;
            work[p].data_mut()[k] = orig - h;
            let lo = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let fd = (hi - lo) / (2.0 * h);
            worst = worst.max((g.data()[k] - fd).abs());
            scale = scale.max(fd.abs());
        }
    }
    Ok(GradientReport {
        gradients,
        max_relative_error: worst / scale.max(1e-12),
    })
}
