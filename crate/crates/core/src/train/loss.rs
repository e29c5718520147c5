use crate::autodiff::{Reduce, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::targets::{log_prob_and_grad_batch, Target};

/// `logsumexp_l(log w̄ₗ + log p̃(x̄ₗ) - log q(x̄ₗ))`.
///
/// `log_w` and `log_p` are plain numbers, so the only path to the flow
/// parameters runs through `log_q`. The gradient is therefore
/// `-Σₗ sₗ ∇ log q(x̄ₗ)` with `s` the softmax of the logits.
pub fn fab_loss(tape: &mut Tape, log_w: &[f64], log_p: &[f64], log_q: Var) -> Result<Var> {
    let n = log_w.len();
    if log_p.len() != n || tape.shape(log_q) != [n] {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if log_p.len() != n { log_p.len() } else { tape.value(log_q).len() },
        });
    }
    let fixed: Vec<f64> = log_w.iter().zip(log_p).map(|(w, p)| w + p).collect();
    let any_finite = fixed
        .iter()
        .zip(tape.value(log_q).data())
        .any(|(c, q)| c - q > f64::NEG_INFINITY);
    if !any_finite {
        return Err(Error::DegenerateBatch);
    }
    let c = tape.constant(Tensor::vector(fixed));
    let logits = tape.sub(c, log_q)?;
    Ok(tape.logsumexp(logits, Reduce::All)?)
}

/// Result of [`kld_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KldTerms {
    /// `None` when every sample was dropped.
    pub loss: Option<Var>,
    /// Samples dropped for a non-finite `log p̃`.
    pub dropped: usize,
}

/// `mean_l(log q(xₗ) - log p̃(xₗ))` over reparameterized samples `x`.
///
/// Samples with a non-finite `log p̃` are left out of the mean and counted.
pub fn kld_loss(tape: &mut Tape, target: &dyn Target, x: Var, log_q: Var) -> Result<KldTerms> {
    let (mut vals, mut grad) = log_prob_and_grad_batch(target, tape.value(x))?;
    let n = vals.len();
    let mut mask = vec![0.0; n];
    let mut kept = 0usize;
    for i in 0..n {
        if vals[i].is_finite() && grad.row(i).iter().all(|g| g.is_finite()) {
            mask[i] = 1.0;
            kept += 1;
        } else {
            vals[i] = 0.0;
            grad.row_mut(i).iter_mut().for_each(|g| *g = 0.0);
        }
    }
    let dropped = n - kept;
    if kept == 0 {
        return Ok(KldTerms { loss: None, dropped });
    }
    let log_p = tape.row_function(x, vals, grad)?;
    let diff = tape.sub(log_q, log_p)?;
    let loss = if dropped == 0 {
        tape.mean(diff, Reduce::All)?
    } else {
        let w = tape.constant(Tensor::vector(mask.iter().map(|m| m / kept as f64).collect()));
        let weighted = tape.mul(diff, w)?;
        tape.sum(weighted, Reduce::All)?
    };
    Ok(KldTerms {
        loss: Some(loss),
        dropped,
    })
}
