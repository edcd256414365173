//! Binary cross-entropy over `[batch, T, N]` with an optional `[batch, T]`
//! validity mask (1 = real frame, 0 = padding).

use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` by [`bce_loss`].
pub const P_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to whatever was passed in (probabilities or logits).
    pub grad: Tensor,
}

fn check(x: &Tensor, targets: &Tensor, mask: Option<&Tensor>) -> Result<(usize, usize)> {
    x.expect_rank(3, "predictions")?;
    targets.expect_shape(x.dims())?;
    let d = x.dims();
    if let Some(m) = mask {
        m.expect_shape(&d[..2])?;
    }
    Ok((d[0] * d[1], d[2]))
}

fn valid_count(mask: Option<&Tensor>, frames: usize) -> f64 {
    match mask {
        Some(m) => m.data().iter().filter(|&&v| v != 0.0).count() as f64,
        None => frames as f64,
    }
}

fn reduce(
    x: &Tensor,
    targets: &Tensor,
    mask: Option<&Tensor>,
    elem: impl Fn(f64, f64) -> (f64, f64),
) -> Result<LossOutput> {
    let (frames, classes) = check(x, targets, mask)?;
    let count = valid_count(mask, frames) * classes as f64;
    let mut grad = Tensor::zeros_like(x);
    if count == 0.0 {
        return Ok(LossOutput { loss: 0.0, grad });
    }
    let mut loss = 0.0;
    let g = grad.data_mut();
    for f in 0..frames {
        if mask.is_some_and(|m| m.data()[f] == 0.0) {
            continue;
        }
        for k in f * classes..(f + 1) * classes {
            let (l, d) = elem(x.data()[k], targets.data()[k]);
            loss += l;
            g[k] = d / count;
        }
    }
    Ok(LossOutput {
        loss: loss / count,
        grad,
    })
}

/// Mean BCE on probabilities; the gradient is with respect to `probs`.
pub fn bce_loss(probs: &Tensor, targets: &Tensor, mask: Option<&Tensor>) -> Result<LossOutput> {
    reduce(probs, targets, mask, |p, y| {
        let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
        let l = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        (l, (p - y) / (p * (1.0 - p)))
    })
}

/// Mean BCE with the sigmoid folded in; the gradient is with respect to
/// the logits and is `(σ(x) - y) / count`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor, mask: Option<&Tensor>) -> Result<LossOutput> {
    if !logits.all_finite() {
        return Err(Error::argument("logits contain non-finite values"));
    }
    reduce(logits, targets, mask, |x, y| {
        let l = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        (l, sigmoid(x) - y)
    })
}
