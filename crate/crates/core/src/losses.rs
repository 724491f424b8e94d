//! Loss primitives over probability rows.
//!
//! `kl_*(model, reference)` is `D_KL(reference || model)`: the second argument
//! is the reference distribution. Gradients flow through whichever arguments
//! are tracked on the tape; callers pass constants for frozen references.

use std::sync::atomic::{AtomicU64, Ordering};

use robustdistill_tensor::{Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Probabilities are clipped to `[CLIP, 1]` before every logarithm.
pub const CLIP: f64 = 1e-12;

static CLIPPED: AtomicU64 = AtomicU64::new(0);

/// Number of probability entries clipped at [`CLIP`] since process start.
pub fn clip_count() -> u64 {
    CLIPPED.load(Ordering::Relaxed)
}

fn count_clipped<T: Scalar>(t: &Tensor<T>) {
    let lo = T::lit(CLIP);
    let n = t.data().iter().filter(|&&v| v < lo).count();
    if n > 0 {
        CLIPPED.fetch_add(n as u64, Ordering::Relaxed);
    }
}

fn clipped_log<'t, T: Scalar>(p: Var<'t, T>) -> Result<Var<'t, T>> {
    count_clipped(&p.value());
    Ok(p.clamp(T::lit(CLIP), T::one()).log()?)
}

fn check_labels<T: Scalar>(probs: &Var<'_, T>, y: &[usize]) -> Result<()> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != y.len() {
        return Err(Error::Shape(format!("probabilities {s:?} do not match {} labels", y.len())));
    }
    Ok(())
}

/// Per-row `-log p_y`, shape `[batch]`.
pub fn ce_rows<'t, T: Scalar>(probs: Var<'t, T>, y: &[usize]) -> Result<Var<'t, T>> {
    check_labels(&probs, y)?;
    count_clipped(&probs.value());
    Ok(probs.clamp(T::lit(CLIP), T::one()).gather(y)?.log()?.neg())
}

/// Batch mean of `-log p_y`.
pub fn ce_loss<'t, T: Scalar>(probs: Var<'t, T>, y: &[usize]) -> Result<Var<'t, T>> {
    Ok(ce_rows(probs, y)?.mean())
}

/// Per-row `sum_k r_k (log r_k - log p_k)`, shape `[batch]`.
pub fn kl_rows<'t, T: Scalar>(model: Var<'t, T>, reference: Var<'t, T>) -> Result<Var<'t, T>> {
    let (a, b) = (model.shape(), reference.shape());
    if a != b || a.len() != 2 {
        return Err(Error::Shape(format!("KL operands {a:?} and {b:?}")));
    }
    let log_ratio = clipped_log(reference)?.sub(clipped_log(model)?)?;
    Ok(reference.mul(log_ratio)?.sum_axis(1)?)
}

/// Batch mean of [`kl_rows`].
pub fn kl_loss<'t, T: Scalar>(model: Var<'t, T>, reference: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(kl_rows(model, reference)?.mean())
}

/// Per-row `-log p_y - log(1 - max_{k != y} p_k)`.
pub fn bce_mart_rows<'t, T: Scalar>(probs: Var<'t, T>, y: &[usize]) -> Result<Var<'t, T>> {
    check_labels(&probs, y)?;
    let c = probs.shape()[1];
    let mut mask = Tensor::zeros(vec![y.len(), c]);
    for (i, &label) in y.iter().enumerate() {
        mask.data_mut()[i * c + label] = T::lit(-2.0);
    }
    let others = probs.add(probs.tape().constant(mask))?.max_axis(1)?;
    let wrong = clipped_log(others.rsub_scalar(T::one()))?.neg();
    ce_rows(probs, y)?.add(wrong).map_err(Into::into)
}

/// Batch mean of [`bce_mart_rows`].
pub fn bce_mart<'t, T: Scalar>(probs: Var<'t, T>, y: &[usize]) -> Result<Var<'t, T>> {
    Ok(bce_mart_rows(probs, y)?.mean())
}

/// Per-row untargeted margin `max_{k != y} z_k - z_y` on logits.
pub fn cw_margin_rows<'t, T: Scalar>(logits: Var<'t, T>, y: &[usize]) -> Result<Var<'t, T>> {
    check_labels(&logits, y)?;
    let z = logits.value();
    let c = z.shape()[1];
    let runner_up: Vec<usize> = y
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let row = z.row(i);
            let mut best = usize::MAX;
            for k in 0..c {
                if k != label && (best == usize::MAX || row[k] > row[best]) {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(logits.gather(&runner_up)?.sub(logits.gather(y)?)?)
}

/// Row-stochastic check used by soft-label producers and tests.
pub fn is_row_stochastic<T: Scalar>(rows: &Tensor<T>, tol: f64) -> bool {
    rows.ndim() == 2
        && (0..rows.rows()).all(|i| {
            let r = rows.row(i);
            r.iter().all(|v| v.as_f64() >= 0.0 && v.as_f64() <= 1.0)
                && (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs() <= tol
        })
}
