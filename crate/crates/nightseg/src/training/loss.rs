//! Training losses with analytic gradients: per-pixel cross-entropy with
//! ignore handling for the segmenter, and elementwise binary cross-entropy
//! on logits for the domain discriminator.

use super::{Result, TrainError};
use crate::data::{LabelMap, IGNORE_LABEL};
use crate::tensor::{Scalar, TensorImage};

/// Cross-entropy result: the scalar loss plus the gradient with respect to
/// the logits, already divided by the number of counted pixels.
pub struct CeLoss<T> {
    pub loss: f64,
    pub grad: TensorImage<T>,
    pub valid_pixels: usize,
    /// Set when every pixel was ignore-labeled; the loss is 0 and the
    /// gradient is all zeros, and callers may want to log the oddity.
    pub all_ignored: bool,
}

/// Mean over non-ignore pixels of −log softmax(logits)[label].
///
/// Log-probabilities are computed in a max-shifted form, so arbitrarily
/// large logits cannot overflow. Ignore-labeled pixels contribute nothing
/// to the loss or the gradient.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &TensorImage<T>,
    labels: &[LabelMap],
) -> Result<CeLoss<T>> {
    let (b, k, h, w) = logits.dim();
    if labels.len() != b {
        return Err(TrainError::Shape(format!(
            "{} label maps for a batch of {b}",
            labels.len()
        )));
    }
    for (n, lab) in labels.iter().enumerate() {
        if lab.dim() != (h, w) {
            return Err(TrainError::Shape(format!(
                "label {n} is {:?}, logits are ({h},{w})",
                lab.dim()
            )));
        }
    }

    let mut grad = TensorImage::<T>::zeros(logits.raw_dim());
    let mut loss_sum = 0.0f64;
    let mut valid = 0usize;

    for n in 0..b {
        let lab = labels[n].data();
        for y in 0..h {
            for x in 0..w {
                let id = lab[[y, x]];
                if id == IGNORE_LABEL {
                    continue;
                }
                let id = id as usize;
                if id >= k {
                    return Err(TrainError::Shape(format!(
                        "label id {id} outside the {k}-class logit axis"
                    )));
                }
                valid += 1;
                let mut max = logits[[n, 0, y, x]];
                for c in 1..k {
                    max = max.max(logits[[n, c, y, x]]);
                }
                let mut denom = T::zero();
                for c in 0..k {
                    denom += (logits[[n, c, y, x]] - max).exp();
                }
                let lse = max + denom.ln();
                loss_sum -= (logits[[n, id, y, x]] - lse).to_f64();
                for c in 0..k {
                    let p = (logits[[n, c, y, x]] - lse).exp();
                    grad[[n, c, y, x]] = if c == id { p - T::one() } else { p };
                }
            }
        }
    }

    if valid == 0 {
        return Ok(CeLoss {
            loss: 0.0,
            grad,
            valid_pixels: 0,
            all_ignored: true,
        });
    }
    let inv = T::from_f64(1.0 / valid as f64);
    grad.mapv_inplace(|g| g * inv);
    Ok(CeLoss {
        loss: loss_sum / valid as f64,
        grad,
        valid_pixels: valid,
        all_ignored: false,
    })
}

/// Elementwise binary cross-entropy on logits against a constant target,
/// meaned over all elements. Returns the loss and d(loss)/d(logits).
///
/// Uses the overflow-safe identity
/// `bce(x, t) = max(x, 0) − x·t + ln(1 + exp(−|x|))`.
pub fn bce_with_logits<T: Scalar>(logits: &TensorImage<T>, target: f64) -> (f64, TensorImage<T>) {
    let n = logits.len();
    assert!(n > 0, "empty logit tensor");
    let t = T::from_f64(target);
    let inv = T::from_f64(1.0 / n as f64);
    let mut loss = 0.0f64;
    let grad = logits.mapv(|x| {
        let stable = x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
        loss += stable.to_f64();
        // sigmoid(x) − t, computed from the same stable exponential.
        let sig = T::one() / (T::one() + (-x).exp());
        (sig - t) * inv
    });
    (loss / n as f64, grad)
}
