use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SMOOTH: f64 = 1.0;

/// Soft dice loss `1 − (2·Σp·g + s) / (Σp + Σg + s)` over the whole batch.
///
/// `gt` must be binary and `prob` must lie in [0, 1].
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, prob: &Var<T>, gt: &Tensor<T>, smooth: f64) -> Result<Var<T>> {
    if smooth.is_nan() || smooth <= 0.0 {
        return Err(Error::Validation(format!("dice smooth term must be positive, got {smooth}")));
    }
    if prob.shape() != gt.shape() {
        return Err(Error::shape("dice_loss", prob.shape(), gt.shape()));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!("ground truth must be binary, found {}", v.as_f64())));
    }
    if let Some(v) = prob
        .value()
        .data()
        .iter()
        .find(|&&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(Error::Validation(format!("probabilities must lie in [0, 1], found {}", v.as_f64())));
    }
    tape.dice_loss_unchecked(prob, Arc::new(gt.clone()), T::lit(smooth))
}

/// Dice loss of plain tensors, without recording.
pub fn dice_value<T: Scalar>(prob: &Tensor<T>, gt: &Tensor<T>, smooth: f64) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let p = tape.constant(prob.clone());
    Ok(dice_loss(&mut tape, &p, gt, smooth)?.value().data()[0].as_f64())
}
