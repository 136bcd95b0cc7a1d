use super::{ParameterSet, Tape, Var};
use crate::{Error, Result};

/// Largest relative disagreement between tape gradients and central
/// differences, over every scalar entry of every parameter:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// Uses the fourth-order stencil
/// `(f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h`, which stays accurate
/// at steps large enough to keep rounding noise below tiny gradients of
/// saturated softmaxes.
///
/// `loss` records a scalar loss for the given parameters on a fresh tape.
pub fn finite_difference_check<F>(loss: F, point: &ParameterSet, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut params = point.clone();
    let mut tape = Tape::new();
    let out = loss(&mut tape, &params)?;
    tape.backward(out, &mut params)?;
    drop(tape);

    let eval = |params: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, params)?;
        tape.value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(tape.value(out).shape().to_vec()))
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.value(id).len() {
            let original = params.value(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                params.value_mut(id).data_mut()[k] = original + offset;
                eval(&params)
            };
            let (up2, up, down, down2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
            params.value_mut(id).data_mut()[k] = original;

            let numeric = ((down2 - up2) + 8.0 * (up - down)) / (12.0 * step);
            let analytic = params.grad(id).data()[k];
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
