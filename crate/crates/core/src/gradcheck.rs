//! Central finite-difference check of model gradients.
//!
//! The numeric side only ever evaluates the forward loss, so it stays
//! independent of the tape's vector-Jacobian products.

use crate::error::Result;
use crate::model::{loss_and_grads, objective, Bound, Dropout, ModelParams, Target};
use crate::numkernel::{Matrix, Tape};

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(block, entry)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the joint clip loss against central
/// differences with step `h`. Dropout masks are regenerated from `seed` for
/// every evaluation, so all evaluations see the same masks.
pub fn check(
    params: &ModelParams,
    features: &Matrix,
    target: Target<'_>,
    dropout_p: f64,
    seed: u64,
    h: f64,
) -> Result<GradCheck> {
    let dropout = || {
        if dropout_p > 0.0 {
            Dropout::training(dropout_p, seed)
        } else {
            Dropout::inference()
        }
    };
    let (_, analytic) = loss_and_grads(params, features, target, &mut dropout())?;
    let mut result = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut probe = params.clone();
    for (block, grad) in analytic.iter().enumerate() {
        for entry in 0..grad.data().len() {
            let original = probe.blocks()[block].data()[entry];
            probe.blocks_mut()[block].data_mut()[entry] = original + h;
            let plus = loss_value(&probe, features, target, &mut dropout())?;
            probe.blocks_mut()[block].data_mut()[entry] = original - h;
            let minus = loss_value(&probe, features, target, &mut dropout())?;
            probe.blocks_mut()[block].data_mut()[entry] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[entry];
            let err = relative_error(a, numeric);
            result.entries += 1;
            if err > result.max_rel_err {
                result = GradCheck {
                    max_rel_err: err,
                    worst: (block, entry),
                    analytic: a,
                    numeric,
                    entries: result.entries,
                };
            }
        }
    }
    Ok(result)
}

fn loss_value(params: &ModelParams, features: &Matrix, target: Target<'_>, dropout: &mut Dropout) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let input = tape.constant(features.clone());
    let loss = objective(&mut tape, &bound, params, input, target, dropout)?;
    Ok(tape.value(loss).get(0, 0))
}
