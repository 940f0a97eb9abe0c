//! Finite-difference check of a head's backward pass.
//!
//! The scalar under test is `sum_c r_c * logits_c` for fixed weights `r`.
//! For `protobin` the prototype gradient is checked against the
//! straight-through surrogate `sign(p0) + (p - p0)` around the current
//! prototypes `p0`, which is exactly what the backward pass differentiates.

use super::{binarize, Clip, HeadError, HeadKind, HeadState, Result};
use crate::numerics::{grad_check, DenseTensor};

/// Largest relative error over all parameter tensors.
///
/// Fails with [`HeadError::Degenerate`] when a `protobin` prototype
/// coordinate lies within `10 * eps` of the sign boundary, or when a
/// perturbation of size `eps` moves a max-pooling argmax or flips a ReLU.
/// Both put the difference quotient across a kink; callers resample.
pub fn head_grad_error(head: &HeadState, clip: &Clip, weights: &[f64], eps: f64) -> Result<f64> {
    if weights.len() != head.dims.classes {
        return Err(HeadError::Dimension(format!(
            "{} logit weights for {} classes",
            weights.len(),
            head.dims.classes
        )));
    }
    if head.kind == HeadKind::Protobin && head.params[0].tensor.data().iter().any(|&p| (p as f64).abs() < 10.0 * eps) {
        return Err(HeadError::Degenerate("prototype coordinate at the sign boundary".into()));
    }
    let out = head.forward(clip)?;
    let base_pattern = out.branch_pattern();
    let mut grads = head.zero_grads();
    head.backward(clip, &out, weights, &mut grads)?;
    let weighted = |logits: &[f64]| logits.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>();

    let mut worst = 0.0f64;
    for i in 0..head.params.len() {
        let theta = head.params[i].tensor.clone();
        let analytic = DenseTensor::from_f64(theta.shape().to_vec(), &grads.bufs[i])?;
        let straight_through = head.kind == HeadKind::Protobin && i == 0;
        let anchor_signs = binarize(theta.data());
        let anchor = theta.to_f64();
        let mut probe = head.clone();
        let mut failure = None;
        let err = grad_check(
            |t| {
                probe.params[i].tensor = t.clone();
                let out = if straight_through {
                    let surrogate: Vec<f64> = t
                        .data()
                        .iter()
                        .zip(&anchor_signs)
                        .zip(&anchor)
                        .map(|((&p, &s), &p0)| s as f64 + (p as f64 - p0))
                        .collect();
                    probe.forward_with_prototypes(clip, &surrogate)
                } else {
                    probe.forward(clip)
                };
                match out {
                    Ok(o) if o.branch_pattern() != base_pattern => {
                        failure.get_or_insert(HeadError::Degenerate("perturbation crosses a max-pooling or ReLU kink".into()));
                        f64::NAN
                    }
                    Ok(o) => weighted(&o.logits),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &theta,
            &analytic,
            eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(err?);
    }
    Ok(worst)
}
