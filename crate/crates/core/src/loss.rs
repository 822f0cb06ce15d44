//! Per-vector distillation losses on plain slices.

use crate::error::{Error, Result};
use crate::graph::fwd;
use crate::tensor::Tensor;

/// `tau^2 * KL(softmax(teacher / tau) || softmax(student / tau))`.
///
/// Teacher entries at or below the mask sentinel carry zero probability.
pub fn kl_divergence(teacher: &[f64], student: &[f64], tau: f64) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::shape(
            "kl_divergence",
            format!("teacher {} vs student {}", teacher.len(), student.len()),
        ));
    }
    let t = Tensor::row(teacher.to_vec());
    let s = Tensor::row(student.to_vec());
    let (loss, _, _) = fwd::kl_div(&s, &t, tau)?;
    Ok(loss.data()[0])
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    let (loss, _) = fwd::cross_entropy(&Tensor::row(logits.to_vec()), &[target])?;
    Ok(loss.data()[0])
}
