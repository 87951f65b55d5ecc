use super::Tensor;
use crate::error::{Error, Result};

/// Guard added inside the logarithm.
pub const CE_EPSILON: f64 = 1e-12;

/// Categorical cross-entropy `-ln(p[label] + 1e-12)`.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<f64> {
    let p = probs
        .data()
        .get(label)
        .ok_or_else(|| Error::arg(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-(p + CE_EPSILON).ln())
}

/// Gradient of [`cross_entropy`] with respect to the probability vector.
pub fn cross_entropy_grad(probs: &Tensor, label: usize) -> Result<Tensor> {
    if label >= probs.len() {
        return Err(Error::arg(format!("label {label} out of range for {} classes", probs.len())));
    }
    let mut g = Tensor::zeros(probs.shape());
    g.data_mut()[label] = -1.0 / (probs.data()[label] + CE_EPSILON);
    Ok(g)
}
