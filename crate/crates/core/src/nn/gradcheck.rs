//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::{cross_entropy, cross_entropy_grad, Gradients, Network, Tensor};
use crate::error::Result;
use crate::rng;

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor so that two vanishing gradients compare as equal.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` at `x` along each coordinate.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// Cross-entropy of a training-mode forward pass whose dropout draws come
/// from the fixed stream `dropout_seed`.
fn loss_at(net: &Network, input: &Tensor, label: usize, dropout_seed: u64) -> Result<f64> {
    let mut r = rng::stream(dropout_seed, &[rng::tag::DROPOUT]);
    let (probs, _) = net.forward_recorded(input, &mut r)?;
    cross_entropy(&probs, label)
}

/// Analytic gradients of the cross-entropy loss for parameters and input.
pub fn analytic_gradients(net: &Network, input: &Tensor, label: usize, dropout_seed: u64) -> Result<(Gradients, Tensor)> {
    let mut r = rng::stream(dropout_seed, &[rng::tag::DROPOUT]);
    let (probs, tape) = net.forward_recorded(input, &mut r)?;
    let back = net.backward(&tape, &cross_entropy_grad(&probs, label)?)?;
    Ok((back.params, back.input))
}

/// Checks back-propagation of `net` (ending in SoftMax) against central
/// differences of the cross-entropy loss, for every parameter tensor and the
/// input.
pub fn gradcheck(net: &Network, input: &Tensor, label: usize, tolerance: f64) -> Result<GradcheckReport> {
    let seed = 0x5eed;
    let (params, input_grad) = analytic_gradients(net, input, label, seed)?;
    gradcheck_against(net, input, label, tolerance, seed, &params, &input_grad)
}

/// Same as [`gradcheck`] but against caller-supplied analytic gradients.
pub fn gradcheck_against(
    net: &Network,
    input: &Tensor,
    label: usize,
    tolerance: f64,
    dropout_seed: u64,
    params: &Gradients,
    input_grad: &Tensor,
) -> Result<GradcheckReport> {
    let mut tensors = Vec::new();
    let mut probe = net.clone();
    for (i, analytic) in params.0.iter().enumerate() {
        let base = net.params()[i].data().to_vec();
        let mut failure = None;
        let numeric = numeric_gradient(&base, FD_STEP, |w| {
            probe.params_mut()[i].data_mut().copy_from_slice(w);
            loss_at(&probe, input, label, dropout_seed).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        });
        probe.params_mut()[i].data_mut().copy_from_slice(&base);
        if let Some(e) = failure {
            return Err(e);
        }
        tensors.push(TensorCheck {
            name: net.param_name(i),
            entries: base.len(),
            max_rel_error: max_relative_error(analytic.data(), &numeric),
        });
    }
    let numeric = numeric_gradient(input.data(), FD_STEP, |x| {
        let t = Tensor::from_vec(input.shape().to_vec(), x.to_vec()).expect("same shape");
        loss_at(net, &t, label, dropout_seed).unwrap_or(f64::NAN)
    });
    tensors.push(TensorCheck {
        name: "input".into(),
        entries: input.len(),
        max_rel_error: max_relative_error(input_grad.data(), &numeric),
    });
    Ok(GradcheckReport { tolerance, tensors })
}
