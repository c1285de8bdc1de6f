use super::{same_shape, Tensor};
use crate::error::Result;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU; the subgradient at 0 is taken as 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(input, "relu_backward", |g, x| if x > 0.0 { g } else { 0.0 })
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of the logistic function given its forward output `y`.
pub fn sigmoid_backward(grad_out: &Tensor, output: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(output, "sigmoid_backward", |g, y| g * y * (1.0 - y))
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

/// Residual attention modulation `(1 + mask) ∘ features`.
pub fn attention_apply(features: &Tensor, mask: &Tensor) -> Result<Tensor> {
    features.zip_map(mask, "attention_apply", |f, m| f + m * f)
}

/// Returns `(dL/dF, dL/dMask) = ((1 + mask) ∘ g, F ∘ g)`.
pub fn attention_apply_backward(
    grad_out: &Tensor,
    features: &Tensor,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    same_shape("attention_apply_backward", grad_out, features)?;
    let df = grad_out.zip_map(mask, "attention_apply_backward", |g, m| (1.0 + m) * g)?;
    let dm = grad_out.zip_map(features, "attention_apply_backward", |g, f| f * g)?;
    Ok((df, dm))
}
