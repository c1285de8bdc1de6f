use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Cross-channel local response normalisation:
/// `b_c = a_c / (k + (alpha/n) Σ_{c' ∈ [c-r, c+r]} a_{c'}²)^beta` with
/// `n = 2r + 1` and the window clamped to the valid channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnSpec {
    pub depth_radius: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnSpec {
    fn default() -> Self {
        LrnSpec {
            depth_radius: 2,
            k: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.alpha >= 0.0 && self.beta > 0.0) {
            return Err(Error::invalid(
                "lrn",
                format!("need k > 0, alpha >= 0, beta > 0; got {self:?}"),
            ));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.alpha / (2 * self.depth_radius + 1) as f64
    }
}

/// Per-position denominators `D_c = k + (alpha/n) Σ a²`.
fn denominators(x: &[f64], c: usize, plane: usize, spec: &LrnSpec) -> Vec<f64> {
    let scale = spec.scale();
    let mut d = vec![0.0; c * plane];
    for ch in 0..c {
        let lo = ch.saturating_sub(spec.depth_radius);
        let hi = (ch + spec.depth_radius).min(c - 1);
        let dst = &mut d[ch * plane..(ch + 1) * plane];
        for src_ch in lo..=hi {
            let src = &x[src_ch * plane..(src_ch + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v * v;
            }
        }
        for o in dst.iter_mut() {
            *o = spec.k + scale * *o;
        }
    }
    d
}

/// `d^(-beta)`, with a sqrt-based path for the common `beta = 0.75`.
fn inv_pow(d: f64, beta: f64) -> f64 {
    if beta == 0.75 {
        let s = d.sqrt();
        1.0 / (s * s.sqrt())
    } else {
        d.powf(-beta)
    }
}

pub fn lrn(input: &Tensor, spec: &LrnSpec) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = input.as_stack_dims("lrn")?;
    let plane = h * w;
    let block = c * plane;
    let mut out = Vec::with_capacity(input.len());
    for s in 0..n {
        let x = &input.data()[s * block..(s + 1) * block];
        let d = denominators(x, c, plane, spec);
        out.extend(x.iter().zip(&d).map(|(&a, &den)| a * inv_pow(den, spec.beta)));
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn lrn_backward(grad_out: &Tensor, input: &Tensor, spec: &LrnSpec) -> Result<Tensor> {
    super::same_shape("lrn_backward", grad_out, input)?;
    let [n, c, h, w] = input.as_stack_dims("lrn_backward")?;
    let plane = h * w;
    let block = c * plane;
    let coef = 2.0 * spec.beta * spec.scale();
    let mut grad = Vec::with_capacity(input.len());
    for s in 0..n {
        let x = &input.data()[s * block..(s + 1) * block];
        let g = &grad_out.data()[s * block..(s + 1) * block];
        let d = denominators(x, c, plane, spec);
        let dp: Vec<f64> = d.iter().map(|&v| inv_pow(v, spec.beta)).collect();
        // t_c = g_c a_c D_c^{-beta-1}
        let t: Vec<f64> = (0..block).map(|i| g[i] * x[i] * dp[i] / d[i]).collect();
        for ch in 0..c {
            let lo = ch.saturating_sub(spec.depth_radius);
            let hi = (ch + spec.depth_radius).min(c - 1);
            let mut window = vec![0.0; plane];
            for cc in lo..=hi {
                for (wv, tv) in window.iter_mut().zip(&t[cc * plane..(cc + 1) * plane]) {
                    *wv += tv;
                }
            }
            let i0 = ch * plane;
            grad.extend((0..plane).map(|p| g[i0 + p] * dp[i0 + p] - coef * x[i0 + p] * window[p]));
        }
    }
    Tensor::new(input.shape().to_vec(), grad)
}
