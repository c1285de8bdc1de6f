use super::Tensor;
use crate::error::{Error, Result};

/// 2×2 max pooling with stride 2. Returns the pooled maps together with the
/// flat input index each output was taken from; ties go to the first index in
/// row-major window order.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = input.as_stack_dims("max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "max_pool2",
            format!("spatial extents {h}x{w} must both be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    let shape = if input.rank() == 3 {
        vec![c, oh, ow]
    } else {
        vec![n, c, oh, ow]
    };
    Ok((Tensor::new(shape, out)?, idx))
}

/// Routes each pooled gradient back to the input position that won its window.
pub fn max_pool2_backward(grad_out: &Tensor, indices: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != indices.len() {
        return Err(Error::shape(
            "max_pool2_backward",
            format!("{} gradients for {} recorded indices", grad_out.len(), indices.len()),
        ));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &v) in indices.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(grad)
}

/// Source taps `(i0, i1, frac)` for align-corners-false 2× upsampling along one axis.
fn taps(extent: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * extent)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2× upsampling (align-corners false, edge-clamped).
pub fn bilinear_upsample2(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.as_stack_dims("bilinear_upsample2")?;
    let (ty, tx) = (taps(h), taps(w));
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in 0..n * c {
        let p = &x[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let shape = if input.rank() == 3 {
        vec![c, 2 * h, 2 * w]
    } else {
        vec![n, c, 2 * h, 2 * w]
    };
    Tensor::new(shape, out)
}

pub fn bilinear_upsample2_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let [n, c, h, w] = probe.as_stack_dims("bilinear_upsample2_backward")?;
    if grad_out.len() != n * c * 4 * h * w {
        return Err(Error::shape(
            "bilinear_upsample2_backward",
            format!("grad_out {:?} does not match input {input_shape:?} upsampled 2x", grad_out.shape()),
        ));
    }
    let (ty, tx) = (taps(h), taps(w));
    let mut grad = probe;
    let g = grad.data_mut();
    let go = grad_out.data();
    let ow = 2 * w;
    for plane in 0..n * c {
        let gp = &mut g[plane * h * w..(plane + 1) * h * w];
        let src = &go[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                gp[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                gp[y0 * w + x1] += v * (1.0 - fy) * fx;
                gp[y1 * w + x0] += v * fy * (1.0 - fx);
                gp[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Ok(grad)
}
