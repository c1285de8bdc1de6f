use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding chosen so that stride 1 preserves spatial extents.
    Same,
    /// No padding.
    Valid,
}

/// Geometry of a 2-D convolution (cross-correlation, no kernel flip).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Stride 1, dilation 1, `same` padding.
    pub fn same(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel.0 * self.kernel.1
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid("conv2d", "stride and dilation must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::invalid("conv2d", "channel counts and kernel extents must be positive"));
        }
        Ok(())
    }

    /// Output extent and leading pad along one axis.
    fn axis(&self, extent: usize, k: usize) -> Result<(usize, usize)> {
        let eff = self.dilation * (k - 1) + 1;
        match self.padding {
            Padding::Same => {
                let out = extent.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + eff).saturating_sub(extent);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if extent < eff {
                    return Err(Error::shape(
                        "conv2d",
                        format!("input extent {extent} smaller than dilated kernel extent {eff}"),
                    ));
                }
                Ok(((extent - eff) / self.stride + 1, 0))
            }
        }
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

fn check(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let [n, c, h, w] = input.as_stack_dims("conv2d")?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec expects in_channels = {}", spec.in_channels),
        ));
    }
    let ws = spec.weight_shape();
    if weights.shape() != ws {
        let names = ["out_channels", "in_channels", "kernel rows", "kernel cols"];
        let dim = weights
            .shape()
            .iter()
            .zip(ws)
            .position(|(a, b)| *a != b)
            .map(|i| names[i])
            .unwrap_or("rank");
        return Err(Error::shape(
            "conv2d",
            format!("weights {:?} disagree with spec {ws:?} in {dim}", weights.shape()),
        ));
    }
    let (oh, pad_top) = spec.axis(h, spec.kernel.0)?;
    let (ow, pad_left) = spec.axis(w, spec.kernel.1)?;
    Ok(Geometry {
        n,
        h,
        w,
        oh,
        ow,
        pad_top,
        pad_left,
    })
}

/// Range of output coordinates whose tap at `offset` lands inside `[0, extent)`.
fn valid_range(out: usize, stride: usize, offset: isize, extent: usize) -> (usize, usize) {
    // in = o*stride + offset
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_in = extent as isize - 1 - offset;
    let hi = if hi_in < 0 {
        0
    } else {
        (hi_in as usize / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], c: usize, g: &Geometry, spec: &ConvSpec, cols: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (s, d) = (spec.stride, spec.dilation);
    let p = g.oh * g.ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            let oy_off = (ky * d) as isize - g.pad_top as isize;
            let (y0, y1) = valid_range(g.oh, s, oy_off, g.h);
            for kx in 0..kw {
                let ox_off = (kx * d) as isize - g.pad_left as isize;
                let (x0, x1) = valid_range(g.ow, s, ox_off, g.w);
                let dst = &mut cols[row * p..(row + 1) * p];
                // only taps falling in the padding need zeros
                dst[..y0 * g.ow].fill(0.0);
                dst[y1 * g.ow..].fill(0.0);
                for oy in y0..y1 {
                    let iy = (oy * s) as isize + oy_off;
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    out_row[..x0].fill(0.0);
                    out_row[x1..].fill(0.0);
                    if s == 1 {
                        let ix0 = (x0 as isize + ox_off) as usize;
                        out_row[x0..x1].copy_from_slice(&src_row[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            out_row[ox] = src_row[((ox * s) as isize + ox_off) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, g: &Geometry, spec: &ConvSpec, dx: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (s, d) = (spec.stride, spec.dilation);
    let p = g.oh * g.ow;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..kh {
            let oy_off = (ky * d) as isize - g.pad_top as isize;
            let (y0, y1) = valid_range(g.oh, s, oy_off, g.h);
            for kx in 0..kw {
                let ox_off = (kx * d) as isize - g.pad_left as isize;
                let (x0, x1) = valid_range(g.ow, s, ox_off, g.w);
                let src = &cols[row * p..(row + 1) * p];
                for oy in y0..y1 {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let col_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    if s == 1 {
                        let ix0 = (x0 as isize + ox_off) as usize;
                        for (d, c) in dst_row[ix0..ix0 + (x1 - x0)].iter_mut().zip(&col_row[x0..x1]) {
                            *d += c;
                        }
                    } else {
                        for ox in x0..x1 {
                            dst_row[((ox * s) as isize + ox_off) as usize] += col_row[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers size the buffers for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D cross-correlation of `[C_in,H,W]` or `[N,C_in,H,W]` input with
/// `[C_out,C_in,kh,kw]` weights plus a per-output-channel bias.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = check(input, weights, spec)?;
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} must be [{}]", bias.shape(), spec.out_channels),
        ));
    }
    let c_in = spec.in_channels;
    let c_out = spec.out_channels;
    let k = spec.fan_in();
    let p = g.oh * g.ow;
    let in_block = c_in * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; g.n * c_out * p];
    for s in 0..g.n {
        im2col(&input.data()[s * in_block..(s + 1) * in_block], c_in, &g, spec, &mut cols);
        let dst = &mut out[s * c_out * p..(s + 1) * c_out * p];
        for (co, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        gemm(c_out, k, p, weights.data(), (k, 1), &cols, (p, 1), 1.0, dst);
    }
    let shape = if input.rank() == 3 {
        vec![c_out, g.oh, g.ow]
    } else {
        vec![g.n, c_out, g.oh, g.ow]
    };
    Tensor::new(shape, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Exact gradients of [`conv2d`] with respect to its input, weights and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    let g = check(input, weights, spec)?;
    let c_in = spec.in_channels;
    let c_out = spec.out_channels;
    let expected: Vec<usize> = if input.rank() == 3 {
        vec![c_out, g.oh, g.ow]
    } else {
        vec![g.n, c_out, g.oh, g.ow]
    };
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?} must equal forward output {expected:?}", grad_out.shape()),
        ));
    }
    let k = spec.fan_in();
    let p = g.oh * g.ow;
    let in_block = c_in * g.h * g.w;
    let mut cols = vec![0.0; k * p];
    let mut grad_cols = vec![0.0; k * p];
    let mut grad_w = vec![0.0; c_out * k];
    let mut grad_b = vec![0.0; c_out];
    let mut grad_in = vec![0.0; input.len()];
    for s in 0..g.n {
        let go = &grad_out.data()[s * c_out * p..(s + 1) * c_out * p];
        for (co, row) in go.chunks_exact(p).enumerate() {
            grad_b[co] += row.iter().sum::<f64>();
        }
        im2col(&input.data()[s * in_block..(s + 1) * in_block], c_in, &g, spec, &mut cols);
        // dW += dY · colsᵀ
        gemm(c_out, p, k, go, (p, 1), &cols, (1, p), 1.0, &mut grad_w);
        // dcols = Wᵀ · dY
        gemm(k, c_out, p, weights.data(), (1, k), go, (p, 1), 0.0, &mut grad_cols);
        col2im(&grad_cols, c_in, &g, spec, &mut grad_in[s * in_block..(s + 1) * in_block]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weights: Tensor::new(weights.shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![c_out], grad_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_1x1() {
        let x = Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, &ConvSpec::same(1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn valid_sum_of_ones() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let spec = ConvSpec {
            padding: Padding::Valid,
            ..ConvSpec::same(1, 1, 3)
        };
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn scalar_backward() {
        let x = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let g = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let grads = conv2d_backward(&g, &x, &w, &ConvSpec::same(1, 1, 1)).unwrap();
        assert_eq!(grads.input.data(), &[3.0]);
        assert_eq!(grads.weights.data(), &[2.0]);
        assert_eq!(grads.bias.data(), &[1.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = Tensor::from_fn(&[2, 5, 5], |i| (i as f64).sin());
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64).cos());
        let spec = ConvSpec::same(2, 3, 3);
        let grads = conv2d_backward(&Tensor::zeros(&[3, 5, 5]), &x, &w, &spec).unwrap();
        assert_eq!(grads.input.max_abs(), 0.0);
        assert_eq!(grads.weights.max_abs(), 0.0);
        assert_eq!(grads.bias.max_abs(), 0.0);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let err = conv2d(&x, &w, &b, &ConvSpec::same(2, 4, 3)).unwrap_err();
        assert!(err.to_string().contains("out_channels"), "{err}");
        let err = conv2d(&x, &w, &b, &ConvSpec::same(3, 3, 3)).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
        let spec = ConvSpec {
            padding: Padding::Valid,
            ..ConvSpec::same(2, 3, 3)
        }
        .with_dilation(2);
        assert!(conv2d(&x, &w, &b, &spec).is_err());
    }

    #[test]
    fn same_padding_stride_two_halves_extent() {
        let x = Tensor::zeros(&[1, 7, 8]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let spec = ConvSpec {
            stride: 2,
            ..ConvSpec::same(1, 1, 3)
        };
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
    }
}
