//! Dense row-major `f64` tensors and the differentiable primitives every layer
//! is built from.
//!
//! Spatial ops accept either a single feature map `[C, H, W]` or a stack of
//! them `[N, C, H, W]`; the leading axis of a stack is treated as a batch of
//! independent maps (slices of a volume). Each forward op has a hand-written
//! backward counterpart in the same submodule.

mod activation;
mod conv;
mod norm;
mod pool;

pub use activation::{
    attention_apply, attention_apply_backward, hadamard, relu, relu_backward, sigmoid,
    sigmoid_backward,
};
pub(crate) use activation::sigmoid_scalar;
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec, Padding};
pub use norm::{lrn, lrn_backward, LrnSpec};
pub use pool::{bilinear_upsample2, bilinear_upsample2_backward, max_pool2, max_pool2_backward};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("Tensor::new", format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        same_shape("accumulate", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_shape("dot", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Views a `[C,H,W]` map as a one-element stack; stacks pass through.
    pub(crate) fn as_stack_dims(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok([1, c, h, w]),
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(
                op,
                format!("expected [C,H,W] or [N,C,H,W], got {:?}", self.shape),
            )),
        }
    }

    /// Element `i` of the leading axis, e.g. one slice of a `[N,C,H,W]` stack.
    pub fn index_axis0(&self, i: usize) -> Result<Tensor> {
        let n = *self.shape.first().unwrap_or(&0);
        if i >= n || self.shape.len() < 2 {
            return Err(Error::shape(
                "index_axis0",
                format!("index {i} out of range for shape {:?}", self.shape),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            same_shape("stack", first, t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates `[N,C_k,H,W]` stacks (or `[C_k,H,W]` maps) along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "nothing to concatenate"))?;
        let rank = first.rank();
        let [n, _, h, w] = first.as_stack_dims("concat_channels")?;
        let mut channels = 0;
        for p in parts {
            let [pn, pc, ph, pw] = p.as_stack_dims("concat_channels")?;
            if p.rank() != rank || pn != n || ph != h || pw != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("operand {:?} does not match {:?} outside the channel axis", p.shape, first.shape),
                ));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for p in parts {
                let pc = p.shape[rank - 3];
                let block = pc * plane;
                data.extend_from_slice(&p.data[s * block..(s + 1) * block]);
            }
        }
        let shape = if rank == 3 {
            vec![channels, h, w]
        } else {
            vec![n, channels, h, w]
        };
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits the channel axis into blocks of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let rank = self.rank();
        let [n, c, h, w] = self.as_stack_dims("split_channels")?;
        if widths.iter().sum::<usize>() != c {
            return Err(Error::shape(
                "split_channels",
                format!("widths {widths:?} do not sum to {c} channels"),
            ));
        }
        let plane = h * w;
        let mut out: Vec<Vec<f64>> = widths.iter().map(|&k| Vec::with_capacity(n * k * plane)).collect();
        for s in 0..n {
            let mut offset = s * c * plane;
            for (buf, &k) in out.iter_mut().zip(widths) {
                buf.extend_from_slice(&self.data[offset..offset + k * plane]);
                offset += k * plane;
            }
        }
        Ok(out
            .into_iter()
            .zip(widths)
            .map(|(data, &k)| Tensor {
                shape: if rank == 3 { vec![k, h, w] } else { vec![n, k, h, w] },
                data,
            })
            .collect())
    }

    /// Reorders the axes of a rank-4 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute4(&self, perm: [usize; 4]) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::shape("permute4", format!("expected rank 4, got {:?}", self.shape)));
        }
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return Err(Error::invalid("permute4", format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let src = &self.shape;
        let src_strides = [src[1] * src[2] * src[3], src[2] * src[3], src[3], 1];
        let dst: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let strides: [usize; 4] = [
            src_strides[perm[0]],
            src_strides[perm[1]],
            src_strides[perm[2]],
            src_strides[perm[3]],
        ];
        let mut data = Vec::with_capacity(self.len());
        for a in 0..dst[0] {
            for b in 0..dst[1] {
                for c in 0..dst[2] {
                    let base = a * strides[0] + b * strides[1] + c * strides[2];
                    for d in 0..dst[3] {
                        data.push(self.data[base + d * strides[3]]);
                    }
                }
            }
        }
        Ok(Tensor { shape: dst, data })
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// Inverse of a 4-axis permutation.
pub fn invert_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| -(i as f64));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        // slice 1 starts with a's slice 1
        assert_eq!(cat.data()[16..20], a.data()[4..8]);
        let parts = cat.split_channels(&[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn permute_moves_elements() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let p = t.permute4([3, 1, 0, 2]).unwrap();
        assert_eq!(p.shape(), &[5, 3, 2, 4]);
        // element (a,b,c,d) of t lands at (d,b,a,c)
        let (a, b, c, d) = (1, 2, 3, 4);
        let src = ((a * 3 + b) * 4 + c) * 5 + d;
        let dst = ((d * 3 + b) * 2 + a) * 4 + c;
        assert_eq!(p.data()[dst], t.data()[src]);
        let back = p.permute4(invert_perm([3, 1, 0, 2])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn index_and_stack() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let rows: Vec<_> = (0..3).map(|i| t.index_axis0(i).unwrap()).collect();
        assert_eq!(Tensor::stack(&rows).unwrap(), t);
        assert!(t.index_axis0(3).is_err());
    }
}
