//! A forward tape over the tensor primitives.
//!
//! Every node stores its forward value; [`Graph::backward`] walks the tape in
//! reverse and calls the hand-written backward function of each recorded op.

use crate::convlstm::{self, ConvLstmParams, SequenceTrace};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, LrnSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weights: Var,
        bias: Var,
        spec: ConvSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Lrn(Var, LrnSpec),
    MaxPool2 {
        input: Var,
        indices: Vec<usize>,
    },
    Upsample2(Var),
    Add(Var, Var),
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Permute(Var, [usize; 4]),
    Attention {
        features: Var,
        mask: Var,
    },
    ConvLstm {
        input: Var,
        params: Vec<Var>,
        trace: Box<SequenceTrace>,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let y = tensor::conv2d(self.value(input), self.value(weights), self.value(bias), &spec)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                weights,
                bias,
                spec,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = tensor::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn lrn(&mut self, x: Var, spec: LrnSpec) -> Result<Var> {
        let y = tensor::lrn(self.value(x), &spec)?;
        Ok(self.push(y, Op::Lrn(x, spec)))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, indices) = tensor::max_pool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool2 { input: x, indices }))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = tensor::bilinear_upsample2(self.value(x))?;
        Ok(self.push(y, Op::Upsample2(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let y = Tensor::concat_channels(&values)?;
        let rank = y.rank();
        let widths = values.iter().map(|t| t.shape()[rank - 3]).collect();
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    pub fn permute4(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let y = self.value(x).permute4(perm)?;
        Ok(self.push(y, Op::Permute(x, perm)))
    }

    pub fn attention(&mut self, features: Var, mask: Var) -> Result<Var> {
        let y = tensor::attention_apply(self.value(features), self.value(mask))?;
        Ok(self.push(y, Op::Attention { features, mask }))
    }

    /// Runs a ConvLSTM over the leading (slice) axis of `input`.
    ///
    /// `params` must list the parameter leaves in [`ConvLstmParams::NAMES`] order.
    pub fn convlstm(&mut self, input: Var, params: &[Var]) -> Result<Var> {
        if params.len() != ConvLstmParams::NAMES.len() {
            return Err(Error::invalid(
                "convlstm",
                format!("expected {} parameter nodes, got {}", ConvLstmParams::NAMES.len(), params.len()),
            ));
        }
        let p = ConvLstmParams::from_tensors(params.iter().map(|&v| self.value(v).clone()).collect())?;
        let trace = convlstm::sequence_forward(self.value(input), &p)?;
        let y = trace.hidden_states()?;
        Ok(self.push(
            y,
            Op::ConvLstm {
                input,
                params: params.to_vec(),
                trace: Box::new(trace),
            },
        ))
    }

    /// Mean squared error against a fixed target; produces a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        tensor::same_shape("mse", p, target)?;
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// `Σ w_k · x_k` over `[1]` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::shape("weighted_sum", format!("term {:?} is not a scalar", t.shape())));
            }
            total += w * t.data()[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse-mode sweep seeded with `seed` at `output` (`None` seeds ones).
    pub fn backward_with(&self, output: Var, seed: Option<Tensor>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = seed.unwrap_or_else(|| Tensor::full(self.value(output).shape(), 1.0));
        tensor::same_shape("backward", &seed, self.value(output))?;
        grads[output.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.accumulate(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                    spec,
                } => {
                    let cg = tensor::conv2d_backward(&g, self.value(*input), self.value(*weights), spec)?;
                    acc(&mut grads, *input, cg.input)?;
                    acc(&mut grads, *weights, cg.weights)?;
                    acc(&mut grads, *bias, cg.bias)?;
                }
                Op::Relu(x) => {
                    let d = tensor::relu_backward(&g, self.value(*x))?;
                    acc(&mut grads, *x, d)?;
                }
                Op::Sigmoid(x) => {
                    let d = tensor::sigmoid_backward(&g, &node.value)?;
                    acc(&mut grads, *x, d)?;
                }
                Op::Lrn(x, spec) => {
                    let d = tensor::lrn_backward(&g, self.value(*x), spec)?;
                    acc(&mut grads, *x, d)?;
                }
                Op::MaxPool2 { input, indices } => {
                    let d = tensor::max_pool2_backward(&g, indices, self.value(*input).shape())?;
                    acc(&mut grads, *input, d)?;
                }
                Op::Upsample2(x) => {
                    let d = tensor::bilinear_upsample2_backward(&g, self.value(*x).shape())?;
                    acc(&mut grads, *x, d)?;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Concat { parts, widths } => {
                    for (v, d) in parts.iter().zip(g.split_channels(widths)?) {
                        acc(&mut grads, *v, d)?;
                    }
                }
                Op::Permute(x, perm) => {
                    let d = g.permute4(tensor::invert_perm(*perm))?;
                    acc(&mut grads, *x, d)?;
                }
                Op::Attention { features, mask } => {
                    let (df, dm) =
                        tensor::attention_apply_backward(&g, self.value(*features), self.value(*mask))?;
                    acc(&mut grads, *features, df)?;
                    acc(&mut grads, *mask, dm)?;
                }
                Op::ConvLstm {
                    input,
                    params,
                    trace,
                } => {
                    let p = ConvLstmParams::from_tensors(params.iter().map(|&v| self.value(v).clone()).collect())?;
                    let bg = convlstm::sequence_backward(trace, &p, &g)?;
                    acc(&mut grads, *input, bg.inputs)?;
                    for (v, d) in params.iter().zip(bg.params.into_tensors()) {
                        acc(&mut grads, *v, d)?;
                    }
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let scale = 2.0 * g.data()[0] / p.len() as f64;
                    let d = p.zip_map(target, "mse_backward", |a, b| scale * (a - b))?;
                    acc(&mut grads, *pred, d)?;
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc(&mut grads, v, Tensor::scalar(w * g.data()[0]))?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.backward_with(output, None)
    }
}
