//! Convolutional LSTM cell with elementwise peepholes and ReLU in place of
//! `tanh`, unrolled along the slice axis of a volume.
//!
//! Per step:
//!
//! ```text
//! i_t = σ(W_xi∗x_t + W_hi∗h_{t-1} + P_i∘c_{t-1} + b_i)
//! f_t = σ(W_xf∗x_t + W_hf∗h_{t-1} + P_f∘c_{t-1} + b_f)
//! c_t = f_t∘c_{t-1} + i_t∘ReLU(W_xc∗x_t + W_hc∗h_{t-1} + b_c)
//! o_t = σ(W_xo∗x_t + W_ho∗h_{t-1} + P_o∘c_t + b_o)
//! h_t = o_t∘ReLU(c_t)
//! ```
//!
//! The output-gate peephole reads the updated cell `c_t`, not `c_{t-1}`.

use crate::error::{Error, Result};
use crate::tensor::{self, sigmoid_scalar as sigmoid, ConvSpec, Tensor};

/// Learnable tensors of one ConvLSTM layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    /// Input-gate peephole, `[hidden, H, W]`.
    pub peep_i: Tensor,
    /// Forget-gate peephole, `[hidden, H, W]`.
    pub peep_f: Tensor,
    /// Output-gate peephole on the updated cell, `[hidden, H, W]`.
    pub peep_o: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_c: Tensor,
    pub b_o: Tensor,
}

impl ConvLstmParams {
    /// Stable names, in the order used by [`Self::into_tensors`] and [`Self::from_tensors`].
    pub const NAMES: [&'static str; 15] = [
        "w_xi", "w_hi", "w_xf", "w_hf", "w_xc", "w_hc", "w_xo", "w_ho", "peep_i", "peep_f", "peep_o", "b_i",
        "b_f", "b_c", "b_o",
    ];

    /// Shapes for a layer with the given input channels, hidden channels,
    /// square kernel and spatial extents, in [`Self::NAMES`] order.
    pub fn shapes(in_channels: usize, hidden: usize, kernel: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
        let wx = vec![hidden, in_channels, kernel, kernel];
        let wh = vec![hidden, hidden, kernel, kernel];
        let peep = vec![hidden, h, w];
        let b = vec![hidden];
        vec![
            wx.clone(),
            wh.clone(),
            wx.clone(),
            wh.clone(),
            wx.clone(),
            wh.clone(),
            wx,
            wh,
            peep.clone(),
            peep.clone(),
            peep,
            b.clone(),
            b.clone(),
            b.clone(),
            b,
        ]
    }

    pub fn zeros(in_channels: usize, hidden: usize, kernel: usize, h: usize, w: usize) -> Self {
        let ts = Self::shapes(in_channels, hidden, kernel, h, w)
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Self::from_tensors(ts).expect("shapes are consistent by construction")
    }

    pub fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        let [w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo, w_ho, peep_i, peep_f, peep_o, b_i, b_f, b_c, b_o]: [Tensor; 15] =
            ts.try_into().map_err(|v: Vec<Tensor>| {
                Error::invalid("ConvLstmParams", format!("expected 15 tensors, got {}", v.len()))
            })?;
        let p = ConvLstmParams {
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xc,
            w_hc,
            w_xo,
            w_ho,
            peep_i,
            peep_f,
            peep_o,
            b_i,
            b_f,
            b_c,
            b_o,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        vec![
            self.w_xi, self.w_hi, self.w_xf, self.w_hf, self.w_xc, self.w_hc, self.w_xo, self.w_ho, self.peep_i,
            self.peep_f, self.peep_o, self.b_i, self.b_f, self.b_c, self.b_o,
        ]
    }

    pub fn hidden(&self) -> usize {
        self.w_xi.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w_xi.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w_xi.shape()[2]
    }

    /// Spatial extents fixed by the peephole tensors.
    pub fn extents(&self) -> (usize, usize) {
        (self.peep_i.shape()[1], self.peep_i.shape()[2])
    }

    fn validate(&self) -> Result<()> {
        let s = self.w_xi.shape();
        let p = self.peep_i.shape();
        if s.len() != 4 || p.len() != 3 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::shape(
                "ConvLstmParams",
                format!("w_xi {s:?} must be [hidden, in, k, k] with odd k; peepholes {p:?} must be [hidden, H, W]"),
            ));
        }
        let expected = Self::shapes(s[1], s[0], s[2], p[1], p[2]);
        let actual = [
            &self.w_xi, &self.w_hi, &self.w_xf, &self.w_hf, &self.w_xc, &self.w_hc, &self.w_xo, &self.w_ho,
            &self.peep_i, &self.peep_f, &self.peep_o, &self.b_i, &self.b_f, &self.b_c, &self.b_o,
        ];
        for ((name, want), t) in Self::NAMES.iter().zip(&expected).zip(actual) {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(
                    "ConvLstmParams",
                    format!("{name} is {:?}, expected {want:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    fn x_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels(), 4 * self.hidden(), self.kernel())
    }

    fn h_spec(&self) -> ConvSpec {
        ConvSpec::same(self.hidden(), 4 * self.hidden(), self.kernel())
    }

    /// Gate weights stacked along the output-channel axis in `i, f, c, o` order.
    fn packed(&self) -> (Tensor, Tensor, Tensor) {
        let wx = cat0(&[&self.w_xi, &self.w_xf, &self.w_xc, &self.w_xo]);
        let wh = cat0(&[&self.w_hi, &self.w_hf, &self.w_hc, &self.w_ho]);
        let b = cat0(&[&self.b_i, &self.b_f, &self.b_c, &self.b_o]);
        (wx, wh, b)
    }
}

fn cat0(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("axis-0 concatenation of equal-tailed tensors")
}

fn split0(t: &Tensor, pieces: usize) -> Vec<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[0] /= pieces;
    let chunk = t.len() / pieces;
    t.data()
        .chunks_exact(chunk)
        .map(|c| Tensor::new(shape.clone(), c.to_vec()).expect("even split"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
    /// Number of steps folded into this state.
    pub t: usize,
}

impl ConvLstmState {
    pub fn zeros(hidden: usize, h: usize, w: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[hidden, h, w]),
            c: Tensor::zeros(&[hidden, h, w]),
            t: 0,
        }
    }
}

/// Activations of one step, kept for backpropagation through time.
#[derive(Debug, Clone)]
struct StepCache {
    i: Vec<f64>,
    f: Vec<f64>,
    /// ReLU of the candidate pre-activation.
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

/// Gate arithmetic given the summed convolution pre-activations `z` laid out
/// as `[4·hidden, H, W]` in `i, f, c, o` order.
fn gates(z: &[f64], c_prev: &[f64], p: &ConvLstmParams) -> StepCache {
    let n = c_prev.len();
    let (zi, rest) = z.split_at(n);
    let (zf, rest) = rest.split_at(n);
    let (zc, zo) = rest.split_at(n);
    let (pi, pf, po) = (p.peep_i.data(), p.peep_f.data(), p.peep_o.data());
    let mut cache = StepCache {
        i: Vec::with_capacity(n),
        f: Vec::with_capacity(n),
        g: Vec::with_capacity(n),
        o: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        h: Vec::with_capacity(n),
    };
    for k in 0..n {
        let i = sigmoid(zi[k] + pi[k] * c_prev[k]);
        let f = sigmoid(zf[k] + pf[k] * c_prev[k]);
        let g = zc[k].max(0.0);
        let c = f * c_prev[k] + i * g;
        let o = sigmoid(zo[k] + po[k] * c);
        cache.i.push(i);
        cache.f.push(f);
        cache.g.push(g);
        cache.o.push(o);
        cache.c.push(c);
        cache.h.push(o * c.max(0.0));
    }
    cache
}

fn check_step_input(x: &Tensor, p: &ConvLstmParams, op: &'static str) -> Result<()> {
    let [_, c, h, w] = x.as_stack_dims(op)?;
    let (ph, pw) = p.extents();
    if c != p.in_channels() || h != ph || w != pw {
        return Err(Error::shape(
            op,
            format!(
                "input {:?} incompatible with layer of {} input channels at {ph}x{pw}",
                x.shape(),
                p.in_channels()
            ),
        ));
    }
    Ok(())
}

/// One ConvLSTM step from `state` on input `x_t` (`[C_in, H, W]`).
pub fn cell_step(x_t: &Tensor, state: &ConvLstmState, params: &ConvLstmParams) -> Result<ConvLstmState> {
    if x_t.rank() != 3 {
        return Err(Error::shape("cell_step", format!("x_t must be [C,H,W], got {:?}", x_t.shape())));
    }
    check_step_input(x_t, params, "cell_step")?;
    let (hid, (h, w)) = (params.hidden(), params.extents());
    if state.h.shape() != [hid, h, w] || state.c.shape() != [hid, h, w] {
        return Err(Error::shape(
            "cell_step",
            format!("state h {:?} / c {:?} must both be [{hid},{h},{w}]", state.h.shape(), state.c.shape()),
        ));
    }
    let (wx, wh, b) = params.packed();
    let zx = tensor::conv2d(x_t, &wx, &b, &params.x_spec())?;
    let zh = tensor::conv2d(&state.h, &wh, &Tensor::zeros(&[4 * hid]), &params.h_spec())?;
    let z = zx.add(&zh)?;
    let cache = gates(z.data(), state.c.data(), params);
    Ok(ConvLstmState {
        h: Tensor::new(vec![hid, h, w], cache.h)?,
        c: Tensor::new(vec![hid, h, w], cache.c)?,
        t: state.t + 1,
    })
}

/// Left fold of [`cell_step`] from the zero state; returns every hidden state.
pub fn run_sequence(xs: &[Tensor], params: &ConvLstmParams) -> Result<Vec<Tensor>> {
    if xs.is_empty() {
        return Err(Error::invalid("run_sequence", "empty input sequence"));
    }
    let (h, w) = params.extents();
    let mut state = ConvLstmState::zeros(params.hidden(), h, w);
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        if x.shape() != xs[0].shape() {
            return Err(Error::shape(
                "run_sequence",
                format!("sequence mixes shapes {:?} and {:?}", xs[0].shape(), x.shape()),
            ));
        }
        state = cell_step(x, &state, params)?;
        out.push(state.h.clone());
    }
    Ok(out)
}

/// Everything the backward pass needs from a forward unroll.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    input: Tensor,
    hidden: usize,
    extents: (usize, usize),
    steps: Vec<StepCache>,
}

impl SequenceTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Hidden states stacked as `[S, hidden, H, W]`.
    pub fn hidden_states(&self) -> Result<Tensor> {
        let (h, w) = self.extents;
        let data = self.steps.iter().flat_map(|s| s.h.iter().copied()).collect();
        Tensor::new(vec![self.steps.len(), self.hidden, h, w], data)
    }

    /// Gate activations `(i, f, o)` of step `t`, each `[hidden, H, W]`.
    pub fn gate_activations(&self, t: usize) -> Option<(Tensor, Tensor, Tensor)> {
        let s = self.steps.get(t)?;
        let (h, w) = self.extents;
        let shape = vec![self.hidden, h, w];
        Some((
            Tensor::new(shape.clone(), s.i.clone()).ok()?,
            Tensor::new(shape.clone(), s.f.clone()).ok()?,
            Tensor::new(shape, s.o.clone()).ok()?,
        ))
    }

    pub fn cell_state(&self, t: usize) -> Option<Tensor> {
        let (h, w) = self.extents;
        Tensor::new(vec![self.hidden, h, w], self.steps.get(t)?.c.clone()).ok()
    }
}

/// Unrolls the layer over the leading axis of `xs` (`[S, C_in, H, W]`) from
/// the zero state, recording activations.
pub fn sequence_forward(xs: &Tensor, params: &ConvLstmParams) -> Result<SequenceTrace> {
    if xs.rank() != 4 {
        return Err(Error::shape("sequence_forward", format!("expected [S,C,H,W], got {:?}", xs.shape())));
    }
    check_step_input(xs, params, "sequence_forward")?;
    let hid = params.hidden();
    let (h, w) = params.extents();
    let (wx, wh, b) = params.packed();
    let zx = tensor::conv2d(xs, &wx, &b, &params.x_spec())?;
    let zero_b = Tensor::zeros(&[4 * hid]);
    let plane = hid * h * w;
    let mut steps: Vec<StepCache> = Vec::with_capacity(xs.shape()[0]);
    let mut h_prev = Tensor::zeros(&[hid, h, w]);
    let zeros = vec![0.0; plane];
    for t in 0..xs.shape()[0] {
        let zh = tensor::conv2d(&h_prev, &wh, &zero_b, &params.h_spec())?;
        let mut z = zx.data()[t * 4 * plane..(t + 1) * 4 * plane].to_vec();
        for (a, b) in z.iter_mut().zip(zh.data()) {
            *a += b;
        }
        let c_prev = steps.last().map(|s| s.c.as_slice()).unwrap_or(&zeros);
        let cache = gates(&z, c_prev, params);
        h_prev = Tensor::new(vec![hid, h, w], cache.h.clone())?;
        steps.push(cache);
    }
    Ok(SequenceTrace {
        input: xs.clone(),
        hidden: hid,
        extents: (h, w),
        steps,
    })
}

pub struct SequenceGrads {
    pub inputs: Tensor,
    pub params: ConvLstmParams,
}

/// Backpropagation through time for [`sequence_forward`], given the gradient
/// of a loss with respect to every hidden state (`[S, hidden, H, W]`).
pub fn sequence_backward(trace: &SequenceTrace, params: &ConvLstmParams, grad_hs: &Tensor) -> Result<SequenceGrads> {
    let hid = trace.hidden;
    let (h, w) = trace.extents;
    let steps = trace.steps.len();
    if grad_hs.shape() != [steps, hid, h, w] {
        return Err(Error::shape(
            "sequence_backward",
            format!("grad_hs {:?} must be [{steps},{hid},{h},{w}]", grad_hs.shape()),
        ));
    }
    let (wx, wh, _) = params.packed();
    let plane = hid * h * w;
    let (pi, pf, po) = (params.peep_i.data(), params.peep_f.data(), params.peep_o.data());

    let mut dz_all = vec![0.0; steps * 4 * plane];
    let mut d_peep_i = vec![0.0; plane];
    let mut d_peep_f = vec![0.0; plane];
    let mut d_peep_o = vec![0.0; plane];
    let mut d_wh = Tensor::zeros(wh.shape());
    let mut dh_next = vec![0.0; plane];
    let mut dc_next = vec![0.0; plane];
    let zeros = vec![0.0; plane];

    for t in (0..steps).rev() {
        let s = &trace.steps[t];
        let c_prev = if t > 0 { &trace.steps[t - 1].c } else { &zeros };
        let gh = &grad_hs.data()[t * plane..(t + 1) * plane];
        let dz = &mut dz_all[t * 4 * plane..(t + 1) * 4 * plane];
        let (dzi, rest) = dz.split_at_mut(plane);
        let (dzf, rest) = rest.split_at_mut(plane);
        let (dzg, dzo) = rest.split_at_mut(plane);
        let mut dc_prev = vec![0.0; plane];
        for k in 0..plane {
            let dh = gh[k] + dh_next[k];
            let c = s.c[k];
            let relu_c = c.max(0.0);
            let zo_grad = dh * relu_c * s.o[k] * (1.0 - s.o[k]);
            let mut dc = dc_next[k] + zo_grad * po[k];
            if c > 0.0 {
                dc += dh * s.o[k];
            }
            d_peep_o[k] += zo_grad * c;
            let zi_grad = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
            let zf_grad = dc * c_prev[k] * s.f[k] * (1.0 - s.f[k]);
            let zg_grad = if s.g[k] > 0.0 { dc * s.i[k] } else { 0.0 };
            dzi[k] = zi_grad;
            dzf[k] = zf_grad;
            dzg[k] = zg_grad;
            dzo[k] = zo_grad;
            d_peep_i[k] += zi_grad * c_prev[k];
            d_peep_f[k] += zf_grad * c_prev[k];
            dc_prev[k] = dc * s.f[k] + zi_grad * pi[k] + zf_grad * pf[k];
        }
        dc_next = dc_prev;
        if t > 0 {
            let h_prev = Tensor::new(vec![hid, h, w], trace.steps[t - 1].h.clone())?;
            let dz_t = Tensor::new(vec![4 * hid, h, w], dz.to_vec())?;
            let g = tensor::conv2d_backward(&dz_t, &h_prev, &wh, &params.h_spec())?;
            d_wh.accumulate(&g.weights)?;
            dh_next = g.input.into_data();
        } else {
            dh_next.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let dz_all = Tensor::new(vec![steps, 4 * hid, h, w], dz_all)?;
    let gx = tensor::conv2d_backward(&dz_all, &trace.input, &wx, &params.x_spec())?;
    let mut wxs = split0(&gx.weights, 4).into_iter();
    let mut whs = split0(&d_wh, 4).into_iter();
    let mut bs = split0(&gx.bias, 4).into_iter();
    let next = |it: &mut std::vec::IntoIter<Tensor>| it.next().expect("four gate blocks");
    let peep = |v: Vec<f64>| Tensor::new(vec![hid, h, w], v);
    let grads = ConvLstmParams {
        w_xi: next(&mut wxs),
        w_hi: next(&mut whs),
        w_xf: next(&mut wxs),
        w_hf: next(&mut whs),
        w_xc: next(&mut wxs),
        w_hc: next(&mut whs),
        w_xo: next(&mut wxs),
        w_ho: next(&mut whs),
        peep_i: peep(d_peep_i)?,
        peep_f: peep(d_peep_f)?,
        peep_o: peep(d_peep_o)?,
        b_i: next(&mut bs),
        b_f: next(&mut bs),
        b_c: next(&mut bs),
        b_o: next(&mut bs),
    };
    Ok(SequenceGrads {
        inputs: gx.input,
        params: grads,
    })
}
