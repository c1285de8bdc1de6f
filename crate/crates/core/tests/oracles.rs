//! Library results against independent brute-force implementations.

use mvtt::baselines::{kmeans_1d, sd_threshold, wall_region};
use mvtt::convlstm::{sequence_forward, ConvLstmParams};
use mvtt::metrics::confusion;
use mvtt::phantom::{Mask, Volume};
use mvtt::tensor::{conv2d, ConvSpec, Padding, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Leading pad and output extent, TensorFlow-style `same` or `valid`.
fn geometry(extent: usize, k: usize, stride: usize, dilation: usize, padding: Padding) -> (usize, usize) {
    let eff = dilation * (k - 1) + 1;
    match padding {
        Padding::Valid => (0, (extent - eff) / stride + 1),
        Padding::Same => {
            let out = extent.div_ceil(stride);
            let need = ((out - 1) * stride + eff).saturating_sub(extent);
            (need / 2, out)
        }
    }
}

fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Vec<f64> {
    let [c_in, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let (c_out, kh, kw) = (spec.out_channels, spec.kernel.0, spec.kernel.1);
    let (pt, oh) = geometry(h, kh, spec.stride, spec.dilation, spec.padding);
    let (pl, ow) = geometry(wd, kw, spec.stride, spec.dilation, spec.padding);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[co];
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize - pt as isize;
                            let ix = (ox * spec.stride + kx * spec.dilation) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
pub fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut cases = 0;
    for stride in [1, 2] {
        for dilation in [1, 2] {
            for padding in [Padding::Same, Padding::Valid] {
                for _ in 0..6 {
                    let c_in = rng.random_range(1..4);
                    let c_out = rng.random_range(1..5);
                    let kh = rng.random_range(1..4);
                    let kw = rng.random_range(1..4);
                    let h = rng.random_range(dilation * 2 + 3..12);
                    let w = rng.random_range(dilation * 2 + 3..12);
                    let spec = ConvSpec {
                        in_channels: c_in,
                        out_channels: c_out,
                        kernel: (kh, kw),
                        stride,
                        dilation,
                        padding,
                    };
                    let x = random(&[c_in, h, w], &mut rng);
                    let wt = random(&[c_out, c_in, kh, kw], &mut rng);
                    let b = random(&[c_out], &mut rng);
                    let got = conv2d(&x, &wt, &b, &spec).unwrap();
                    let want = direct_conv(&x, &wt, &b, &spec);
                    assert_eq!(got.len(), want.len(), "{spec:?}");
                    for (g, e) in got.data().iter().zip(&want) {
                        assert!((g - e).abs() <= 1e-12, "{spec:?}: {g} vs {e}");
                    }
                    cases += 1;
                }
            }
        }
    }
    assert_eq!(cases, 48);
}

#[test]
pub fn conv2d_worked_example_dilation_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let spec = ConvSpec::same(2, 4, 3).with_dilation(2);
    let x = random(&[2, 8, 8], &mut rng);
    let w = random(&[4, 2, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let got = conv2d(&x, &w, &b, &spec).unwrap();
    assert_eq!(got.shape(), &[4, 8, 8]);
    let want = direct_conv(&x, &w, &b, &spec);
    let worst = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "{worst:e}");
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gate-by-gate scalar ConvLSTM on 1×1 slices. With `same` padding a 3×3
/// kernel only ever sees its centre tap there.
fn scalar_lstm(xs: &[Vec<f64>], p: &ConvLstmParams) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let hid = p.hidden();
    let c_in = p.in_channels();
    let centre = |w: &Tensor, o: usize, i: usize, cin: usize| w.data()[((o * cin + i) * 3 + 1) * 3 + 1];
    let mut h = vec![0.0; hid];
    let mut c = vec![0.0; hid];
    let mut out = Vec::new();
    for x in xs {
        let (mut gi, mut gf, mut go, mut hs, mut cs) = (vec![], vec![], vec![], vec![], vec![]);
        for k in 0..hid {
            let mut zi = p.b_i.data()[k];
            let mut zf = p.b_f.data()[k];
            let mut zc = p.b_c.data()[k];
            let mut zo = p.b_o.data()[k];
            for (i, &xi) in x.iter().enumerate() {
                zi += centre(&p.w_xi, k, i, c_in) * xi;
                zf += centre(&p.w_xf, k, i, c_in) * xi;
                zc += centre(&p.w_xc, k, i, c_in) * xi;
                zo += centre(&p.w_xo, k, i, c_in) * xi;
            }
            for (j, &hj) in h.iter().enumerate() {
                zi += centre(&p.w_hi, k, j, hid) * hj;
                zf += centre(&p.w_hf, k, j, hid) * hj;
                zc += centre(&p.w_hc, k, j, hid) * hj;
                zo += centre(&p.w_ho, k, j, hid) * hj;
            }
            let i_t = sigmoid(zi + p.peep_i.data()[k] * c[k]);
            let f_t = sigmoid(zf + p.peep_f.data()[k] * c[k]);
            let c_t = f_t * c[k] + i_t * zc.max(0.0);
            let o_t = sigmoid(zo + p.peep_o.data()[k] * c_t);
            gi.push(i_t);
            gf.push(f_t);
            go.push(o_t);
            cs.push(c_t);
            hs.push(o_t * c_t.max(0.0));
        }
        h = hs.clone();
        c = cs.clone();
        out.push((gi, gf, go, cs, hs));
    }
    out
}

#[test]
pub fn convlstm_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..5 {
        let (c_in, hid, steps) = (3, 2, 4 + trial);
        let tensors = ConvLstmParams::shapes(c_in, hid, 3, 1, 1)
            .iter()
            .map(|s| random(s, &mut rng))
            .collect();
        let p = ConvLstmParams::from_tensors(tensors).unwrap();
        let xs = random(&[steps, c_in, 1, 1], &mut rng);
        let trace = sequence_forward(&xs, &p).unwrap();
        let seq: Vec<Vec<f64>> = xs.data().chunks(c_in).map(<[f64]>::to_vec).collect();
        let want = scalar_lstm(&seq, &p);
        let hs = trace.hidden_states().unwrap();
        for (t, (gi, gf, go, cs, h)) in want.iter().enumerate() {
            let (i, f, o) = trace.gate_activations(t).unwrap();
            let c = trace.cell_state(t).unwrap();
            let pairs = [(i.data(), gi), (f.data(), gf), (o.data(), go), (c.data(), cs), (&hs.data()[t * hid..(t + 1) * hid], h)];
            for (got, exp) in pairs {
                for (a, b) in got.iter().zip(exp.iter()) {
                    assert!((a - b).abs() <= 1e-12, "step {t}: {a} vs {b}");
                }
            }
        }
    }
}

/// Minimum SSE over all partitions of the sorted values into `k` contiguous
/// runs; 1-D optimal clusterings are always contiguous.
fn brute_force_sse(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    // choose k-1 cut points among n-1 gaps
    let gaps = n - 1;
    for bits in 0u32..(1 << gaps) {
        if bits.count_ones() as usize != k - 1 {
            continue;
        }
        let mut start = 0;
        let mut total = 0.0;
        for g in 0..gaps {
            if bits & (1 << g) != 0 {
                total += sse(&v[start..=g]);
                start = g + 1;
            }
        }
        total += sse(&v[start..]);
        best = best.min(total);
    }
    best
}

#[test]
pub fn kmeans_matches_brute_force_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut checked = 0;
    for _ in 0..300 {
        let n = rng.random_range(3..=8);
        // integer-valued points keep the SSE exact in floating point
        let values: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..40u32))).collect();
        for k in 2..=3 {
            let distinct = {
                let mut d = values.clone();
                d.sort_by(f64::total_cmp);
                d.dedup();
                d.len()
            };
            if distinct < k {
                assert!(kmeans_1d(&values, k, 5, 7).is_err());
                continue;
            }
            let fit = kmeans_1d(&values, k, 5, rng.random()).unwrap();
            let want = brute_force_sse(&values, k);
            assert!(
                (fit.sse - want).abs() <= 1e-9 * want.max(1.0),
                "{values:?} k={k}: kmeans {} vs optimum {want}",
                fit.sse
            );
            checked += 1;
        }
    }
    assert!(checked > 400);
}

#[test]
pub fn two_sd_matches_per_voxel_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for trial in 0..20 {
        let ext = (8, 8, 8);
        let la = Mask::from_fn(ext, |x, y, z| {
            let d = |a: usize| (a as f64 - 3.5).powi(2);
            d(x) + d(y) + d(z) < 6.0 + trial as f64 * 0.2
        });
        let intensities: Vec<f64> = (0..512).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        let volume = Volume::new(ext, [1.0; 3], intensities.clone()).unwrap();
        let wall = wall_region(&la, 1.5).unwrap();
        let n_sd = [2.0, 1.0, 0.5, -0.5][trial % 4];
        let got = sd_threshold(&volume, &wall, n_sd).unwrap().scar;

        let idx: Vec<usize> = (0..512).filter(|&i| wall.mask().data()[i]).collect();
        let mut sum = 0.0;
        for &i in &idx {
            sum += intensities[i];
        }
        let mean = sum / idx.len() as f64;
        let mut ss = 0.0;
        for &i in &idx {
            ss += (intensities[i] - mean).powi(2);
        }
        let thr = mean + n_sd * (ss / idx.len() as f64).sqrt();
        for i in 0..512 {
            let want = wall.mask().data()[i] && intensities[i] > thr;
            assert_eq!(got.data()[i], want, "trial {trial} voxel {i}");
        }
    }
}

#[test]
pub fn confusion_matches_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..50 {
        let ext = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
        let p = rng.random_range(0.0..1.0);
        let pred = Mask::from_fn(ext, |_, _, _| rng.random_bool(p));
        let truth = Mask::from_fn(ext, |_, _, _| rng.random_bool(0.3));
        let c = confusion(&pred, &truth).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&a, &b) in pred.data().iter().zip(truth.data()) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_));
    }
}
