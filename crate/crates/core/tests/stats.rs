//! Metrics, baselines and optimiser behaviour.

use mvtt::baselines::{fcm_1d, kmeans_1d, sd_threshold, wall_region, FcmParams};
use mvtt::metrics::{bland_altman, confusion, pearson, score, MeanStd};
use mvtt::network::{ModelParams, ModelVariant, NetworkConfig};
use mvtt::phantom::{Mask, Volume};
use mvtt::train::{adam_step, lr_at, AdamConfig, AdamState, DecaySchedule, TrainConfig};
use mvtt::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
pub fn lr_schedule_endpoints_are_exact() {
    for decay in [DecaySchedule::Exponential, DecaySchedule::Linear] {
        let cfg = TrainConfig {
            decay,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 599, &cfg), 0.001);
        assert_eq!(lr_at(599, 599, &cfg), 0.000445);
        let mut prev = f64::INFINITY;
        for s in 0..=599 {
            let lr = lr_at(s, 599, &cfg);
            assert!(lr <= prev && (0.000445..=0.001).contains(&lr));
            prev = lr;
        }
    }
}

#[test]
pub fn exponential_midpoint_is_geometric_mean() {
    let cfg = TrainConfig::default();
    let mid = lr_at(50, 100, &cfg);
    assert!((mid - (0.001f64 * 0.000445).sqrt()).abs() < 1e-15);
}

#[test]
pub fn pearson_is_affine_invariant() {
    let nonzero = || prop_oneof![-50.0f64..-0.1, 0.1f64..50.0];
    proptest!(|(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
        a in nonzero(),
        b in -100.0f64..100.0,
        c in nonzero(),
        d in -100.0f64..100.0,
    )| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| c * y + d).collect();
        let r2 = pearson(&xs2, &ys2).unwrap();
        prop_assert!((r2 - (a * c).signum() * r).abs() <= 1e-12, "{r} vs {r2}");
    });
}

proptest! {
    #[test]
    fn dice_agrees_with_set_formula(
        bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..300),
    ) {
        let n = bits.len();
        let pred = Mask::new((n, 1, 1), bits.iter().map(|b| b.0).collect()).unwrap();
        let truth = Mask::new((n, 1, 1), bits.iter().map(|b| b.1).collect()).unwrap();
        let s = score(&pred, &truth).unwrap();
        let inter = bits.iter().filter(|b| b.0 && b.1).count() as f64;
        let sum = (pred.count() + truth.count()) as f64;
        let want = if sum == 0.0 { 1.0 } else { 2.0 * inter / sum };
        prop_assert!((s.dice - want).abs() < 1e-15);
        let c = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(c.total(), n as u64);
        prop_assert!((s.accuracy - (c.tp + c.tn) as f64 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn larger_n_sd_gives_a_subset(
        vals in prop::collection::vec(0.0f64..10.0, 27),
        lo in -1.0f64..3.0,
        step in 0.0f64..2.0,
    ) {
        let vol = Volume::new((3, 3, 3), [1.0; 3], vals).unwrap();
        let la = Mask::from_fn((3, 3, 3), |x, y, z| x == 1 && y == 1 && z == 1);
        let wall = wall_region(&la, 1.8).unwrap();
        let a = sd_threshold(&vol, &wall, lo).unwrap().scar;
        let b = sd_threshold(&vol, &wall, lo + step).unwrap().scar;
        prop_assert!(b.is_subset_of(&a));
        prop_assert!(a.is_subset_of(wall.mask()));
    }

    #[test]
    fn fcm_rows_sum_to_one_and_objective_never_rises(
        vals in prop::collection::vec(0.0f64..5.0, 4..60),
        seed in any::<u64>(),
    ) {
        let params = FcmParams { seed, ..FcmParams::default() };
        let Ok(fit) = fcm_1d(&vals, &params) else { return Ok(()) };
        prop_assert!(fit.max_row_error < 1e-9);
        for i in 0..vals.len() {
            let row = fit.membership(i);
            prop_assert!(row.iter().all(|&u| (0.0..=1.0).contains(&u)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn kmeans_sse_never_rises(
        vals in prop::collection::vec(0.0f64..5.0, 3..60),
        seed in any::<u64>(),
    ) {
        let Ok(fit) = kmeans_1d(&vals, 2, 3, seed) else { return Ok(()) };
        for w in fit.sse_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(fit.labels.iter().all(|&l| l < 2));
    }
}

#[test]
pub fn bland_altman_monte_carlo_coverage() {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut fractions = Vec::new();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..100).map(|_| 10.0 + 3.0 * noise.sample(&mut rng)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x + 0.5 + noise.sample(&mut rng)).collect();
        let ba = bland_altman(&xs, &ys).unwrap();
        assert!((ba.fraction_within - 0.95).abs() <= 0.08, "seed {seed}: {}", ba.fraction_within);
        assert!((ba.loa_high - ba.loa_low - 2.0 * 1.96 * ba.sd_diff).abs() < 1e-12);
        fractions.push(ba.fraction_within);
    }
    let m = MeanStd::of(&fractions).unwrap();
    assert!((m.mean - 0.95).abs() < 0.02, "{m:?}");
}

#[test]
pub fn bland_altman_hand_example() {
    let ba = bland_altman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(ba.mean_diff, 1.0);
    assert_eq!(ba.sd_diff, 1.0);
    assert_eq!(ba.fraction_within, 1.0);
}

#[test]
pub fn pearson_rejects_constant_sample() {
    let err = pearson(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap_err();
    assert!(err.to_string().contains("second"), "{err}");
}

fn tiny_params() -> ModelParams {
    ModelParams::init(&NetworkConfig::new(8, 8, 2), ModelVariant::SeparateLaPv, 0).unwrap()
}

fn filled(like: &ModelParams, v: f64) -> ModelParams {
    let mut g = like.zeros_like();
    for (_, t) in g.iter_mut() {
        *t = Tensor::full(t.shape(), v);
    }
    g
}

#[test]
pub fn adam_first_step_moves_by_lr_times_sign() {
    let p0 = tiny_params();
    let cfg = AdamConfig::default();
    for g in [0.3, -2.0, 1e-3] {
        let mut p = p0.clone();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &filled(&p0, g), &mut state, 0.01, &cfg).unwrap();
        for ((_, a), (_, b)) in p.iter().zip(p0.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let want = y - 0.01 * g / (g.abs() + 1e-8);
                assert!((x - want).abs() < 1e-15, "{x} vs {want}");
            }
        }
    }
}

#[test]
pub fn adam_zero_gradient_is_a_no_op() {
    let p0 = tiny_params();
    let mut p = p0.clone();
    let mut state = AdamState::new(&p);
    for _ in 0..3 {
        adam_step(&mut p, &p0.zeros_like(), &mut state, 0.01, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p, p0);
    assert_eq!(state.step, 3);
}

#[test]
pub fn adam_matches_hand_computed_second_step() {
    let p0 = tiny_params();
    let mut p = p0.clone();
    let mut state = AdamState::new(&p);
    let cfg = AdamConfig::default();
    adam_step(&mut p, &filled(&p0, 1.0), &mut state, 0.1, &cfg).unwrap();
    adam_step(&mut p, &filled(&p0, -1.0), &mut state, 0.1, &cfg).unwrap();
    // m2 = 0.9·0.1 − 0.1 = −0.01, v2 = 0.999·0.001 + 0.001
    let mh = -0.01 / (1.0 - 0.81);
    let vh = (0.999 * 0.001 + 0.001) / (1.0 - 0.999f64.powi(2));
    let step2 = 0.1 * mh / (vh.sqrt() + 1e-8);
    let step1 = 0.1 * 1.0 / (1.0 + 1e-8);
    let (path, t0) = p0.iter().next().unwrap();
    let got = p.get(path).unwrap().data()[0];
    assert!((got - (t0.data()[0] - step1 - step2)).abs() < 1e-15);
}

#[test]
pub fn adam_refuses_nan_and_leaves_parameters_untouched() {
    let p0 = tiny_params();
    let mut p = p0.clone();
    let mut state = AdamState::new(&p);
    let mut g = p0.zeros_like();
    let path = p0.paths().last().unwrap().to_string();
    g.get_mut(&path).unwrap().data_mut()[0] = f64::NAN;
    let err = adam_step(&mut p, &g, &mut state, 0.01, &AdamConfig::default()).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains(&path)), "{err}");
    assert_eq!(p, p0);
    assert_eq!(state.step, 0);
}

#[test]
pub fn output_priors_are_foreground_logits() {
    let ds = mvtt::phantom::make_dataset(2, &mvtt::phantom::PhantomSpec::desk(16, 0), 1, 1).unwrap();
    let vols: Vec<&Volume> = ds.volumes.iter().collect();
    let mut p = ModelParams::init(&NetworkConfig::new(16, 16, 16), ModelVariant::Mvtt, 0).unwrap();
    mvtt::train::set_output_priors(&mut p, &vols).unwrap();
    for (head, count) in [
        ("la", vols.iter().map(|v| v.la_pv().unwrap().count()).sum::<usize>()),
        ("scar", vols.iter().map(|v| v.scar().unwrap().count()).sum::<usize>()),
    ] {
        let f = count as f64 / (2.0 * 4096.0);
        let b = p.get(&format!("{head}.c3.b")).unwrap().data()[0];
        assert!((1.0 / (1.0 + (-b).exp()) - f).abs() < 1e-12, "{head}: {b} vs fraction {f}");
    }
    let unlabelled = vols[0].without_masks();
    assert!(mvtt::train::set_output_priors(&mut p, &[&unlabelled]).is_err());
}
