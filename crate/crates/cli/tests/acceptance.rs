//! Release acceptance: runs every criterion once and prints one PASS/FAIL
//! line per criterion, then fails if any criterion failed.
//!
//! Criteria 1-3 and 7 reuse the core test suites (included below); the
//! training criteria run here because they need the binary or take minutes.

#[path = "../../core/tests/gradients.rs"]
mod gradients;
#[path = "../../core/tests/invariants.rs"]
mod invariants;
#[path = "../../core/tests/oracles.rs"]
mod oracles;
#[path = "../../core/tests/stats.rs"]
mod stats;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mvtt::baselines::{self, BaselineSettings, Method};
use mvtt::metrics::{score, MetricsReport};
use mvtt::network::ModelVariant;
use mvtt::phantom::{make_dataset, wall_shell, Dataset, PhantomSpec};
use mvtt::train::{run_fold, FoldResult, TrainConfig};

type Check = Result<String, String>;

/// Runs plain test functions, failing on the first panic.
fn suite(tests: &[(&str, fn())]) -> Check {
    for (name, f) in tests {
        if let Err(e) = catch_unwind(*f) {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            return Err(format!("{name}: {msg}"));
        }
    }
    Ok(format!("{} checks", tests.len()))
}

fn criterion_1() -> Check {
    use gradients::*;
    let start = Instant::now();
    let detail = suite(&[
        ("conv2d_dilation_one_and_two", conv2d_dilation_one_and_two),
        ("conv2d_valid_padding", conv2d_valid_padding),
        ("max_pool2", max_pool2),
        ("bilinear_upsample2", bilinear_upsample2),
        ("lrn_default_and_strong", lrn_default_and_strong),
        ("relu_and_sigmoid", relu_and_sigmoid),
        ("attention_apply", attention_apply),
        ("structural_ops", structural_ops),
        ("convlstm_single_cell", convlstm_single_cell),
        ("convlstm_three_step_bptt", convlstm_three_step_bptt),
        ("mse_and_weighted_sum", mse_and_weighted_sum),
        ("la_pv_head", la_pv_head),
        ("scar_head_with_attention", scar_head_with_attention),
        ("end_to_end_loss", end_to_end_loss),
    ])?;
    let took = start.elapsed();
    if took > Duration::from_secs(120) {
        return Err(format!("{detail} passed but took {took:.1?} (limit 2 min)"));
    }
    Ok(format!("{detail}, rel. error < 1e-5 per op and < 1e-4 end to end, {took:.1?}"))
}

fn criterion_2() -> Check {
    use oracles::*;
    suite(&[
        ("conv2d_matches_direct_loops", conv2d_matches_direct_loops),
        ("conv2d_worked_example_dilation_two", conv2d_worked_example_dilation_two),
        ("convlstm_matches_scalar_oracle", convlstm_matches_scalar_oracle),
        ("kmeans_matches_brute_force_partition", kmeans_matches_brute_force_partition),
        ("two_sd_matches_per_voxel_arithmetic", two_sd_matches_per_voxel_arithmetic),
        ("confusion_matches_tally", confusion_matches_tally),
    ])
}

fn criterion_3() -> Check {
    use invariants::*;
    suite(&[
        ("zero_attention_is_identity", zero_attention_is_identity),
        ("dilated_branch_with_zero_weights_is_identity", dilated_branch_with_zero_weights_is_identity),
        ("reslice_round_trips_exactly", reslice_round_trips_exactly),
        ("reslice_moves_voxels_to_the_documented_axes", reslice_moves_voxels_to_the_documented_axes),
        ("sigmoid_is_strictly_inside_unit_interval", sigmoid_is_strictly_inside_unit_interval),
        ("attention_mask_lies_in_open_unit_interval", attention_mask_lies_in_open_unit_interval),
        ("gates_in_open_unit_interval_and_hidden_nonnegative", gates_in_open_unit_interval_and_hidden_nonnegative),
    ])
}

const OVERFIT_EPOCHS: usize = 150;

fn criterion_4() -> Check {
    let start = Instant::now();
    let ds = make_dataset(2, &PhantomSpec::desk(32, 0), 0, 1).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        variant: ModelVariant::Mvtt,
        epochs: OVERFIT_EPOCHS,
        folds: 1,
        ..TrainConfig::default()
    };
    let r = run_fold(&ds, 0, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let (la, scar) = dice_means(&r.report);
    let took = start.elapsed();
    let first = r.history.first().map_or(f64::NAN, |e| e.loss);
    let last = r.history.last().map_or(f64::NAN, |e| e.loss);
    let detail = format!(
        "{OVERFIT_EPOCHS} epochs: training LA/PV Dice {la:.4}, scar Dice {scar:.4}, loss down {:.0}x, {took:.0?}",
        first / last
    );
    if la >= 0.95 && scar >= 0.80 && took < Duration::from_secs(30 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dice_means(report: &MetricsReport) -> (f64, f64) {
    let mean = |a: &Option<mvtt::metrics::AggregateScores>| a.as_ref().map_or(f64::NAN, |a| a.dice.mean);
    (mean(&report.la_pv), mean(&report.scar))
}

const BENCHMARK_SIZE: usize = 16;
const BENCHMARK_COUNT: usize = 20;
const BENCHMARK_FOLDS: usize = 5;
const HELD_OUT_FOLD: usize = 0;
/// Where the MVTT training loss on this benchmark levels off.
const ABLATION_EPOCHS: usize = 150;

fn benchmark(seed: u64) -> Dataset {
    make_dataset(BENCHMARK_COUNT, &PhantomSpec::speckle(BENCHMARK_SIZE, 0), seed, BENCHMARK_FOLDS).unwrap()
}

fn train_held_out(ds: &Dataset, variant: ModelVariant, seed: u64) -> FoldResult {
    let cfg = TrainConfig {
        variant,
        epochs: ABLATION_EPOCHS,
        folds: BENCHMARK_FOLDS,
        seed,
        ..TrainConfig::default()
    };
    run_fold(ds, HELD_OUT_FOLD, &cfg, |_| {}).unwrap()
}

/// Held-out Dice of the four ablation variants for one seed.
#[derive(Debug, Clone, Copy, Default)]
struct Ablation {
    mvtt_la: f64,
    mvtt_scar: f64,
    no_attention_scar: f64,
    separate_la: f64,
    separate_scar: f64,
}

impl Ablation {
    fn run(ds: &Dataset, seed: u64) -> (Ablation, FoldResult) {
        let mvtt = train_held_out(ds, ModelVariant::Mvtt, seed);
        let (mvtt_la, mvtt_scar) = dice_means(&mvtt.report);
        let no_attention_scar = dice_means(&train_held_out(ds, ModelVariant::MultiViewConvLstm, seed).report).1;
        let separate_la = dice_means(&train_held_out(ds, ModelVariant::SeparateLaPv, seed).report).0;
        let separate_scar = dice_means(&train_held_out(ds, ModelVariant::SeparateScar, seed).report).1;
        let a = Ablation {
            mvtt_la,
            mvtt_scar,
            no_attention_scar,
            separate_la,
            separate_scar,
        };
        (a, mvtt)
    }

    fn mean(runs: &[Ablation]) -> Ablation {
        let n = runs.len() as f64;
        let avg = |f: fn(&Ablation) -> f64| runs.iter().map(f).sum::<f64>() / n;
        Ablation {
            mvtt_la: avg(|a| a.mvtt_la),
            mvtt_scar: avg(|a| a.mvtt_scar),
            no_attention_scar: avg(|a| a.no_attention_scar),
            separate_la: avg(|a| a.separate_la),
            separate_scar: avg(|a| a.separate_scar),
        }
    }

    fn holds(&self) -> bool {
        self.mvtt_scar >= self.no_attention_scar && self.pair() >= self.separate_pair()
    }

    fn pair(&self) -> f64 {
        (self.mvtt_la + self.mvtt_scar) / 2.0
    }

    fn separate_pair(&self) -> f64 {
        (self.separate_la + self.separate_scar) / 2.0
    }

    fn describe(&self) -> String {
        format!(
            "scar MVTT {:.4} vs no attention {:.4}; task-pair MVTT {:.4} vs separated {:.4}",
            self.mvtt_scar,
            self.no_attention_scar,
            self.pair(),
            self.separate_pair()
        )
    }
}

fn criterion_5(first: Ablation) -> Check {
    if first.holds() {
        return Ok(format!("seed 0: {}", first.describe()));
    }
    let mut runs = vec![first];
    for seed in 1..3 {
        runs.push(Ablation::run(&benchmark(seed), seed).0);
    }
    let mean = Ablation::mean(&runs);
    let detail = format!("seed 0 failed ({}); mean of seeds 0-2: {}", first.describe(), mean.describe());
    if mean.holds() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(ds: &Dataset, mvtt: &FoldResult) -> Check {
    let mvtt_scar = dice_means(&mvtt.report).1;
    let test = &mvtt.test_indices;
    let settings = BaselineSettings::default();
    let mut wall_fraction = 0.0;
    let mut scores = Vec::new();
    for method in Method::ALL {
        let mut total = 0.0;
        for &i in test {
            let v = &ds.volumes[i];
            let (la, truth) = (v.la_pv().unwrap(), v.scar().unwrap());
            let wall = baselines::wall_region(la, baselines::DEFAULT_WALL_RADIUS).map_err(|e| e.to_string())?;
            let res = baselines::run_method(method, v, &wall, &settings).map_err(|e| e.to_string())?;
            total += score(&res.scar, truth).map_err(|e| e.to_string())?.dice;
            if method == Method::TwoSd {
                let shell = wall_shell(la, PhantomSpec::speckle(BENCHMARK_SIZE, 0).wall_thickness);
                wall_fraction += truth.count() as f64 / shell.count() as f64;
            }
        }
        scores.push((method.tag(), total / test.len() as f64));
    }
    let detail = format!(
        "held-out scar Dice MVTT {mvtt_scar:.4} vs {} (scar {:.1}% of wall)",
        scores.iter().map(|(m, d)| format!("{m} {d:.4}")).collect::<Vec<_>>().join(", "),
        100.0 * wall_fraction / test.len() as f64
    );
    if scores.iter().all(|&(_, d)| mvtt_scar > d) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Check {
    use stats::*;
    suite(&[
        ("pearson_is_affine_invariant", pearson_is_affine_invariant),
        ("bland_altman_monte_carlo_coverage", bland_altman_monte_carlo_coverage),
        ("lr_schedule_endpoints_are_exact", lr_schedule_endpoints_are_exact),
    ])
}

fn mvtt(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mvtt")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8() -> Check {
    let t = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = t.path().join("data");
    mvtt(&["phantom", "--count", "3", "--size", "16", "--seed", "3", "--out", &s(&data)])?;
    let runs = [t.path().join("a"), t.path().join("b")];
    for out in &runs {
        mvtt(&["train", "--data", &s(&data), "--out", &s(out), "--epochs", "2", "--folds", "3", "--seed", "5", "--quiet"])?;
    }
    let (a, b) = (files(&runs[0]), files(&runs[1]));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    if !names.iter().any(|n| n.ends_with("model.ckpt")) || !names.iter().any(|n| n.ends_with("report.json")) {
        return Err(format!("missing artifacts: {names:?}"));
    }
    if a != b {
        let differ: Vec<&str> = a
            .iter()
            .zip(&b)
            .filter(|(x, y)| x != y)
            .map(|(x, _)| x.0.as_str())
            .collect();
        return Err(format!("reruns differ in {differ:?}"));
    }
    Ok(format!("{} files byte-identical across two runs", a.len()))
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut record = |n: usize, name: &'static str, check: Check| {
        let (status, detail) = match &check {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("criterion {n} [{name}]: {status} - {detail}\n");
        // bypass the test harness' output capture so the summary always shows
        std::io::stdout().write_all(line.as_bytes()).unwrap();
        results.push((n, name, check));
    };
    let guarded = |f: &dyn Fn() -> Check| catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));

    record(1, "gradient suite", guarded(&criterion_1));
    record(2, "oracle suite", guarded(&criterion_2));
    record(3, "structural invariants", guarded(&criterion_3));
    record(4, "overfit smoke test", guarded(&criterion_4));
    let ds = benchmark(0);
    let (first, mvtt_fold) = Ablation::run(&ds, 0);
    record(5, "ablation direction", guarded(&|| criterion_5(first)));
    record(6, "baseline ordering", guarded(&|| criterion_6(&ds, &mvtt_fold)));
    record(7, "metrics cross-checks", guarded(&criterion_7));
    record(8, "determinism", guarded(&criterion_8));

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, c)| c.is_err())
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
