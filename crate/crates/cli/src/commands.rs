use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mvtt::attention::mask_slice_images;
use mvtt::baselines::{self, BaselineSettings, FcmParams};
use mvtt::metrics::{MetricsReport, VolumeMetrics};
use mvtt::network::ModelParams;
use mvtt::phantom::{make_dataset, Dataset, PhantomSpec, Volume};
use mvtt::train::{self, loss_csv, run_fold, volume_id, EpochRecord, TrainConfig};
use serde_json::json;

use crate::manifest::{now_unix, Outputs};
use crate::overlay;
use crate::{BaselineArgs, EvalArgs, Failure, InferArgs, PhantomArgs, Preset, TrainArgs};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("invalid {what} {}: {e}", path.display())))
}

/// `*.mvttvol` files directly inside `dir`, keyed and sorted by file stem.
fn list_volumes(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::Data(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Failure::Data(format!("cannot read {}: {e}", dir.display())))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "mvttvol") {
            let stem = path.file_stem().expect("has extension").to_string_lossy().into_owned();
            out.insert(stem, path);
        }
    }
    if out.is_empty() {
        return Err(Failure::Data(format!("no .mvttvol files in {}", dir.display())));
    }
    Ok(out)
}

pub fn phantom(a: &PhantomArgs) -> Result<(), Failure> {
    let started = a.timestamps.then(now_unix);
    let mut template = match &a.spec {
        Some(p) => {
            let mut t: PhantomSpec = read_json(p, "phantom spec")?;
            if a.size != 32 {
                t.extents = [a.size; 3];
            }
            t
        }
        None => match a.preset {
            Preset::Desk => PhantomSpec::desk(a.size, a.seed),
            Preset::Speckle => PhantomSpec::speckle(a.size, a.seed),
        },
    };
    if let Some(n) = a.noise {
        template.noise_std = n;
    }
    template.validate()?;
    let count = a.count as usize;
    let folds = a.folds.unwrap_or(count.min(10));
    if folds == 0 || folds > count {
        return Err(Failure::Usage(format!("--folds must lie in 1..={count}, got {folds}")));
    }
    let ds = make_dataset(count, &template, a.seed, folds)?;
    let mut out = Outputs::new(&a.out)?;
    for (i, v) in ds.volumes.iter().enumerate() {
        out.write(&Dataset::file_name(i), &v.to_bytes())?;
    }
    out.write(mvtt::phantom::MANIFEST_FILE, &ds.manifest().to_json())?;
    let config = json!({ "count": count, "folds": folds, "template": template });
    out.finish("phantom", a.seed, config, started)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut c: TrainConfig = match &a.config {
        Some(p) => read_json(p, "training config")?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        c.variant = v;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(f) = a.folds {
        c.folds = f;
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(l) = a.lr_initial {
        c.lr_initial = l;
    }
    if let Some(l) = a.lr_final {
        c.lr_final = l;
    }
    if let Some(d) = a.decay {
        c.decay = d;
    }
    if let Some(t) = a.threshold {
        c.threshold = t;
    }
    let problems = c.problems();
    if !problems.is_empty() {
        let mut msg = String::from("invalid training configuration:");
        for p in problems {
            let _ = write!(msg, "\n  - {p}");
        }
        return Err(Failure::Usage(msg));
    }
    Ok(c)
}

fn write_report(out: &mut Outputs, prefix: &str, report: &MetricsReport) -> Result<(), Failure> {
    out.write(&format!("{prefix}report.json"), &report.to_json())?;
    out.write(&format!("{prefix}report.csv"), report.to_csv().as_bytes())
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let config = train_config(a)?;
    let started = a.timestamps.then(now_unix);
    let dataset = Dataset::load(&a.data)?;
    if config.folds > dataset.len() {
        return Err(Failure::Usage(format!(
            "--folds {} exceeds the {} volumes in {}",
            config.folds,
            dataset.len(),
            a.data.display()
        )));
    }
    let ds = if config.folds == dataset.folds {
        dataset
    } else {
        dataset.refold(config.folds)?
    };
    let mut out = Outputs::new(&a.out)?;
    let every = (config.epochs / 20).max(1);
    let quiet = a.quiet;
    let mut curves = Vec::new();
    let mut rows = Vec::new();
    for fold in 0..ds.folds {
        let prefix = if ds.folds == 1 { String::new() } else { format!("fold_{fold:02}/") };
        let progress = |r: &EpochRecord| {
            if !quiet && (r.epoch % every == 0 || r.epoch == 1) {
                eprintln!("fold {fold} epoch {} loss {:.6} lr {:.3e}", r.epoch, r.loss, r.lr);
            }
        };
        let result = run_fold(&ds, fold, &config, progress)?;
        out.write(&format!("{prefix}model.ckpt"), &result.params.to_bytes())?;
        out.write(&format!("{prefix}loss.csv"), loss_csv(&result.history).as_bytes())?;
        write_report(&mut out, &prefix, &result.report)?;
        rows.extend(result.report.volumes.iter().cloned());
        curves.push(json!({
            "fold": fold,
            "train": result.train_indices.iter().map(|&i| volume_id(i)).collect::<Vec<_>>(),
            "test": result.test_indices.iter().map(|&i| volume_id(i)).collect::<Vec<_>>(),
            "loss": result.history,
        }));
    }
    if ds.folds > 1 {
        write_report(&mut out, "aggregate_", &MetricsReport::from_volumes(rows))?;
    }
    let echo = json!({ "data": a.data, "train": config, "folds": curves });
    out.finish("train", config.seed, echo, started)
}

pub fn infer(a: &InferArgs) -> Result<(), Failure> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Failure::Usage(format!("--threshold must lie in (0, 1), got {}", a.threshold)));
    }
    let started = a.timestamps.then(now_unix);
    let params = ModelParams::load(&a.checkpoint)?;
    let cfg = &params.config;
    let model_ext = (cfg.nx, cfg.ny, cfg.nz);
    let mut out = Outputs::new(&a.out)?;
    let mut stems = Vec::new();
    for path in &a.volume {
        let volume = Volume::load(path)?;
        if volume.extents() != model_ext {
            return Err(Failure::Data(format!(
                "{} has extents {:?} but {} expects {:?}",
                path.display(),
                volume.extents(),
                a.checkpoint.display(),
                model_ext
            )));
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Failure::Usage(format!("{} has no file name", path.display())))?;
        let inf = train::infer(&volume, &params, a.threshold)?;

        let mut pred = volume.without_masks();
        if let Some(m) = &inf.la_pv {
            pred = pred.with_la_pv(m.clone())?;
        }
        if let Some(m) = &inf.scar {
            pred = pred.with_scar(m.clone())?;
        }
        out.write(&format!("{stem}.mvttvol"), &pred.to_bytes())?;

        let tasks = [
            ("la_pv", &inf.prediction.la_pv, &inf.la_pv, volume.la_pv()),
            ("scar", &inf.prediction.scar, &inf.scar, volume.scar()),
        ];
        for (task, prob, mask, truth) in tasks {
            let (Some(prob), Some(mask)) = (prob, mask) else { continue };
            let pv = Volume::new(volume.extents(), volume.spacing(), prob.data().to_vec())?;
            out.write(&format!("prob/{stem}_{task}.mvttvol"), &pv.to_bytes())?;
            for z in 0..volume.extents().2 {
                let (gray, rgb) = overlay::render(&volume, z, Some(mask), truth);
                out.write(&format!("overlays/{stem}_z{z:03}_{task}.pgm"), &gray.to_pgm())?;
                out.write(&format!("overlays/{stem}_z{z:03}_{task}.ppm"), &rgb.to_ppm())?;
            }
        }
        if let Some(att) = &inf.prediction.attention {
            for (z, img) in mask_slice_images(att).iter().enumerate() {
                out.write(&format!("attention/{stem}_z{z:03}.pgm"), &img.to_pgm())?;
            }
        }
        stems.push(stem);
    }
    let echo = json!({
        "checkpoint": a.checkpoint,
        "variant": params.variant,
        "volumes": a.volume,
        "threshold": a.threshold,
    });
    out.finish("infer", params.seed, echo, started)
}

pub const COMPARISON_HEADER: &str = "id,method,accuracy,sensitivity,specificity,dice,scar_pct_pred,scar_pct_truth,flags";

pub fn baselines(a: &BaselineArgs) -> Result<(), Failure> {
    if !(a.wall_radius.is_finite() && a.wall_radius >= 0.0) {
        return Err(Failure::Usage(format!("--wall-radius must be >= 0, got {}", a.wall_radius)));
    }
    let started = a.timestamps.then(now_unix);
    let files = list_volumes(&a.data)?;
    let la_files = a.la_masks.as_deref().map(list_volumes).transpose()?;
    let settings = BaselineSettings {
        n_sd: a.n_sd,
        kmeans_restarts: a.restarts,
        fcm: FcmParams::default(),
        seed: a.seed,
    };
    let mut methods = a.methods.clone();
    methods.dedup();
    let mut volumes = Vec::new();
    for (stem, path) in &files {
        let v = Volume::load(path)?;
        let (Some(la), Some(_)) = (v.la_pv(), v.scar()) else {
            return Err(Failure::Data(format!("{} lacks ground-truth LA/PV and scar masks", path.display())));
        };
        let wall_la = match &la_files {
            None => la.clone(),
            Some(map) => {
                let p = map.get(stem).ok_or_else(|| {
                    Failure::Data(format!("no LA/PV mask file for {stem} in {}", a.la_masks.as_ref().unwrap().display()))
                })?;
                Volume::load(p)?
                    .la_pv()
                    .cloned()
                    .ok_or_else(|| Failure::Data(format!("{} has no LA/PV mask", p.display())))?
            }
        };
        volumes.push((stem.clone(), v, wall_la));
    }
    let mut out = Outputs::new(&a.out)?;
    let mut comparison = String::from(COMPARISON_HEADER);
    comparison.push('\n');
    for &method in &methods {
        let mut rows = Vec::new();
        let mut flags = Vec::new();
        for (stem, v, wall_la) in &volumes {
            let wall = baselines::wall_region(wall_la, a.wall_radius)?;
            let res = baselines::run_method(method, v, &wall, &settings)?;
            let truth_scar = v.scar().expect("checked above");
            let row = VolumeMetrics::evaluate(stem.clone(), None, Some((&res.scar, truth_scar)), v.la_pv(), a.wall_radius)?;
            let masks = v.without_masks().with_la_pv(wall_la.clone())?.with_scar(res.scar.clone())?;
            out.write(&format!("{method}/{stem}.mvttvol"), &masks.to_bytes())?;
            let sidecar = json!({
                "id": stem,
                "method": method,
                "wall_source": if a.la_masks.is_some() { "predicted" } else { "truth" },
                "wall_radius": a.wall_radius,
                "metrics": row,
                "flags": res.flags,
            });
            let mut bytes = serde_json::to_vec_pretty(&sidecar).expect("serialises");
            bytes.push(b'\n');
            out.write(&format!("{method}/{stem}.json"), &bytes)?;
            let s = row.scar.as_ref().expect("scar scored");
            let b = row.scar_percentage.expect("truth LA present");
            let mut all_flags = s.flags.clone();
            all_flags.extend(res.flags.iter().cloned());
            let _ = writeln!(
                comparison,
                "{},{method},{},{},{},{},{},{},{}",
                mvtt_csv(stem),
                s.accuracy,
                s.sensitivity,
                s.specificity,
                s.dice,
                b.predicted,
                b.truth,
                mvtt_csv(&all_flags.join("; "))
            );
            flags.extend(res.flags.into_iter().map(|f| format!("{stem}: {f}")));
            rows.push(row);
        }
        let mut report = MetricsReport::from_volumes(rows);
        report.flags.extend(flags);
        write_report(&mut out, &format!("{method}_"), &report)?;
    }
    out.write("comparison.csv", comparison.as_bytes())?;
    let echo = json!({
        "data": a.data,
        "methods": methods,
        "wall_radius": a.wall_radius,
        "wall_source": a.la_masks.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "truth".into()),
        "settings": settings,
    });
    out.finish("baselines", a.seed, echo, started)
}

fn mvtt_csv(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    if !(a.wall_radius.is_finite() && a.wall_radius >= 0.0) {
        return Err(Failure::Usage(format!("--wall-radius must be >= 0, got {}", a.wall_radius)));
    }
    let started = a.timestamps.then(now_unix);
    let pred = list_volumes(&a.pred)?;
    let truth = list_volumes(&a.truth)?;
    let pred_only: Vec<&str> = pred.keys().filter(|k| !truth.contains_key(*k)).map(String::as_str).collect();
    let truth_only: Vec<&str> = truth.keys().filter(|k| !pred.contains_key(*k)).map(String::as_str).collect();
    if !pred_only.is_empty() || !truth_only.is_empty() {
        return Err(Failure::Data(format!(
            "unmatched volumes: only in {}: [{}]; only in {}: [{}]",
            a.pred.display(),
            pred_only.join(", "),
            a.truth.display(),
            truth_only.join(", ")
        )));
    }
    let mut rows = Vec::new();
    for (stem, ppath) in &pred {
        let p = Volume::load(ppath)?;
        let t = Volume::load(&truth[stem])?;
        if p.extents() != t.extents() {
            return Err(Failure::Data(format!(
                "{stem}: prediction extents {:?} vs truth {:?}",
                p.extents(),
                t.extents()
            )));
        }
        let la = p.la_pv().zip(t.la_pv());
        let scar = p.scar().zip(t.scar());
        if la.is_none() && scar.is_none() {
            return Err(Failure::Data(format!("{stem}: no mask present in both prediction and truth")));
        }
        rows.push(VolumeMetrics::evaluate(stem.clone(), la, scar, t.la_pv(), a.wall_radius)?);
    }
    let report = MetricsReport::from_volumes(rows);
    let mut out = Outputs::new(&a.out)?;
    write_report(&mut out, "", &report)?;
    let echo = json!({ "pred": a.pred, "truth": a.truth, "wall_radius": a.wall_radius });
    out.finish("eval", 0, echo, started)
}
