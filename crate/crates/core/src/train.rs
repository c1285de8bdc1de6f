//! Two-task loss, Adam, learning-rate decay and the cross-validation driver.
//!
//! One optimiser step consumes one whole volume; within an epoch the training
//! volumes are visited in a seeded shuffled order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::network::{self, build_forward, volume_tensor, ModelParams, ModelVariant, Net, NetworkConfig, Prediction};
use crate::phantom::{Dataset, Mask, Volume};
use crate::metrics::{MetricsReport, VolumeMetrics};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecaySchedule {
    /// `lr_i · (lr_f / lr_i)^(s / T)`
    Exponential,
    /// `lr_i + (lr_f − lr_i) · s / T`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub anat: f64,
    pub scar: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { anat: 1.0, scar: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub decay: DecaySchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Probability above which a voxel is foreground.
    pub threshold: f64,
    /// Cross-validation folds; 1 trains on every volume and reports on the
    /// training set.
    pub folds: usize,
    /// Radius of the wall shell used for scar percentages.
    pub wall_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ModelVariant::Mvtt,
            epochs: 300,
            lr_initial: 0.001,
            lr_final: 0.000445,
            decay: DecaySchedule::Exponential,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            threshold: 0.5,
            folds: 10,
            wall_radius: crate::baselines::DEFAULT_WALL_RADIUS,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, in a fixed order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("epochs must be at least 1".to_string());
        }
        if !(self.lr_initial.is_finite() && self.lr_final.is_finite() && 0.0 < self.lr_final && self.lr_final <= self.lr_initial) {
            p.push(format!(
                "learning rates must satisfy 0 < lr_final <= lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            p.push(format!("adam betas must lie in [0, 1), got {} and {}", a.beta1, a.beta2));
        }
        if !(a.epsilon > 0.0 && a.epsilon.is_finite()) {
            p.push(format!("adam epsilon must be positive, got {}", a.epsilon));
        }
        let w = &self.weights;
        if !(w.anat >= 0.0 && w.scar >= 0.0 && w.anat.is_finite() && w.scar.is_finite()) {
            p.push(format!("loss weights must be finite and >= 0, got {} and {}", w.anat, w.scar));
        } else {
            let flags = self.variant.flags();
            let active = (if flags.la_head { w.anat } else { 0.0 }) + (if flags.scar_head { w.scar } else { 0.0 });
            if active == 0.0 {
                p.push(format!("loss weights leave variant {} with nothing to train", self.variant));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            p.push(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.folds == 0 {
            p.push("folds must be at least 1".to_string());
        }
        if !(self.wall_radius.is_finite() && self.wall_radius >= 0.0) {
            p.push(format!("wall radius must be finite and >= 0, got {}", self.wall_radius));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Learning rate for `step` of a run whose last step is `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let (lo, hi) = (config.lr_final, config.lr_initial);
    if step == 0 || total_steps == 0 {
        return hi;
    }
    if step >= total_steps {
        return lo;
    }
    let f = step as f64 / total_steps as f64;
    match config.decay {
        DecaySchedule::Exponential => hi * (lo / hi).powf(f),
        DecaySchedule::Linear => hi + (lo - hi) * f,
    }
}

/// Mask as a `[nz, 1, ny, nx]` stack of 0/1.
pub fn mask_tensor(mask: &Mask) -> Tensor {
    let (nx, ny, nz) = mask.extents();
    Tensor::new(
        vec![nz, 1, ny, nx],
        mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask stores nx*ny*nz values")
}

/// `w_anat · MSE(la) + w_scar · MSE(scar)`; a `None` probability drops its term.
pub fn loss(
    la_prob: Option<&Tensor>,
    scar_prob: Option<&Tensor>,
    la_truth: &Tensor,
    scar_truth: &Tensor,
    weights: LossWeights,
) -> Result<f64> {
    let mse = |p: &Tensor, t: &Tensor| -> Result<f64> {
        if p.shape() != t.shape() {
            return Err(Error::shape("loss", format!("probabilities {:?} vs truth {:?}", p.shape(), t.shape())));
        }
        Ok(p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64)
    };
    let mut total = 0.0;
    if let Some(p) = la_prob {
        total += weights.anat * mse(p, la_truth)?;
    }
    if let Some(p) = scar_prob {
        total += weights.scar * mse(p, scar_truth)?;
    }
    Ok(total)
}

/// Adds the loss node for one volume's forward graph.
pub fn build_loss(
    net: &mut Net,
    la_pv: Option<Var>,
    scar: Option<Var>,
    la_truth: &Tensor,
    scar_truth: &Tensor,
    weights: LossWeights,
) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some(v) = la_pv {
        terms.push((net.graph.mse(v, la_truth)?, weights.anat));
    }
    if let Some(v) = scar {
        terms.push((net.graph.mse(v, scar_truth)?, weights.scar));
    }
    net.graph.weighted_sum(&terms)
}

/// Loss and parameter gradients for one labelled volume.
pub fn loss_and_gradients(volume: &Volume, params: &ModelParams, weights: LossWeights) -> Result<(f64, ModelParams)> {
    let (la, scar) = truths(volume)?;
    let mut net = Net::new(params);
    let input = net.graph.leaf(volume_tensor(volume));
    let out = build_forward(&mut net, input)?;
    let l = build_loss(&mut net, out.la_pv, out.scar, &la, &scar, weights)?;
    let value = net.graph.value(l).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    let mut grads = net.graph.backward(l)?;
    Ok((value, net.collect_gradients(&mut grads)))
}

fn truths(volume: &Volume) -> Result<(Tensor, Tensor)> {
    let la = volume
        .la_pv()
        .ok_or_else(|| Error::invalid("train", "volume has no LA/PV ground truth"))?;
    let scar = volume
        .scar()
        .ok_or_else(|| Error::invalid("train", "volume has no scar ground truth"))?;
    Ok((mask_tensor(la), mask_tensor(scar)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any
/// parameter changes, naming the offending layer.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for (path, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of {path} at optimiser step {}",
                state.step + 1
            )));
        }
        let p = params.get(path)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("{path}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (path, g) in grads.iter() {
        let m = state.m.get_mut(path)?.data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(path)?.data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.m.get(path)?.data();
        let v = state.v.get(path)?.data();
        let p = params.get_mut(path)?.data_mut();
        for ((pi, mi), vi) in p.iter_mut().zip(m).zip(v) {
            let mh = mi / c1;
            let vh = vi / c2;
            *pi -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's volumes of the loss before each update.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.lr));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

fn network_config(volumes: &[&Volume]) -> Result<NetworkConfig> {
    let first = volumes.first().ok_or_else(|| Error::invalid("train", "no training volumes"))?;
    let ext = first.extents();
    if let Some(v) = volumes.iter().find(|v| v.extents() != ext) {
        return Err(Error::shape(
            "train",
            format!("volume extents differ: {ext:?} vs {:?}", v.extents()),
        ));
    }
    let cfg = NetworkConfig::new(ext.0, ext.1, ext.2);
    cfg.validate()?;
    Ok(cfg)
}

/// Foreground fractions below this are clamped before taking the logit.
const MIN_PRIOR_FRACTION: f64 = 1e-4;

/// Sets each head's output bias to the logit of its foreground fraction over
/// `volumes`. With a larger bias the background gradient outweighs the few
/// positives on the first steps and the head settles on predicting nothing.
pub fn set_output_priors(params: &mut ModelParams, volumes: &[&Volume]) -> Result<()> {
    let flags = params.variant.flags();
    let heads: [(bool, &str, fn(&Volume) -> Option<&Mask>); 2] =
        [(flags.la_head, "la", Volume::la_pv), (flags.scar_head, "scar", Volume::scar)];
    for (present, head, mask_of) in heads {
        if !present {
            continue;
        }
        let (mut pos, mut total) = (0usize, 0usize);
        for (i, v) in volumes.iter().enumerate() {
            let m = mask_of(v).ok_or_else(|| Error::invalid("train", format!("volume {i} has no {head} mask")))?;
            pos += m.count();
            total += m.len();
        }
        let f = (pos as f64 / total.max(1) as f64).clamp(MIN_PRIOR_FRACTION, 1.0 - MIN_PRIOR_FRACTION);
        let bias = params.get_mut(&format!("{head}.c3.b"))?;
        bias.data_mut()[0] = (f / (1.0 - f)).ln();
    }
    Ok(())
}

/// Trains a fresh model on `volumes`; `on_epoch` sees each finished epoch.
pub fn train(volumes: &[&Volume], config: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    config.validate()?;
    let net_cfg = network_config(volumes)?;
    let mut params = ModelParams::init(&net_cfg, config.variant, config.seed)?;
    set_output_priors(&mut params, volumes)?;
    let mut state = AdamState::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f0d_e700_0001);
    let total = config.epochs * volumes.len();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..volumes.len()).collect();
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut lr = config.lr_initial;
        for &i in &order {
            let (l, grads) = loss_and_gradients(volumes[i], &params, config.weights).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch}, step {}, volume {i})", step + 1)),
                other => other,
            })?;
            lr = lr_at(step, total - 1, config);
            adam_step(&mut params, &grads, &mut state, lr, &config.adam)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (epoch {epoch}, volume {i})")),
                    other => other,
                })?;
            sum += l;
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            loss: sum / volumes.len() as f64,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { params, history })
}

/// Probabilities and thresholded masks for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    pub la_pv: Option<Mask>,
    pub scar: Option<Mask>,
}

pub fn infer(volume: &Volume, params: &ModelParams, threshold: f64) -> Result<Inference> {
    let prediction = network::forward(volume, params)?;
    let ext = volume.extents();
    let to_mask = |t: &Option<Tensor>| t.as_ref().map(|t| Mask::threshold(ext, t.data(), threshold)).transpose();
    Ok(Inference {
        la_pv: to_mask(&prediction.la_pv)?,
        scar: to_mask(&prediction.scar)?,
        prediction,
    })
}

pub fn evaluate_volume(id: &str, volume: &Volume, params: &ModelParams, config: &TrainConfig) -> Result<VolumeMetrics> {
    let inf = infer(volume, params, config.threshold)?;
    let la_truth = volume.la_pv();
    let scar_truth = volume.scar();
    VolumeMetrics::evaluate(
        id,
        inf.la_pv.as_ref().zip(la_truth),
        inf.scar.as_ref().zip(scar_truth),
        la_truth,
        config.wall_radius,
    )
}

/// Name of the `index`-th dataset volume in reports.
pub fn volume_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub report: MetricsReport,
}

/// Trains on every fold but `fold` and reports on `fold`. With a 1-fold
/// dataset it trains and reports on all volumes.
pub fn run_fold(dataset: &Dataset, fold: usize, config: &TrainConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<FoldResult> {
    if fold >= dataset.folds {
        return Err(Error::invalid("run_fold", format!("fold {fold} of {}", dataset.folds)));
    }
    let (train_indices, test_indices) = if dataset.folds == 1 {
        ((0..dataset.len()).collect::<Vec<_>>(), (0..dataset.len()).collect())
    } else {
        (dataset.train_indices(fold), dataset.fold_indices(fold))
    };
    let train_set: Vec<&Volume> = train_indices.iter().map(|&i| &dataset.volumes[i]).collect();
    let outcome = train(&train_set, config, on_epoch)?;
    let rows = test_indices
        .iter()
        .map(|&i| evaluate_volume(&volume_id(i), &dataset.volumes[i], &outcome.params, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldResult {
        fold,
        train_indices,
        test_indices,
        params: outcome.params,
        history: outcome.history,
        report: MetricsReport::from_volumes(rows),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    /// Built from the concatenated per-volume rows of every fold.
    pub aggregate: MetricsReport,
}

/// Runs every fold of `dataset` (re-partitioned into `config.folds` folds).
pub fn cross_validate(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<CrossValidation> {
    config.validate()?;
    let ds = if dataset.folds == config.folds {
        dataset.clone()
    } else {
        dataset.refold(config.folds)?
    };
    let mut folds = Vec::with_capacity(ds.folds);
    for f in 0..ds.folds {
        folds.push(run_fold(&ds, f, config, |r| on_epoch(f, r))?);
    }
    let rows = folds.iter().flat_map(|f| f.report.volumes.iter().cloned()).collect();
    Ok(CrossValidation {
        folds,
        aggregate: MetricsReport::from_volumes(rows),
    })
}
