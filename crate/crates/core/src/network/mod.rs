//! The anatomy pathway of the model: a per-slice stem, the axial sequential
//! encoder-decoder with ConvLSTM layers, sagittal and coronal dilated
//! residual branches, multiview fusion and the LA/PV head. The attention
//! branch and scar head live in [`crate::attention`]; [`forward`] wires both.

mod feature;
mod params;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use feature::{reslice, Axis, FeatureVolume};
pub use params::{InitKind, ModelParams, ParamSpec, CHECKPOINT_MAGIC};

use crate::attention;
use crate::convlstm::ConvLstmParams;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::phantom::Volume;
use crate::tensor::{ConvSpec, LrnSpec, Padding, Tensor};

/// The full model and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "MVTT")]
    Mvtt,
    MultiViewOnly,
    AxialConvLstm,
    MultiViewConvLstm,
    MultiViewAttention,
    AxialConvLstmAttention,
    SeparateLaPv,
    SeparateScar,
}

/// Which components a variant enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantFlags {
    pub convlstm: bool,
    /// Sagittal and coronal dilated branches.
    pub multiview: bool,
    pub attention: bool,
    pub la_head: bool,
    pub scar_head: bool,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 8] = [
        ModelVariant::Mvtt,
        ModelVariant::MultiViewOnly,
        ModelVariant::AxialConvLstm,
        ModelVariant::MultiViewConvLstm,
        ModelVariant::MultiViewAttention,
        ModelVariant::AxialConvLstmAttention,
        ModelVariant::SeparateLaPv,
        ModelVariant::SeparateScar,
    ];

    pub fn flags(self) -> VariantFlags {
        use ModelVariant::*;
        let (convlstm, multiview, attention) = match self {
            Mvtt => (true, true, true),
            MultiViewOnly => (false, true, false),
            AxialConvLstm => (true, false, false),
            MultiViewConvLstm => (true, true, false),
            MultiViewAttention => (false, true, true),
            AxialConvLstmAttention => (true, false, true),
            SeparateLaPv => (true, true, false),
            SeparateScar => (true, true, true),
        };
        VariantFlags {
            convlstm,
            multiview,
            attention,
            la_head: self != SeparateScar,
            scar_head: self != SeparateLaPv,
        }
    }

    pub fn tag(self) -> &'static str {
        use ModelVariant::*;
        match self {
            Mvtt => "MVTT",
            MultiViewOnly => "MultiViewOnly",
            AxialConvLstm => "AxialConvLstm",
            MultiViewConvLstm => "MultiViewConvLstm",
            MultiViewAttention => "MultiViewAttention",
            AxialConvLstmAttention => "AxialConvLstmAttention",
            SeparateLaPv => "SeparateLaPv",
            SeparateScar => "SeparateScar",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let tags: Vec<_> = ModelVariant::ALL.iter().map(|v| v.tag()).collect();
                Error::Config(format!("unknown variant {s:?}; valid tags: {}", tags.join(", ")))
            })
    }
}

/// Where ConvLSTM layers sit inside the sequential branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLstmPlacement {
    /// After the third pooling, at 1/8 resolution.
    pub bottleneck: bool,
    /// After the last decoder block, at full resolution.
    pub output: bool,
}

impl Default for ConvLstmPlacement {
    fn default() -> Self {
        ConvLstmPlacement {
            bottleneck: true,
            output: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Volume extents; axial slices are `ny × nx` images, `nz` of them.
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_head_features")]
    pub head_features: usize,
    #[serde(default = "default_dilations")]
    pub dilations: Vec<usize>,
    #[serde(default)]
    pub lrn: LrnSpec,
    #[serde(default)]
    pub convlstm: ConvLstmPlacement,
}

fn default_features() -> usize {
    12
}

fn default_head_features() -> usize {
    24
}

fn default_dilations() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

const KERNEL: usize = 3;
const MAX_EXTENT: usize = 1 << 16;
const MAX_CHANNELS: usize = 1024;
const ENCODER_LEVELS: usize = 3;

impl NetworkConfig {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        NetworkConfig {
            nx,
            ny,
            nz,
            features: default_features(),
            head_features: default_head_features(),
            dilations: default_dilations(),
            lrn: LrnSpec::default(),
            convlstm: ConvLstmPlacement::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let step = 1 << ENCODER_LEVELS;
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::Config("volume extents must be positive".into()));
        }
        if self.nx % step != 0 || self.ny % step != 0 {
            return Err(Error::Config(format!(
                "axial slice extents {}x{} must be divisible by {step} (three 2x poolings)",
                self.ny, self.nx
            )));
        }
        if [self.nx, self.ny, self.nz].iter().any(|&n| n > MAX_EXTENT) {
            return Err(Error::Config(format!("volume extents must be at most {MAX_EXTENT}")));
        }
        if !(1..=MAX_CHANNELS).contains(&self.features) || !(1..=MAX_CHANNELS).contains(&self.head_features) {
            return Err(Error::Config(format!("channel counts must lie in 1..={MAX_CHANNELS}")));
        }
        if self.dilations.is_empty()
            || self.dilations.len() > MAX_CHANNELS
            || self.dilations.iter().any(|&d| d == 0 || d > MAX_EXTENT)
        {
            return Err(Error::Config(format!(
                "dilations {:?} must be non-empty with each in 1..={MAX_EXTENT}",
                self.dilations
            )));
        }
        self.lrn.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

fn conv_params(out: &mut Vec<ParamSpec>, layer: &str, c_in: usize, c_out: usize, k: usize) {
    out.push(ParamSpec {
        path: format!("{layer}.w"),
        shape: vec![c_out, c_in, k, k],
        init: InitKind::HeUniform { fan_in: c_in * k * k },
    });
    out.push(ParamSpec {
        path: format!("{layer}.b"),
        shape: vec![c_out],
        init: InitKind::Zeros,
    });
}

fn lstm_params(out: &mut Vec<ParamSpec>, layer: &str, channels: usize, h: usize, w: usize) {
    let shapes = ConvLstmParams::shapes(channels, channels, KERNEL, h, w);
    for (name, shape) in ConvLstmParams::NAMES.iter().zip(shapes) {
        let init = if name.starts_with("w_") {
            InitKind::HeUniform {
                fan_in: shape[1] * KERNEL * KERNEL,
            }
        } else {
            InitKind::Zeros
        };
        out.push(ParamSpec {
            path: format!("{layer}.{name}"),
            shape,
            init,
        });
    }
}

/// Parameter namespace of a variant under a configuration.
pub fn layout(config: &NetworkConfig, variant: ModelVariant) -> Vec<ParamSpec> {
    let flags = variant.flags();
    let f = config.features;
    let hf = config.head_features;
    let mut out = Vec::new();
    conv_params(&mut out, "stem", 1, f, KERNEL);
    for i in 1..=2 * ENCODER_LEVELS {
        conv_params(&mut out, &format!("seq.enc{i}"), f, f, KERNEL);
        conv_params(&mut out, &format!("seq.dec{i}"), f, f, KERNEL);
    }
    if flags.convlstm {
        let s = 1 << ENCODER_LEVELS;
        if config.convlstm.bottleneck {
            lstm_params(&mut out, "seq.lstm_mid", f, config.ny / s, config.nx / s);
        }
        if config.convlstm.output {
            lstm_params(&mut out, "seq.lstm_out", f, config.ny, config.nx);
        }
    }
    let views = if flags.multiview {
        for branch in ["sag", "cor"] {
            for i in 1..=config.dilations.len() {
                conv_params(&mut out, &format!("{branch}.d{i}"), f, f, KERNEL);
            }
        }
        3
    } else {
        1
    };
    conv_params(&mut out, "fuse.views", views * f, f, KERNEL);
    conv_params(&mut out, "fuse.stem", 2 * f, f, KERNEL);
    if flags.la_head {
        head_params(&mut out, "la", f, hf, LA_PRIOR_LOGIT);
    }
    if flags.scar_head {
        if flags.attention {
            for i in 1..=3 {
                conv_params(&mut out, &format!("attn.m{i}"), f, f, KERNEL);
            }
            conv_params(&mut out, "attn.m4", f, f, 1);
        }
        head_params(&mut out, "scar", f, hf, SCAR_PRIOR_LOGIT);
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out
}

/// Initial output-layer biases: logits of rough foreground fractions, so
/// an untrained model starts near the class prior instead of at 0.5
/// everywhere. Training replaces them with the fractions it actually sees
/// (see [`crate::train::set_output_priors`]).
pub const LA_PRIOR_LOGIT: f64 = -2.5;
pub const SCAR_PRIOR_LOGIT: f64 = -4.0;

fn head_params(out: &mut Vec<ParamSpec>, prefix: &str, f: usize, hf: usize, prior_logit: f64) {
    conv_params(out, &format!("{prefix}.c1"), f, hf, KERNEL);
    conv_params(out, &format!("{prefix}.c2"), hf, hf, KERNEL);
    conv_params(out, &format!("{prefix}.c3"), hf, 1, KERNEL);
    out.last_mut().expect("bias just pushed").init = InitKind::Const(prior_logit);
}

/// A graph under construction plus the parameter leaves it has pulled in.
pub struct Net<'p> {
    pub graph: Graph,
    params: &'p ModelParams,
    vars: BTreeMap<String, Var>,
}

impl<'p> Net<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Net {
            graph: Graph::new(),
            params,
            vars: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.params.config
    }

    pub fn flags(&self) -> VariantFlags {
        self.params.variant.flags()
    }

    /// Leaf for the parameter at `path`, created on first use.
    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(path) {
            return Ok(v);
        }
        let v = self.graph.leaf(self.params.get(path)?.clone());
        self.vars.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// `same`-padded convolution with the weights at `{layer}.w` / `{layer}.b`.
    pub fn conv(&mut self, x: Var, layer: &str, dilation: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        let s = self.graph.value(w).shape().to_vec();
        let spec = ConvSpec {
            in_channels: s[1],
            out_channels: s[0],
            kernel: (s[2], s[3]),
            stride: 1,
            dilation,
            padding: Padding::Same,
        };
        self.graph.conv2d(x, w, b, spec)
    }

    pub fn conv_relu(&mut self, x: Var, layer: &str, dilation: usize) -> Result<Var> {
        let y = self.conv(x, layer, dilation)?;
        Ok(self.graph.relu(y))
    }

    /// conv → ReLU → LRN, the block used throughout the network.
    pub fn conv_block(&mut self, x: Var, layer: &str, dilation: usize) -> Result<Var> {
        let y = self.conv_relu(x, layer, dilation)?;
        let lrn: LrnSpec = self.params.config.lrn;
        self.graph.lrn(y, lrn)
    }

    pub fn convlstm(&mut self, x: Var, layer: &str) -> Result<Var> {
        let vars = ConvLstmParams::NAMES
            .iter()
            .map(|n| self.param(&format!("{layer}.{n}")))
            .collect::<Result<Vec<_>>>()?;
        self.graph.convlstm(x, &vars)
    }

    /// Collects parameter gradients into a store shaped like the model;
    /// parameters the graph never touched get zeros.
    pub fn collect_gradients(&self, grads: &mut Gradients) -> ModelParams {
        let mut out = self.params.zeros_like();
        for (path, &v) in &self.vars {
            if let Some(g) = grads.take(v) {
                out.set(path, g).expect("gradient matches its parameter");
            }
        }
        out
    }
}

/// Intensities of a volume as an axial stack `[nz, 1, ny, nx]`.
pub fn volume_tensor(volume: &Volume) -> Tensor {
    let (nx, ny, nz) = volume.extents();
    Tensor::new(vec![nz, 1, ny, nx], volume.intensities().to_vec()).expect("volume stores nx*ny*nz values")
}

fn check_extents(volume: &Volume, config: &NetworkConfig) -> Result<()> {
    let ext = volume.extents();
    if ext != (config.nx, config.ny, config.nz) {
        return Err(Error::shape(
            "forward",
            format!(
                "volume extents {ext:?} differ from model extents {:?}",
                (config.nx, config.ny, config.nz)
            ),
        ));
    }
    Ok(())
}

pub fn build_stem(net: &mut Net, input: Var) -> Result<Var> {
    net.conv_relu(input, "stem", 1)
}

pub fn build_sequential(net: &mut Net, x: Var) -> Result<Var> {
    let flags = net.flags();
    let placement = net.config().convlstm;
    let mut h = x;
    for level in 0..ENCODER_LEVELS {
        h = net.conv_block(h, &format!("seq.enc{}", 2 * level + 1), 1)?;
        h = net.conv_block(h, &format!("seq.enc{}", 2 * level + 2), 1)?;
        h = net.graph.max_pool2(h)?;
    }
    if flags.convlstm && placement.bottleneck {
        h = net.convlstm(h, "seq.lstm_mid")?;
    }
    for level in 0..ENCODER_LEVELS {
        h = net.graph.upsample2(h)?;
        h = net.conv_block(h, &format!("seq.dec{}", 2 * level + 1), 1)?;
        h = net.conv_block(h, &format!("seq.dec{}", 2 * level + 2), 1)?;
    }
    if flags.convlstm && placement.output {
        h = net.convlstm(h, "seq.lstm_out")?;
    }
    Ok(h)
}

/// `prefix` is `"sag"` or `"cor"`.
pub fn build_dilated(net: &mut Net, x: Var, prefix: &str) -> Result<Var> {
    let dilations = net.config().dilations.clone();
    let mut h = x;
    for (i, d) in dilations.into_iter().enumerate() {
        let r = net.conv_block(h, &format!("{prefix}.d{}", i + 1), d)?;
        h = net.graph.add(h, r)?;
    }
    Ok(h)
}

/// All inputs are axial stacks. `views` is `None` for axial-only variants.
pub fn build_fuse(net: &mut Net, axial: Var, views: Option<(Var, Var)>, stem: Var) -> Result<Var> {
    let cat = match views {
        Some((sag, cor)) => net.graph.concat_channels(&[axial, sag, cor])?,
        None => axial,
    };
    let fused = net.conv_relu(cat, "fuse.views", 1)?;
    let with_stem = net.graph.concat_channels(&[fused, stem])?;
    net.conv_relu(with_stem, "fuse.stem", 1)
}

/// Segmentation head under `prefix` (`"la"` or `"scar"`): two 3×3 blocks then a 3×3 conv and sigmoid.
pub fn build_head(net: &mut Net, x: Var, prefix: &str) -> Result<Var> {
    let h = net.conv_block(x, &format!("{prefix}.c1"), 1)?;
    let h = net.conv_block(h, &format!("{prefix}.c2"), 1)?;
    let logits = net.conv(h, &format!("{prefix}.c3"), 1)?;
    Ok(net.graph.sigmoid(logits))
}

/// Graph nodes of interest produced by [`build_forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub stem: Var,
    pub fused: Var,
    pub la_pv: Option<Var>,
    pub scar: Option<Var>,
    pub mask: Option<Var>,
}

pub fn build_forward(net: &mut Net, input: Var) -> Result<ForwardVars> {
    let flags = net.flags();
    let stem = build_stem(net, input)?;
    let axial = build_sequential(net, stem)?;
    let views = if flags.multiview {
        let sag_in = net.graph.permute4(stem, Axis::Axial.permutation_to(Axis::Sagittal))?;
        let sag = build_dilated(net, sag_in, "sag")?;
        let sag = net.graph.permute4(sag, Axis::Sagittal.permutation_to(Axis::Axial))?;
        let cor_in = net.graph.permute4(stem, Axis::Axial.permutation_to(Axis::Coronal))?;
        let cor = build_dilated(net, cor_in, "cor")?;
        let cor = net.graph.permute4(cor, Axis::Coronal.permutation_to(Axis::Axial))?;
        Some((sag, cor))
    } else {
        None
    };
    let fused = build_fuse(net, axial, views, stem)?;
    let la_pv = if flags.la_head {
        Some(build_head(net, fused, "la")?)
    } else {
        None
    };
    let (scar, mask) = if flags.scar_head {
        let (scar_in, mask) = if flags.attention {
            let mask = attention::build_mask_branch(net, fused)?;
            (net.graph.attention(fused, mask)?, Some(mask))
        } else {
            (fused, None)
        };
        (Some(attention::build_scar_head(net, scar_in)?), mask)
    } else {
        (None, None)
    };
    Ok(ForwardVars {
        stem,
        fused,
        la_pv,
        scar,
        mask,
    })
}

/// Probability stacks `[nz, 1, ny, nx]` from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub la_pv: Option<Tensor>,
    pub scar: Option<Tensor>,
    /// Attention mask `[nz, features, ny, nx]` when the variant has one.
    pub attention: Option<Tensor>,
}

pub fn forward(volume: &Volume, params: &ModelParams) -> Result<Prediction> {
    check_extents(volume, &params.config)?;
    let mut net = Net::new(params);
    let input = net.graph.leaf(volume_tensor(volume));
    let out = build_forward(&mut net, input)?;
    let take = |v: Option<Var>| v.map(|v| net.graph.value(v).clone());
    Ok(Prediction {
        la_pv: take(out.la_pv),
        scar: take(out.scar),
        attention: take(out.mask),
    })
}

fn run_single(
    params: &ModelParams,
    input: &FeatureVolume,
    axis: Axis,
    build: impl FnOnce(&mut Net, Var) -> Result<Var>,
) -> Result<FeatureVolume> {
    let fv = reslice(input, axis)?;
    let mut net = Net::new(params);
    let x = net.graph.leaf(fv.data);
    let y = build(&mut net, x)?;
    FeatureVolume::new(net.graph.value(y).clone(), axis)
}

/// Per-axial-slice 3×3 convolution + ReLU on the raw intensities.
pub fn stem(volume: &Volume, params: &ModelParams) -> Result<FeatureVolume> {
    check_extents(volume, &params.config)?;
    let fv = FeatureVolume::new(volume_tensor(volume), Axis::Axial)?;
    run_single(params, &fv, Axis::Axial, build_stem)
}

/// Axial encoder-decoder; ConvLSTM layers treat the slice index as time.
pub fn sequential_branch(axial: &FeatureVolume, params: &ModelParams) -> Result<FeatureVolume> {
    let [_, _, h, w] = axial.data.as_stack_dims("sequential_branch")?;
    let step = 1 << ENCODER_LEVELS;
    if h % step != 0 || w % step != 0 {
        return Err(Error::shape(
            "sequential_branch",
            format!("slice extents {h}x{w} must be divisible by {step}"),
        ));
    }
    run_single(params, axial, Axis::Axial, build_sequential)
}

/// Dilated residual branch under `prefix` (`"sag"` or `"cor"`), run on the
/// slices of `fv` as given.
pub fn dilated_branch(fv: &FeatureVolume, params: &ModelParams, prefix: &str) -> Result<FeatureVolume> {
    run_single(params, fv, fv.axis, |net, x| build_dilated(net, x, prefix))
}

/// Channel-concatenates the axial, sagittal and coronal features (each
/// resliced to axial first), fuses them, then merges the stem features.
pub fn fuse(
    axial_seq: &FeatureVolume,
    sagittal: Option<&FeatureVolume>,
    coronal: Option<&FeatureVolume>,
    stem_features: &FeatureVolume,
    params: &ModelParams,
) -> Result<FeatureVolume> {
    let axial_seq = reslice(axial_seq, Axis::Axial)?;
    let stem_features = reslice(stem_features, Axis::Axial)?;
    let mut net = Net::new(params);
    let a = net.graph.leaf(axial_seq.data);
    let s = net.graph.leaf(stem_features.data);
    let views = match (sagittal, coronal) {
        (Some(sag), Some(cor)) => {
            let sag = net.graph.leaf(reslice(sag, Axis::Axial)?.data);
            let cor = net.graph.leaf(reslice(cor, Axis::Axial)?.data);
            Some((sag, cor))
        }
        (None, None) => None,
        _ => return Err(Error::invalid("fuse", "sagittal and coronal features come as a pair")),
    };
    let y = build_fuse(&mut net, a, views, s)?;
    FeatureVolume::new(net.graph.value(y).clone(), Axis::Axial)
}

pub fn la_pv_head(fused: &FeatureVolume, params: &ModelParams) -> Result<FeatureVolume> {
    run_single(params, fused, Axis::Axial, |net, x| build_head(net, x, "la"))
}
