//! Scar pathway: a mask branch turns the fused multiview features into a
//! per-channel, per-position attention mask in `[0, 1]`, the features are
//! modulated residually as `(1 + mask) · F`, and a head like the LA/PV one
//! produces scar probabilities.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::network::{reslice, Axis, FeatureVolume, ModelParams, Net};
use crate::tensor::{self, Tensor};
use crate::image_io::GrayImage;

/// Attention values, shaped like the fused features they modulate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    values: FeatureVolume,
}

impl AttentionMask {
    pub fn new(values: FeatureVolume) -> Result<Self> {
        if values.data.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("AttentionMask", "entries must lie in [0, 1]"));
        }
        Ok(AttentionMask { values })
    }

    pub fn values(&self) -> &FeatureVolume {
        &self.values
    }

    /// One 8-bit grayscale image per slice, channels tiled left to right;
    /// each value is `floor(255·v + 0.5)`.
    pub fn slice_images(&self) -> Vec<GrayImage> {
        mask_slice_images(&self.values.data)
    }
}

/// See [`AttentionMask::slice_images`]; `mask` is `[slices, channels, rows, cols]`.
pub fn mask_slice_images(mask: &Tensor) -> Vec<GrayImage> {
    let s = mask.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    (0..n)
        .map(|z| {
            let mut pixels = vec![0u8; h * w * c];
            for ch in 0..c {
                let plane = &mask.data()[(z * c + ch) * h * w..(z * c + ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = plane[y * w + x].clamp(0.0, 1.0);
                        pixels[y * w * c + ch * w + x] = (255.0 * v + 0.5).floor() as u8;
                    }
                }
            }
            GrayImage::new(w * c, h, pixels)
        })
        .collect()
}

/// Three 3×3 conv→ReLU→LRN blocks, a 1×1 conv and a sigmoid.
pub fn build_mask_branch(net: &mut Net, fused: Var) -> Result<Var> {
    let mut h = fused;
    for i in 1..=3 {
        h = net.conv_block(h, &format!("attn.m{i}"), 1)?;
    }
    let logits = net.conv(h, "attn.m4", 1)?;
    Ok(net.graph.sigmoid(logits))
}

pub fn build_scar_head(net: &mut Net, attended: Var) -> Result<Var> {
    crate::network::build_head(net, attended, "scar")
}

pub fn mask_branch(fused: &FeatureVolume, params: &ModelParams) -> Result<AttentionMask> {
    let fv = reslice(fused, Axis::Axial)?;
    let mut net = Net::new(params);
    let x = net.graph.leaf(fv.data);
    let m = build_mask_branch(&mut net, x)?;
    AttentionMask::new(FeatureVolume::new(net.graph.value(m).clone(), Axis::Axial)?)
}

/// `O = (1 + mask) ∘ F`.
pub fn apply_attention(fused: &FeatureVolume, mask: &AttentionMask) -> Result<FeatureVolume> {
    let fused = reslice(fused, Axis::Axial)?;
    let m = reslice(&mask.values, Axis::Axial)?;
    FeatureVolume::new(tensor::attention_apply(&fused.data, &m.data)?, Axis::Axial)
}

pub fn scar_head(attended: &FeatureVolume, params: &ModelParams) -> Result<FeatureVolume> {
    let fv = reslice(attended, Axis::Axial)?;
    let mut net = Net::new(params);
    let x = net.graph.leaf(fv.data);
    let y = build_scar_head(&mut net, x)?;
    FeatureVolume::new(net.graph.value(y).clone(), Axis::Axial)
}
