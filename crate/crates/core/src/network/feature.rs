use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Orientation of a stack of 2-D slices cut from a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Slices along z; each slice is a `(y, x)` image.
    Axial,
    /// Slices along x; each slice is a `(z, y)` image.
    Sagittal,
    /// Slices along y; each slice is a `(z, x)` image.
    Coronal,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Label {
    X,
    Y,
    Z,
    C,
}

impl Axis {
    /// Volume axis carried by each tensor axis of a `[slices, channels, rows, cols]` stack.
    fn layout(self) -> [Label; 4] {
        match self {
            Axis::Axial => [Label::Z, Label::C, Label::Y, Label::X],
            Axis::Sagittal => [Label::X, Label::C, Label::Z, Label::Y],
            Axis::Coronal => [Label::Y, Label::C, Label::Z, Label::X],
        }
    }

    /// Permutation taking a stack laid out along `self` to one laid out along `target`.
    pub fn permutation_to(self, target: Axis) -> [usize; 4] {
        let src = self.layout();
        let dst = target.layout();
        let mut perm = [0; 4];
        for (p, label) in perm.iter_mut().zip(dst) {
            *p = src.iter().position(|&l| l == label).expect("layouts share labels");
        }
        perm
    }
}

/// A stack of feature maps `[slices, channels, rows, cols]` cut along `axis`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub data: Tensor,
    pub axis: Axis,
}

impl FeatureVolume {
    pub fn new(data: Tensor, axis: Axis) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::shape(
                "FeatureVolume",
                format!("expected [slices, channels, rows, cols], got {:?}", data.shape()),
            ));
        }
        Ok(FeatureVolume { data, axis })
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Re-cuts a feature volume along another axis. Pure index permutation.
pub fn reslice(fv: &FeatureVolume, target: Axis) -> Result<FeatureVolume> {
    if fv.axis == target {
        return Ok(fv.clone());
    }
    let data = fv.data.permute4(fv.axis.permutation_to(target))?;
    Ok(FeatureVolume { data, axis: target })
}
