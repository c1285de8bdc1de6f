//! Joint segmentation of the left atrium (with pulmonary veins) and atrial
//! scar from a single 3-D volume.
//!
//! Everything is built from scratch in double precision: the tensor
//! primitives and their backward passes ([`tensor`], [`graph`]), the ConvLSTM
//! ([`convlstm`]), the multiview network ([`network`]) and attention branch
//! ([`attention`]), a synthetic phantom generator ([`phantom`]), the
//! unsupervised scar baselines ([`baselines`]), evaluation statistics
//! ([`metrics`]) and the training loop ([`train`]).

pub mod attention;
pub mod baselines;
pub mod convlstm;
pub mod error;
pub mod graph;
pub mod image_io;
pub mod io_util;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
