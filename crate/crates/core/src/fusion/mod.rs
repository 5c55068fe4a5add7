//! Fusion of spectrum-map stacks into one white-light RGB image.
//!
//! Two backends: a per-band linear combination (optionally fitted by least
//! squares) and a small attention U-Net.

mod linear;
mod saunet;

pub use linear::{fit_weights_least_squares, linear_fuse, pearson, LinearFusionWeights, WeightMode};
pub use saunet::{
    saunet_forward, stack_input, AttentionGate, SaPlacement, SaUnet, SaUnetConfig, SpectrumAttention,
    SIZE_MULTIPLE,
};

use crate::error::Result;
use crate::image::{RgbImage, SpectrumMapStack};

#[derive(Clone, Debug)]
pub enum FusionModel {
    Linear { weights: LinearFusionWeights, kappa: f64 },
    SaUnet(Box<SaUnet>),
}

impl FusionModel {
    pub fn fuse(&self, stack: &SpectrumMapStack) -> Result<RgbImage> {
        match self {
            FusionModel::Linear { weights, kappa } => linear_fuse(stack, weights, *kappa),
            FusionModel::SaUnet(net) => saunet_forward(stack, net),
        }
    }
}
