//! Segmentation heads behind a common trait, selected from a name registry.
//!
//! Both heads consume the backbone's coarsest features, predict on that grid
//! only, and rely on the decode chain for resolution; there is no learned
//! upsampler anywhere.

mod mask_query;
mod per_pixel;

pub use mask_query::{postprocess_panoptic, MaskQueryHead, PanopticPrediction};
pub use per_pixel::PerPixelHead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FeaturePyramid;
use crate::decode::DecodeError;
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Tape, TensorError, TensorRef};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("unknown head '{0}'; expected one of {1}")]
    Unknown(String, String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Registry name: `per-pixel` or `mask-query`.
    pub kind: String,
    /// Real classes (background included); the mask-query class head adds a
    /// no-object slot on top.
    pub num_classes: usize,
    pub num_queries: usize,
    pub query_dim: usize,
    pub mask_dim: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_multiplier: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: "per-pixel".into(),
            num_classes: 4,
            num_queries: 8,
            query_dim: 32,
            mask_dim: 32,
            decoder_layers: 2,
            attention_heads: 1,
            ffn_multiplier: 2,
        }
    }
}

/// Tape-resident head outputs at full image resolution. The coarse stacks
/// (pre-decode) ride along so evaluation can also decode them through
/// hardened assignments.
pub enum HeadOutput {
    /// `[h*w, num_classes]`, rows on the simplex.
    PerPixel { class_probs: TensorRef, coarse_probs: TensorRef },
    /// `class_probs[num_queries, num_classes+1]` rows on the simplex;
    /// `masks[h*w, num_queries]` independent probabilities in (0,1).
    MaskQuery { class_probs: TensorRef, masks: TensorRef, coarse_masks: TensorRef },
}

pub trait SegmentationHead: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        pyramid: &FeaturePyramid,
        image: (usize, usize),
    ) -> Result<HeadOutput, HeadError>;
}

type HeadBuilder =
    fn(cfg: &HeadConfig, backbone_channels: usize, store: &mut ParamStore) -> Box<dyn SegmentationHead>;

/// Name → builder table of the available heads.
pub fn head_registry() -> &'static [(&'static str, HeadBuilder)] {
    &[
        ("per-pixel", |cfg, ch, store| Box::new(PerPixelHead::build(cfg, ch, store))),
        ("mask-query", |cfg, ch, store| Box::new(MaskQueryHead::build(cfg, ch, store))),
    ]
}

pub fn build_head(
    cfg: &HeadConfig,
    backbone_channels: usize,
    store: &mut ParamStore,
) -> Result<Box<dyn SegmentationHead>, HeadError> {
    match head_registry().iter().find(|(n, _)| *n == cfg.kind) {
        Some((_, builder)) => Ok(builder(cfg, backbone_channels, store)),
        None => {
            let known: Vec<&str> = head_registry().iter().map(|(n, _)| *n).collect();
            Err(HeadError::Unknown(cfg.kind.clone(), known.join(", ")))
        }
    }
}
