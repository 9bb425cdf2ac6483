//! Backbone + clustering hooks + head assembled into one forward pass.

use thiserror::Error;

use crate::backbone::{Backbone, BackboneError, FeaturePyramid};
use crate::config::RunConfig;
use crate::heads::{build_head, HeadError, HeadOutput, SegmentationHead};
use crate::params::{ParamStore, TapeBinding};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub struct SegModel {
    pub backbone: Backbone,
    pub head: Box<dyn SegmentationHead>,
}

/// One sample's forward products.
pub struct ForwardPass {
    pub pyramid: FeaturePyramid,
    pub output: HeadOutput,
}

impl SegModel {
    /// Registers every parameter into `store` and assembles the model.
    pub fn build(cfg: &RunConfig, store: &mut ParamStore) -> Result<SegModel, ModelError> {
        let backbone = Backbone::build(&cfg.backbone, store)?;
        let backbone_channels = *cfg.backbone.stage_channels.last().expect("at least one stage");
        let head = build_head(&cfg.head, backbone_channels, store)?;
        Ok(SegModel { backbone, head })
    }

    /// Forward one image already placed on the tape as `[3, h, w]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        image: &Tensor,
    ) -> Result<ForwardPass, ModelError> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let image_ref = tape.constant(image);
        let pyramid = self.backbone.forward_with_hooks(tape, binding, image_ref)?;
        let output = self.head.forward(tape, binding, &pyramid, (h, w))?;
        Ok(ForwardPass { pyramid, output })
    }
}
