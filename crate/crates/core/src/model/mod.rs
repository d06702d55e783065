//! Backbone, the two-branch model, its objective, Grad-CAM and training.

mod backbone;
mod cam;
mod part_model;
mod train;

pub use backbone::{
    backbone_forward, im2col_map, stride2_extent, BackboneConfig, BackboneOutput, BackboneParams, ConvStage,
    Projection,
};
pub use cam::{grad_cam, grad_cam_map, grad_cam_with, Heatmap};
pub use part_model::{argmax, ModelConfig, PartModel, SampleLoss};
pub use train::{batch_gradients, evaluate, train, EpochMetrics, TrainConfig};
