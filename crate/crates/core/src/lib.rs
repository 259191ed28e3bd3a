//! Crowd density regression with a dilated VGG feature extractor and
//! parallel spatial-wise / channel-wise self-attention branches.
//!
//! The crate covers the whole pipeline: ground-truth density generation from
//! head annotations ([`data`]), the network ([`backbone`], [`attention`],
//! [`model`]) with hand-written backward passes, Adam training and the
//! ablation driver ([`training`]), and counting / density-quality metrics
//! plus attention visualization ([`evaluation`]).
//!
//! Batch-level work (per-image gradients, per-image evaluation, conv tiles)
//! runs on rayon when the default `parallel` feature is enabled; results are
//! reduced in input order either way, so outputs do not depend on it.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod par;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod weights;

pub use attention::{
    cam_forward, channel_attention_matrix, fuse, sam_forward, spatial_attention_matrix, ChannelAttention,
    ChannelAttentionMatrix, Fusion, SpatialAttention, SpatialAttentionMatrix,
};
pub use backbone::{build_backbone, build_dilation_module, extract_features, ExtractorConfig, FeatureExtractor, Normalization};
pub use data::{generate_density_map, load_annotations, resize_scene, synth_scene, AnnotatedScene, DatasetSplit, Point};
pub use error::{Error, Result};
pub use evaluation::{evaluate, export_attention_maps, mae, mse_count, psnr, ssim, MetricsReport};
pub use grid::{DensityMap, Grid};
pub use layers::Init;
pub use model::{
    build_model, load_checkpoint, load_checkpoint_as, predict_density, save_checkpoint, ModelConfig, ModelVariant,
    PredictionResult, Variant,
};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Tensor};
pub use training::{lr_at, mse_loss, run_ablation, train, AblationTable, TrainConfig, TrainLog};

