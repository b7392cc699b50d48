//! Backpropagation-free salient object detection.
//!
//! Encoder filters are estimated directly from user-drawn disk markers, either
//! by clustering marker patches per marker (`cluster` mode) or from a bag of
//! feature points (`bofp` mode). An adaptive decoder turns each block's
//! activations into a saliency map, which dynamic-trees delineation refines.

pub mod clustering;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod markers;
pub mod metrics;
pub mod pipeline;
pub mod postproc;
pub mod tensor;

pub use decoder::{decode, decode_progressive, DecoderConfig, SaliencyMap, Upsample};
pub use encoder::{
    forward_encoder, train_encoder, BlockSpec, EncoderModel, EncoderMode, KernelBank, TrainedEncoder,
    TrainingImage, TrainingReport,
};
pub use error::{Error, Result};
pub use markers::{Label, Marker, MarkerSet};
pub use metrics::{f_beta, mae, weighted_f, EvalReport};
pub use pipeline::{run_end_to_end, PipelineConfig};
pub use postproc::{dynamic_trees, refine, BinaryMask, RefineParams, SeedSet};
pub use tensor::{ChannelStats, FeatureMap, PoolKind};
