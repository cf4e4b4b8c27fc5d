//! Streaming, context-constrained audio-visual active speaker detection.
//!
//! The engine is generic over the scalar type; `f32` aliases cover the usual
//! deployment and `f64` ones the high-precision checks.
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod cost;
pub mod encoders;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod model_io;
pub mod numerics;
pub mod reference;
pub mod scalar;
pub mod streaming;
pub mod tensor;

pub use cost::{latency_ms, memory_bytes, sweep_grid, Bound, CostConfig, CostFusion, CostRow};
pub use encoders::{
    measure_receptive_field, AudioEncoder, EmbeddingSequence, EncoderConfig, Origin, ReceptiveField, TemporalPadding,
    VisualEncoder,
};
pub use error::{AsdError, Result};
pub use frontend::{
    align_streams, aligned_frames, compute_mfcc, preprocess_faces, FaceFrameSequence, FaceStream, FrontendConfig,
    MfccExtractor, MfccSequence,
};
pub use fusion::{
    fusion_forward, gru_fusion_forward, ContextBound, ContextConfig, ContextMask, Fusion, FusionConfig, FusionKind,
};
pub use metrics::{average_precision, average_precision_exact, map_over_groups};
pub use model::{AsdModel, OfflineScores};
pub use model_io::{init_random, load_weights, save_weights, ModelConfig, ParamSet};
pub use reference::{
    bruteforce_attention, compare_streams, offline_embeddings, offline_forward, offline_fusion, synthetic_clip,
    CompareReport, ReferenceEmbeddings,
};
pub use scalar::Scalar;
pub use streaming::{open_session, stream_clip, Emission, MemoryFootprint, StageTimings, StreamSession};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
pub type Model32 = AsdModel<f32>;
pub type Model64 = AsdModel<f64>;
pub type Session32 = StreamSession<f32>;
pub type Session64 = StreamSession<f64>;
pub type Emission32 = Emission<f32>;
