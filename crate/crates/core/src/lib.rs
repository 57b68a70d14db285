//! Calibration-driven low-rank compression of Transformer encoders.
//!
//! Activations at every linear layer are recorded on calibration clips, their principal
//! components pick a per-layer rank, and each layer is rewritten as a down/up product with a
//! folded bias. Attention then runs in the reduced dimensions, and a MAC model reports savings.

pub mod calib;
pub mod compress;
pub mod encoder;
pub mod error;
pub mod fastattn;
pub mod flops;
pub mod linalg;
pub mod modelio;
pub mod scalar;

pub use calib::{collect_stats, stats_from_archive, stats_to_archive, ActivationStats};
pub use compress::{
    compress_encoder, efficiency_cap, factorize_layer, forward_compressed, select_rank, CompressedBlock,
    CompressedEncoder, FactorizedLinear, Preset, Projection, RankDecision, RankPolicy, RankSelection,
    DEFAULT_GRANULARITY,
};
pub use encoder::{forward, forward_with_taps, synth_weights, EncoderSpec, EncoderWeights, Linear, Site, TapPoint};
pub use error::{Error, Result};
pub use fastattn::{attention_block, AttnPath, FactorizedAttnParams, ScorePath, ValuePath};
pub use flops::{report, verify_certificates, FlopsReport};
pub use linalg::{sym_eig, EigenDecomposition, Matrix};
pub use modelio::{synth_calib, CalibGenerator, CalibSet, DType, ParseError, TensorArchive};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type EncoderWeights64 = EncoderWeights<f64>;
pub type EncoderWeights32 = EncoderWeights<f32>;
pub type ActivationStats64 = ActivationStats<f64>;
pub type CalibSet64 = CalibSet<f64>;
pub type CompressedEncoder64 = CompressedEncoder<f64>;
pub type CompressedEncoder32 = CompressedEncoder<f32>;
