//! Text-independent speaker classification and verification with a
//! feed-forward neural network.
//!
//! Voiced audio becomes stacked MFCC-39 frames normalized per speaker. A sigmoid
//! network trained by conjugate gradient under a decreasing L2 schedule scores
//! them, and verification thresholds the normalized scores per speaker.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the pipeline's working precision of `f64`.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod config;
pub mod corpus;
pub mod error;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Audio = corpus::AudioBuffer<f64>;
pub type Features = features::FeatureMatrix<f64>;
pub type Stats = features::SpeakerStats<f64>;
pub type Network = nn::Model<f64>;
pub type Batch = nn::LabeledBatch<f64>;
pub type Scores = classify::LogScoreFrameMatrix<f64>;
pub type Thresholds = verify::ThresholdTable<f64>;

pub type AudioF32 = corpus::AudioBuffer<f32>;
pub type FeaturesF32 = features::FeatureMatrix<f32>;
pub type NetworkF32 = nn::Model<f32>;
