//! A learning-to-rank toolkit built around a listwise Transformer ranker
//! that jointly optimizes a listwise Softmax ranking loss and a listwide
//! ordinal quality loss, together with an implicit-feedback simulator, an
//! MLP baseline and an NDCG evaluation harness.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`)
//! through the [`Scalar`] trait; concrete aliases for the main types live
//! at the crate root.

pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod simulator;
pub mod synth;
pub mod tape;
pub mod training;

use std::fmt;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

pub use error::{Error, Result};

/// Floating-point scalar the numerical core is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Shortest decimal representation that parses back to the same bits.
    fn to_exact_string(self) -> String;
    /// Inverse of [`Scalar::to_exact_string`].
    fn from_exact_str(s: &str) -> Option<Self>;
}

impl Scalar for f32 {
    fn to_exact_string(self) -> String {
        format!("{self:?}")
    }
    fn from_exact_str(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

impl Scalar for f64 {
    fn to_exact_string(self) -> String {
        format!("{self:?}")
    }
    fn from_exact_str(s: &str) -> Option<Self> {
        s.parse().ok()
    }
}

pub type DatasetF32 = dataset::Dataset<f32>;
pub type DatasetF64 = dataset::Dataset<f64>;
pub type FeatureTransformF32 = dataset::FeatureTransform<f32>;
pub type FeatureTransformF64 = dataset::FeatureTransform<f64>;
pub type BatchF32 = dataset::Batch<f32>;
pub type BatchF64 = dataset::Batch<f64>;
pub type TapeF32 = tape::Tape<f32>;
pub type TapeF64 = tape::Tape<f64>;
pub type RankFormerParamsF32 = model::RankFormerParams<f32>;
pub type RankFormerParamsF64 = model::RankFormerParams<f64>;
pub type MlpParamsF32 = model::MlpParams<f32>;
pub type MlpParamsF64 = model::MlpParams<f64>;
