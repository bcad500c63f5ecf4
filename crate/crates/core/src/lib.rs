//! Prompt tuning for a frozen vision transformer with global spatial and
//! long-term prompt coding.
//!
//! The numeric core is generic over [`Scalar`] (f32 or f64); the aliases at
//! the bottom of this file name the f64 instantiations the rest of the lab
//! uses.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod diagnostics;
pub mod error;
mod io;
pub mod prompts;
pub mod trainer;

pub use autodiff::{Graph, Scalar, Tensor, Var};
pub use backbone::{BackboneWeights, ViTConfig};
pub use data::Dataset;
pub use error::{LsptError, Result};
pub use prompts::{PromptBank, StrategyKind};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64<'a> = Graph<'a, f64>;
pub type Backbone64 = BackboneWeights<f64>;
pub type PromptBank64 = PromptBank<f64>;
pub type Dataset64 = Dataset<f64>;
pub type Graph32<'a> = Graph<'a, f32>;
pub type Backbone32 = BackboneWeights<f32>;
pub type PromptBank32 = PromptBank<f32>;
pub type Dataset32 = Dataset<f32>;
