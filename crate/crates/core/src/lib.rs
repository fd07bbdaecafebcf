//! Task-adaptive visual state representations from a frozen conditional
//! denoiser, with the behavior-cloning harness and a desk-scale toy stack.
//!
//! The numeric core is generic over [`orca_tape::Scalar`]; the `*32` / `*64`
//! aliases at the bottom name the usual instantiations.

pub mod archive;
pub mod attnlab;
pub mod backbone;
pub mod compression;
pub mod conditioner;
pub mod config;
pub mod envkit;
pub mod evalkit;
mod error;
pub mod frame;
pub mod nn;
pub mod pipeline;
pub mod policy;

pub use error::{Error, Result};
pub use frame::Frame;
pub use orca_tape::{Scalar, Tensor};

pub type ToyUNet32 = backbone::ToyUNet<f32>;
pub type ToyUNet64 = backbone::ToyUNet<f64>;
pub type Conditioner32 = conditioner::Conditioner<f32>;
pub type Conditioner64 = conditioner::Conditioner<f64>;
pub type PromptBank32 = conditioner::PromptBank<f32>;
pub type PromptBank64 = conditioner::PromptBank<f64>;
pub type Compression32 = compression::Compression<f32>;
pub type Compression64 = compression::Compression<f64>;
pub type Pipeline32 = pipeline::Pipeline<f32>;
pub type Pipeline64 = pipeline::Pipeline<f64>;
pub type Agent32 = policy::Agent<f32>;
pub type Agent64 = policy::Agent<f64>;
pub type TrainState32 = policy::TrainState<f32>;
pub type TrainState64 = policy::TrainState<f64>;
