//! Scalar-generic tensors with a small reverse-mode autodiff tape.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two concrete instantiations.

mod graph;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use graph::{pool_window, Gradients, Graph, Var};
pub use optim::Adam;
pub use param::{checksum, Module, Param, ParamKey};
pub use scalar::{gemm, MatView, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32<'a> = Graph<'a, f32>;
pub type Graph64<'a> = Graph<'a, f64>;
