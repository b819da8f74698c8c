pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod models;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod training;
pub use autodiff::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = layers::ParamStore<f32>;
pub type ParamStore64 = layers::ParamStore<f64>;
pub type Model32 = models::Model<f32>;
pub type Model64 = models::Model<f64>;
pub type Adam32 = training::Adam<f32>;
pub type Adam64 = training::Adam<f64>;
