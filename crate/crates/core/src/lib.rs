//! Modality attention network: tape autodiff, bidirectional LSTM encoders,
//! attention fusion over modality embeddings, training pipelines and the
//! experiment harness behind the `man` binary.
//!
//! Numeric code is generic over [`scalar::Scalar`]. Training, data files and
//! checkpoints use `f64`; the aliases below name the common instantiations.

pub mod checkpoint;
pub mod data;
pub mod datagen;
pub mod dataio;
pub mod fusion;
pub mod harness;
pub mod layers;
pub mod scalar;
pub mod tensor;
pub mod training;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type SubNetwork = layers::SubNetwork<f64>;
pub type AttentionBlock = fusion::AttentionBlock<f64>;
pub type ManModel = fusion::ManModel<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
pub type SubNetwork32 = layers::SubNetwork<f32>;
pub type AttentionBlock32 = fusion::AttentionBlock<f32>;
pub type ManModel32 = fusion::ManModel<f32>;
