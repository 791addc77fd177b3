//! Cluster-regularized filter pruning for small convolutional networks.
//!
//! Training adds a cluster loss that drives fixed pairs of filters in each
//! layer towards each other. Once a pair is (nearly) equal one of its
//! filters can be removed and its outgoing weights folded into the
//! survivor's, which leaves the network function (nearly) unchanged.
//!
//! The pipeline is `train` with cluster loss, [`prune::prune_and_merge`], then
//! `finetune`. Baseline filter selections (weight sum, APoZ, random) and a
//! train-from-scratch comparison live alongside it.

pub mod cluster;
pub mod data;
pub mod experiment;
pub mod graph;
pub mod models;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod train;

pub use graph::{GraphBuilder, ModelGraph};
pub use rng::Rng;
pub use tensor::Tensor;
