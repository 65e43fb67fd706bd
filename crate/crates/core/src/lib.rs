//! Skeleton-based action segmentation with multi-stage spatial-temporal graph
//! convolutional networks, built on a small reverse-mode tensor core.
//!
//! The crate provides the five segmentation architectures (Bi-LSTM, TCN,
//! ST-GCN, MS-TCN, MS-GCN), their training objective, segmental F1 and
//! sample-accuracy metrics, skeleton-sequence I/O with a synthetic generator,
//! and the training / evaluation / ablation loops driven by the `msgcn` CLI.

pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod plot;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
