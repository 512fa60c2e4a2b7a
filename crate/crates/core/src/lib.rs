//! Incremental inference for vector-quantized transformers.
//!
//! A document revision is processed against a cached previous revision with
//! work proportional to the edit, and every result can be checked against
//! a dense from-scratch forward pass of the same network.

pub mod attention;
pub mod bench;
pub mod compressed;
pub mod config;
pub mod error;
pub mod flops;
pub mod engine;
pub mod model;
pub mod nn;
pub mod positions;
pub mod scalar;
pub mod verify;
pub mod workload;

pub use config::{Baseline, EngineOptions, ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use flops::{Category, FlopCounter, FlopTally, SpeedupReport};
pub use model::{dense_forward, gelu_attention, vq_quantize, ModelParams, VqCodebook, PAD_TOKEN};
pub use scalar::{Precision, Scalar};
