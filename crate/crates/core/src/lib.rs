//! Compressive CSI feedback for massive MIMO with a transformer refiner.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`channel_sim`] draws downlink channel matrices from a geometric
//!    multipath model organized in scenario areas.
//! 2. [`codec`] compresses each channel with a random projection at the UE
//!    and recovers a coarse estimate with the pseudo-inverse at the BS.
//! 3. [`transforms`] turns the coarse estimate into a token sequence
//!    (angular DFT, normalization, per-subcarrier sequencing, patching).
//! 4. [`models`] refines the tokens with a frozen-backbone transformer (or
//!    one of the baselines) and maps them back to a channel matrix.
//!
//! [`metrics`] scores reconstructions and [`harness`] drives the
//! experiments. Everything numeric sits on the small reverse-mode autodiff
//! engine in [`tensor_core`].

pub mod channel_sim;
pub mod codec;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod tensor_core;
pub mod transforms;

pub use channel_sim::{ChannelMatrix, DatasetFile, ScenarioArea, SystemDims};
pub use codec::{Codeword, ProjectionCodec};
pub use error::{Error, Result};
pub use metrics::MetricValue;
pub use models::{BackboneConfig, RefinerModel, Variant};
pub use tensor_core::{AdamState, NodeId, ParamStore, Tape, Tensor};
pub use transforms::{NormStats, TokenInput};
