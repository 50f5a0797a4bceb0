//! The neural refiner and its two baselines.
//!
//! Parameters live in a [`ParamStore`] under a flat dotted hierarchy:
//!
//! | name | shape |
//! |---|---|
//! | `embed.w`, `embed.b` | `[2Nt·P, d_em]`, `[d_em]` |
//! | `pos_encoding` | `[L, d_em]` |
//! | `backbone.{i}.ln1.g/b`, `backbone.{i}.ln2.g/b` | `[d_em]` |
//! | `backbone.{i}.attn.qkv.w/b` | `[d_em, 3·d_em]`, `[3·d_em]` |
//! | `backbone.{i}.attn.proj.w/b` | `[d_em, d_em]`, `[d_em]` |
//! | `backbone.{i}.mlp.fc.w/b` | `[d_em, d_ff]`, `[d_ff]` |
//! | `backbone.{i}.mlp.proj.w/b` | `[d_ff, d_em]`, `[d_em]` |
//! | `backbone.ln_f.g/b` | `[d_em]` |
//! | `small.fc1/fc2/fc3.w/b` | flattened-sequence denses |
//! | `post.token.w/b` | `[d_em, 2Nt·P]`, `[2Nt·P]` |
//! | `post.freq.w/b` | `[Nc, Nc]`, `[Nc]` |
//!
//! Dense weights are stored `[in, out]` so a layer computes `x·W + b`.

mod config;
mod refiner;
pub mod weights;

pub use config::{BackboneConfig, Variant};
pub use refiner::{is_trainable_under_freeze, positional_encoding, ForwardTrace, RefinerModel, LN_EPS};
pub use weights::{read_weight_file, write_weight_file, WEIGHT_MAGIC, WEIGHT_VERSION};
