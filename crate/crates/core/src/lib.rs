//! Automatic sample identification: a graph-neural-network fingerprint
//! encoder, a cross-attention match classifier and a two-stage retrieval
//! pipeline (IVF-PQ candidate search followed by classifier re-ranking).

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// numeric kernels read better with explicit indices
#![allow(clippy::needless_range_loop)]

pub mod audio;
pub mod classifier;
pub mod config;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod index;
pub mod model;
pub mod pairgen;
pub mod retrieval;
pub mod selftest;
pub mod synth;
pub mod tape;
pub mod toy;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
