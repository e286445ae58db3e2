//! Joint video-and-comment modeling on a desk-scale budget.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode
//! differentiation, the recurrent encoders and gated-fusion decoder built
//! on top of it, a deterministic synthetic corpus for end-to-end checks,
//! a training loop, and the usual text-generation metrics. Everything is
//! pure Rust, single-threaded at the numeric core, and deterministic for
//! a fixed seed on any platform.

pub mod adam;
pub mod corpus;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::ParamSet;
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

// The guide's chapters double as doc-tests, so every code block in the
// book compiles and runs against the current API on `cargo test`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tape.md")]
    mod tape {}
    #[doc = include_str!("../../../book/src/randomness.md")]
    mod randomness {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/encoders.md")]
    mod encoders {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
