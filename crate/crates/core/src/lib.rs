//! Learning iterative extrapolation models from Markov chains over token
//! sequences.
//!
//! A Metropolis-Hastings sampler explores sequences under a product-of-experts
//! energy; chains are reduced to short improving episodes; an extrapolator is
//! trained on the episodes and applied iteratively. The guide in `book/`
//! walks through each stage.

pub mod binner;
pub mod config;
pub mod encoding;
pub mod energy;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod records;
pub mod rng;
pub mod sampler;
pub mod vocab;

// The guide's snippets run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/energies.md")]
    mod energies {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    mod episodes {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
