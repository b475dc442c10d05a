//! Weighted, perturbative variational auto-encoder on a two-level Laplacian
//! pyramid, with Laplace latent densities and a companion weight classifier.

pub mod dataio;
pub mod error;
pub mod generator;
pub mod gradcore;
pub mod laplace;
pub mod loss;
pub mod model;
pub mod pyramid;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pyramid.md")]
    mod pyramid {}
    #[doc = include_str!("../../../book/src/latents.md")]
    mod latents {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/drifts.md")]
    mod drifts {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
