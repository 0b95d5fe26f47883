//! Phase definitions for planar stochastic oscillators.
//!
//! The crate discretises the backward Kolmogorov operator of a planar
//! diffusion on an annulus and computes the mean-return-time phase Θ, the
//! stochastic asymptotic phase ψ (argument of the slowest decaying complex
//! eigenfunction), the geometric term Ω that relates them, and the Doob
//! h-transform that turns Ω into drift. Every grid quantity has a Monte
//! Carlo counterpart in [`sim`] and [`empirical`] so the two backends can
//! check each other.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod deterministic;
pub mod doob;
pub mod empirical;
pub mod error;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod model;
pub mod mrt;
pub mod operator;
pub mod probe;
pub mod sim;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/stationary.md")]
    struct Stationary;
    #[doc = include_str!("../../../book/src/mrt.md")]
    struct Mrt;
    #[doc = include_str!("../../../book/src/spectral.md")]
    struct Spectral;
    #[doc = include_str!("../../../book/src/doob.md")]
    struct Doob;
    #[doc = include_str!("../../../book/src/deterministic.md")]
    struct Deterministic;
    #[doc = include_str!("../../../book/src/verification.md")]
    struct Verification;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
