//! Pairwise neural ranking trained by mimic learning, with a privacy-preserving
//! variant that distills from a Laplace-noised teacher ensemble.

pub mod codec;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pate;
pub mod pipeline;
pub mod scoring;
pub mod seeding;
pub mod synth;

pub use error::{Error, Result};
