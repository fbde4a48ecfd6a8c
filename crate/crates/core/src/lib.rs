//! Continual text-to-video retrieval on a frozen two-tower backbone.

pub mod error;
pub mod numerics;
pub mod checkpoint;
pub mod ffa;
pub mod tame;
pub mod losses;
pub mod backbone;
pub mod taskgen;
pub mod featuredb;
pub mod eval;
pub mod model;
pub mod harness;
pub mod cli;

pub use error::{Error, Result};
