//! Speaker-invariant speech emotion embeddings learned with a
//! max-entropy speaker adversary.

pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
