//! Instrument moment matrices for temporal quantum correlations.

pub mod algebra;
pub mod apps;
pub mod cli;
pub mod error;
pub mod moment;
pub mod realizations;
pub mod sdp;

pub use error::{Error, Result};
