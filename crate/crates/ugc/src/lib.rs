//! Training, search and evaluation runtime for compressed image-to-image generators.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod report;
pub mod pipeline;
pub mod search;
pub mod stage1;
pub mod stage2;
pub mod tensor;

pub use error::{Result, UgcError};
