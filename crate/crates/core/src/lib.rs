//! Joint masked pseudo-label and supervised training for spoken language
//! identification.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod encoder;
pub mod error;
pub mod features;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod rpq;
pub mod seeds;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
