//! Open-set classification toolkit.

pub mod error;
pub mod evt;
pub mod harness;
pub mod metrics;
pub mod modelio;
pub mod numerics;
pub mod postproc;
pub mod protocol;
pub mod sample;
pub mod training;

pub use error::{Error, Result};
pub use sample::{Category, LabeledSample, Split};
