//! Audio-visual speech-to-unit translation at desk scale.

pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod training;
pub mod units;
pub mod util;

pub use error::{Error, Result};
