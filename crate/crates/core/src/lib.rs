//! Propensity-weighted training of sequential recommenders with propensities estimated from both the user and the item side.

pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod interactions;
pub mod numeric;
pub mod parallel;
pub mod pipeline;
pub mod propensity;
pub mod recommender;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
