//! Loss-landscape connectivity toolkit.
//!
//! Trains small feed-forward classifiers, aligns independently trained
//! networks under hidden-unit permutations, measures linear-interpolation
//! loss barriers, and trains star models that are linearly connected to a
//! whole population of solutions at once.

pub mod bma;
pub mod data;
pub mod error;
pub mod landscape;
pub mod nn;
pub mod permute;
pub mod starlight;

pub use data::{Dataset, Split};
pub use error::{Error, Result};
pub use nn::{Checkpoint, MlpArchitecture, ModelParams, TrainConfig};
pub use permute::PermutationSet;
