//! Single-image dehazing with a physics-aware dual-branch unit and
//! curricular contrastive regularization over consensual negatives.

pub mod autodiff;
pub mod cli;
pub mod contrastive;
pub mod conv;
pub mod curriculum;
pub mod datasets;
pub mod error;
pub mod hazephysics;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
