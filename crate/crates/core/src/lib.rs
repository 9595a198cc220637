//! Multi-channel speech separation from normalized spectro-temporal
//! correlations to complex deep filters.

pub mod corr;
mod error;
pub mod mixsim;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod signal;
pub mod wav;

pub use error::{Error, Result};
pub use srcorrnet_nn as nn;
