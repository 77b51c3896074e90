//! Joint permeability/saturation reconstruction from sparse well logs with
//! a score-based prior, observation guidance and Darcy-residual guidance.

pub mod darcy;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod fgrd;
pub mod fields;
pub mod metrics;
pub mod model;
pub mod pde;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
