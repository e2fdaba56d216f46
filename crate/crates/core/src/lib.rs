//! Object-centric video prediction with an embedded differentiable
//! gravity engine.

pub mod engine;
pub mod evaluation;
pub mod experiments;
pub mod error;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rollout;
pub mod savi;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
