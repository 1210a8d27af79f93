//! Multi-view slice transformer for 3D volumes.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod multiview;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod ssl;
pub mod train;
pub mod transformer;
pub mod volume;

pub use error::{Error, Result};
