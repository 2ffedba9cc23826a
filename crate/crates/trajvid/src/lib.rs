//! Trajectory-conditioned image-to-video generation: models, training,
//! data pipeline, evaluation, command line and HTTP service.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod providers;
pub mod service;
pub mod train;

pub use error::{Error, Result};
pub use trajvid_core as core;
