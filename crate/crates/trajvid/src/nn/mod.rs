//! Trainable modules built on candle tensors.

pub mod completion;
pub mod conv;
pub mod dfm;
pub mod dsi;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod unet;
