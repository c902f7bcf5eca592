//! Simulation and histogram-based parameter estimation for a NAND flash read
//! channel with wear-out and retention degradation.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod binning;
pub mod channel_model;
pub mod emg;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod parallel;
pub mod special;

pub use channel_model::{ChannelConfig, ChannelModel, ChannelParams, LevelLayout, LevelNoise, Read};
pub use error::{Error, Result};
pub use parallel::Execution;
