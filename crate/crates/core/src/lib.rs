//! Multi-task affect recognition head over frozen backbone features: action
//! units, expression class and valence/arousal.

pub mod cli;
pub mod data;
pub mod error;
mod io_util;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensorcore;
pub mod training;

pub use error::{Error, Result};
