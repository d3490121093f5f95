//! File formats, image output, reports and the command-line driver for
//! [`unictrl_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod video_io;

pub use error::{Error, Result};
