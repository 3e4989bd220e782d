//! File formats, checkpoints, reports and the `dae` command-line tool built
//! on [`dae_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod io;
pub mod report;

pub use dae_core;
pub use error::{Error, Result};
