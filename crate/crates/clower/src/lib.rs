//! File formats, checkpoints and command-line pipelines around
//! [`clower_core`].

pub mod checkpoint;
pub mod cli;
pub mod examples_file;
pub mod metrics;
pub mod settings;
pub mod vocab_file;

pub use clower_core as core;
