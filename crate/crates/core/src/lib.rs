//! Distributed speech enhancement over asynchronous ad-hoc microphone arrays.

pub mod asynchrony;
pub mod attention;
pub mod error;
pub mod metrics;
pub mod mwf;
pub mod runner;
pub mod scene;
pub mod signal;
pub mod tango;

pub use error::{Error, Result};
