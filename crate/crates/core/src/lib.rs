pub mod analysis;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod levels;
pub mod protocol;
pub mod readout;
pub mod seeding;

pub use error::{Error, Result};
