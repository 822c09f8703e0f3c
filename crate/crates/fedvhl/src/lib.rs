pub mod analysis;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod nn;
pub mod objective;
pub mod runner;
pub mod seeding;
pub mod virtual_data;

pub use error::{Error, Result};
