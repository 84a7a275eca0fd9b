pub mod compose;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod seed;
pub mod selftest;
pub mod synthdata;
pub mod trainer;

pub use error::{AttrError, Result};
