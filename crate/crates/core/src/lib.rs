pub mod autodiff;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fsd;
pub mod geometry;
pub mod losses;
pub mod memory_bank;
pub mod mvaa;
pub mod nn;
pub mod pillars;
pub mod scene_sim;
pub mod trainer;

pub use error::{Error, Result};
