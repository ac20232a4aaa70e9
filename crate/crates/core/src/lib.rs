pub mod autograd;
pub mod container;
pub mod conv;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod stereo_data;
pub mod stylizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
