pub mod cryptor;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod image;
pub mod io;
pub mod losses;
pub mod numgrad;
pub mod params;
pub mod shield;
pub mod trainer;

pub use error::{Error, Result};
