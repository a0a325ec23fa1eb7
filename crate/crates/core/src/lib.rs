pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod text;
pub mod mkf;
mod nn;
pub mod params;
pub mod gmu;
pub mod backbone;
pub mod scd;
pub mod losses;
pub mod datagen;
pub mod harness;
