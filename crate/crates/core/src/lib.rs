pub mod autograd;
pub mod config;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod pipeline;
pub mod selftest;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
