pub mod audio_branch;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod index;
mod io;
pub mod nd;
pub mod synth;
pub mod train;
pub mod transfer;
pub mod user_branch;

pub use error::{Error, Result};
