pub mod data;
pub mod error;
pub mod eval;
pub mod matrix_param;
pub mod par;
pub mod rng;
pub mod score;
pub mod sde;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
