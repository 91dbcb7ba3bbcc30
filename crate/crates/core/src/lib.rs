//! Gradient-flow decoding of binary LDPC codes.

pub mod bp;
pub mod channel;
pub mod code;
pub mod decoder;
pub mod error;
pub mod optim;
mod par;
pub mod potential;
pub mod score;
pub mod sim;
pub mod unfold;

pub use error::{Error, Result};
