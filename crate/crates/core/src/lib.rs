//! Finite-blocklength achievable rates for a two-state block-fading binary
//! symmetric channel whose state becomes known to the transmitter one block
//! late.

pub mod bounds;
pub mod channel;
pub mod cli;
pub mod dist;
pub mod error;
pub mod schemes;
pub mod simulate;

pub use error::{Error, Result};
