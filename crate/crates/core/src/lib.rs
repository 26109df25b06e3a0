//! Artificial Kuramoto oscillatory neurons.
//!
//! Units are `N`-dimensional unit vectors that rotate under a natural
//! frequency and align with a conditional stimulus and with each other
//! through a learned coupling. Stacked layers of these units, a norm-based
//! readout and a small classification head make up the trainable network.

pub mod checkpoint;
pub mod connectivity;
pub mod dynamics;
pub mod error;
pub mod lyapunov;
pub mod network;
pub mod readout;
pub mod sudoku;
pub mod train;
pub mod uptile;
pub mod tensor;
pub mod wave;

pub use error::{Error, Result};
