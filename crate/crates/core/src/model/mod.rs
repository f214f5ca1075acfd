//! Model assembly: configuration grid, forward pass and checkpoints.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, MAGIC};
pub use config::*;
pub use network::*;

#[cfg(test)]
mod tests;
