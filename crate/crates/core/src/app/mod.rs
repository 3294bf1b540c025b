//! Checkpoints, the mask wire format, the HTTP service and the command line.

pub mod checkpoint;
pub mod cli;
pub mod rle;
pub mod service;

pub use checkpoint::{checkpoint_hash, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, TensorEntry};
pub use rle::Rle;
