//! File formats: raw tensors, checkpoints and frame sequences.

mod checkpoint;
mod frames;
mod tten;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use frames::{frame_paths, load_frames, save_frames};
pub use tten::{decode_tensor, decode_tensor_as, encode_tensor, read_tensor, write_tensor};
