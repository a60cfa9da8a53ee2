//! The toy denoiser: layers, forward pass with quantization hooks, analytic
//! backward pass, training and per-slot MAC counts.

mod layers;
mod net;
mod train;

pub use layers::{count_macs, silu, slot_macs, timestep_embedding, LayerKind, LayerSpec, Linear, SlotKind};
pub use net::{Block, BlockCache, DenoiserNet, Gradients, NetConfig, QuantKey, SlotInfo, Tape};
pub use train::{noise_mse, train_step, Adam, Checkpoint, TrainingBatch};
