//! Desk-scale convolutional classifier with hand-written backpropagation and
//! a procedural image dataset to train it on.

mod checkpoint;
mod data;
mod net;
mod train;

pub use checkpoint::{decode_refnet, encode_refnet, load_refnet, save_refnet};
pub use data::{ShapeDataset, ShapeDatasetConfig, CLASS_NAMES};
pub use net::{ForwardOutput, LossSpec, ProbeLayer, RefNet, RefNetConfig};
pub use train::{accuracy, train_refnet, RefNetTrainConfig, TrainReport};
