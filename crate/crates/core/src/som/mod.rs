//! Self-organizing maps on square lattices with optional periodic boundaries.

mod checkpoint;
mod grid;
mod train;

pub use checkpoint::{decode_som, encode_som, load_som, save_som};
pub use grid::{init_grid, BmuAssignment, SomGrid, Topology};
pub use train::{moving_average, train, update_step, Decay, LossTrace, Schedule, TrainConfig};
