//! Multi-input LSTM cells with manual backpropagation through time.
//!
//! Three cell kinds share one parameter layout: the conventional peephole
//! LSTM, the gate-level fusion cell (per-stream gates summed before a shared
//! state update) and the state-level fusion cell (per-stream state updates
//! summed afterwards). Around them sit bi-directional encoders, scalar
//! attention pooling, a softmax head, RMSprop training, and a synthetic
//! two-stream benchmark where the class lives only in the phase offset
//! between the streams.

pub mod cells;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod numerics;
pub mod params;
pub mod textfmt;
pub mod training;

pub use cells::{CellKind, CellParams, CellState};
pub use data::{FusionStrategy, SamplePair, TaskConfig};
pub use error::{Error, Result};
pub use network::{Model, ModelConfig};
pub use params::Parameters;
pub use training::{TrainConfig, RmspropState};
