//! Event-driven sparse neural inference engine.
//!
//! Replays event-camera streams through sparse neural networks (ReLU,
//! SigmaDelta, binary/graded LIF, diagonal state-space neurons) with exact
//! synaptic-operation accounting, hardware-timestep scheduling and power
//! estimation, a surrogate-gradient trainer, and a synthetic labeled
//! event-stream generator.

pub mod bench;
pub mod error;
pub mod events;
pub mod layers;
pub mod models;
pub mod neurons;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
