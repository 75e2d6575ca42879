//! Selective linearization of ReLU networks under a global ReLU budget.
//!
//! The crate trains relaxed per-site gate parameters jointly with the
//! weights under an L1 homotopy schedule, binarizes and freezes the gates
//! once the budget is met, and finetunes with knowledge distillation. It
//! also provides the closed-form memorization-capacity bounds with a
//! brute-force linear-piece-counting oracle, and a garbled-circuit latency
//! model that turns ReLU counts into online private-inference estimates.

pub mod capacity;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod latency;
pub mod network;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, SnlError};
pub use network::{build_network, ArchSpec, GatedNetwork, GateVector, Granularity, LayerSpec};
pub use tape::{GateMode, Tape};
pub use tensor::Tensor;
pub use train::{snl_run, SnlConfig};
