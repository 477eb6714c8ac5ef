//! Hybrid quantum-classical neural network benchmark.
//!
//! A dense statevector simulator with parameter-shift gradients, the
//! encoder and layer templates studied in the benchmark, a softmax output
//! head, a deterministic training loop and a resumable hyperparameter sweep.

pub mod circuit;
pub mod data;
pub mod error;
pub mod grad;
pub mod head;
pub mod model;
pub mod rng;
pub mod selftest;
pub mod sim;
pub mod sweep;

pub use circuit::{CircuitSpec, GateInstance, GateKind, Slot, TemplateKind};
pub use error::{Error, IdxError, Result};
pub use model::{HqnnConfig, HqnnModel, ShotSetting, TrainReport};
pub use sim::{Pauli, ShotMode, StateVector};
