//! Merging two trained networks into one of the same size.
//!
//! Two teachers of identical architecture are concatenated layerwise into a
//! double-width big student that initially predicts their average. Hard-concrete
//! gates then learn which half of every gated layer to keep, the big student is
//! compressed back to the teacher architecture, and the result is fine-tuned.

pub mod arch;
pub mod compression;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gates;
pub mod gradcheck;
pub mod layers;
pub mod merging;
mod linalg;
pub mod network;
pub mod optim;
pub mod stats;
pub mod strategies;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{NormMode, Tape, Var};
pub use tensor::Tensor;
pub use layers::{Activation, GateId, Layer};
pub use network::{Block, GateMode, Mode, Network, Trainable};
