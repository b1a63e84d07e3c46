//! Joint hand-trajectory and interaction-hotspot anticipation with a
//! bidirectional progressive transformer, trained on synthetic egocentric
//! interaction sequences.

pub mod autodiff;
pub mod checkpoint;
pub mod cvae;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{BotError, Result};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;
