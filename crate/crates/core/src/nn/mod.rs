//! Minimal tensor / reverse-mode autodiff engine with the layers needed by the
//! radiance field and the fusion network, plus Adam and checkpointing.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use layers::{Conv2d, Dense};
pub use params::{AdamConfig, Bound, Init, ParamId, Parameter, ParameterStore};
pub use tensor::Tensor;
