//! Tensors, reverse-mode differentiation, layers and optimisers.

pub mod gradcheck;
pub mod graph;
pub mod dense;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, Padding, Var};
pub use layers::Ctx;
pub use params::{BufferId, Init, ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
