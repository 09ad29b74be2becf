//! Minimal differentiable computation core: dense `f64` tensors, a
//! reverse-mode tape, the layers needed by the diffusion denoiser, Adam and
//! parameter EMA.

pub mod check;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs a different element count than {len}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("{heads} heads do not divide {dim} channels")]
    HeadsDoNotDivide { dim: usize, heads: usize },
    #[error("parameter {0:?} registered twice")]
    DuplicateParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
