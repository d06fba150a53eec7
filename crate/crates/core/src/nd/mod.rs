//! Dense numeric core: arrays, the differentiation tape, parameter
//! storage with Adam, checkpoint serialization, and forward-only batched
//! kernels.

mod array;
pub mod checkpoint;
pub mod dense;
mod params;
mod tape;

pub use array::NumArray;
pub use params::{glorot_uniform, ParamStore};
pub use tape::{
    recurrent_cell_step, sigmoid, softplus, BinaryKind, CellNodes, Gradients, NodeId, Tape,
    UnaryKind,
};
