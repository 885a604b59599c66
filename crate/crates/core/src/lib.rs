pub mod classifier;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Checkpoint, ParamGroup, ParamId, ParamStore};
pub use tape::{ElementwiseOp, ReduceOp, Tape, Var};
pub use tensor::Tensor;
