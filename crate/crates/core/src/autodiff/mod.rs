//! Dense reverse-mode automatic differentiation in `f64`.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{OpCounters, Tape, Var};
pub use tensor::Tensor;
