//! Dense f64 tensors with a reverse-mode tape.
//!
//! Values are plain [`Tensor`]s. Computations are recorded on a [`Tape`] as
//! [`Var`] handles; [`Tape::backward`] walks the record once in reverse and
//! returns per-node gradients. Trainable parameters live in a [`ParamStore`]
//! and are bound onto a tape through a [`Session`].

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{
    finite_diff_check, finite_diff_check_params, GradCheckConfig, GradCheckReport,
};
pub use params::{uniform_init, ParamId, ParamStore, Session};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
