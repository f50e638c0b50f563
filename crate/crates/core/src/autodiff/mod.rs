//! Small reverse-mode engine over five-axis tensors `(N, C, D, H, W)`.

mod checkpoint;
mod conv;
mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointManifest, ParamEntry, MAGIC};
pub(crate) use checkpoint::write_atomic;
pub use conv::{conv_geometry, ConvGeometry};
pub use gradcheck::{grad_check, rel_err, GradCheckConfig, GradCheckReport, Worst};
pub use ops::{cse_block, cse_hidden, sigmoid, CseOutput, IN_EPS};
pub use params::{glorot_uniform, Bound, ParamStore};
pub use tape::{Backward, Tape, Values, Var};
pub use tensor::{gemm, Real, Tensor5};
