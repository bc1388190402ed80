//! Small vision transformer with register tokens, a DINO-style
//! projection head, exact hand-rolled backprop, finite-difference
//! verification and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Sidecar};
pub use gradcheck::{grad_check, grad_check_backbone, GradCheckReport, FD_STEP};
pub use model::{backward, backward_vit, forward, head_backward, head_forward, HeadTape, Tape};
pub use params::{BlockParams, HeadParams, Params, ViTConfig};
pub use tensor::{Precision, Tensor};
