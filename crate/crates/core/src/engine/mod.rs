//! Dense 5-D tensors, a reverse-mode tape, and the optimizer.

pub mod conv;
pub mod init;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use conv::conv3d_forward;
pub use optim::{adam_step, lr_schedule, AdamState, ScheduleCfg};
pub use param::{Param, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Shape5, Tensor5};
