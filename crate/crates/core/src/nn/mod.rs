//! Numeric substrate: tensors, tape autograd, layers, optimizers.

mod gradcheck;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    gradient_check, gradient_check_with_reference, GradCheckOptions, GradCheckReport, ParamCheck,
};
pub use layers::{apply_buffer_updates, BatchNorm2d, Conv2d, Linear, Mode};
pub use optim::{Method, Optimizer};
pub(crate) use params::ByteReader;
pub use params::{ModelParams, ParamId};
pub use tape::{BufferUpdate, Tape, Var, BN_EPS};
pub use tensor::Tensor;
