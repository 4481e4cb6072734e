//! Dense NCHW tensors with reverse-mode automatic differentiation, limited to
//! the operations the counting networks use.

mod kernels;
pub mod param;
pub mod tape;
pub mod tensor;

pub use param::{orthogonal_init, sgd_momentum_step, ParamId, ParamTensor, SgdConfig, UpdateRule};
pub use tape::{Tape, Var};
pub use tensor::{Dims, Tensor4, TENSOR_MAGIC};
