//! Layer kernels with explicit backward passes, the optimizer and the
//! finite-difference gradient checker.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod optim;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batchnorm, batchnorm_backward, batchnorm_forward, BatchNormParams, BnCache};
pub use conv::{conv2d, conv2d_backward, ConvParams};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use linear::{linear, linear_backward, LinearParams};
pub use loss::{softmax, softmax_cross_entropy};
pub use optim::{OptState, SgdConfig};
pub use pool::{global_average_pool, global_average_pool_backward};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
