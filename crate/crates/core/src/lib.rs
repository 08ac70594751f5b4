//! Depth-scaling analysis for learning rates: effective depth of multi-path
//! networks, one-step update energies, the maximal-update learning rate, its
//! depth transfer rule, empirical sweeps and numerical checks of the
//! underlying identities.

pub mod ammup;
pub mod arch;
pub mod error;
pub mod graphdepth;
pub mod nncore;
pub mod oracles;
pub mod rng;
pub mod scalar;
pub mod sensitivity;
pub mod sweep;
pub mod tensor;

pub use arch::ArchSpec;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model64 = nncore::Model<f64>;
pub type Model32 = nncore::Model<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Rational = num_rational::BigRational;
