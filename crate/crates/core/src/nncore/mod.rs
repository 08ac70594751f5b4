//! Dense tensor network core: activations, initializers, layers and models.

pub mod activation;
pub mod conv;
pub mod init;
pub mod layernorm;
pub mod model;
pub mod tape;

pub use activation::{gating_factor, Activation, Estimate};
pub use conv::ConvGeom;
pub use init::{init_fan_in, init_gaussian, init_residual};
pub use layernorm::{layernorm_forward, layernorm_jacobian, spectral_norm};
pub use model::{build_model, forward, ActivationTrace, Forward, Model, Param, ParamKey, Role};
pub use tape::{Grads, Tape, Var};
