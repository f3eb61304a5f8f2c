//! Fixed-point 8-bit neural-network quantization.
//!
//! * [`fixnum`]: Q-format numbers, `fix_quant`, integer multiply/rescale.
//! * [`stats`]: Gaussian representability sweeps and fractional-length choice.
//! * [`pact`]: clipping-level quantizer and the fix scaling factor.
//! * [`graph`]: Conv/Linear-BN models, effective-weight fusion, clipping-level
//!   sharing between sibling layers, fractional-length grid search.
//! * [`engine`]: integer-only compiled programs and their executor.
//! * [`train`]: quantization-aware training, float baselines, fine-tuning.
//!
//! The numeric kernels are generic over [`Scalar`]; the aliases below pin the
//! common instantiations. Models, training and the reference simulation run
//! in `f64` ([`Real`]).

pub mod data;
pub mod engine;
pub mod fixnum;
pub mod graph;
pub mod io;
pub mod pact;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod train;

pub use fixnum::{FixError, FixFormat, FixScalar, FixTensor, Signedness};
pub use scalar::Scalar;

/// Scalar used by models, training and the real-domain reference.
pub type Real = f64;

pub type ClipParam = pact::ClipParam<Real>;
pub type ClipParam32 = pact::ClipParam<f32>;
pub type SteGrad = pact::SteGrad<Real>;
