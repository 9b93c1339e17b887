//! Invertible linear flows from implicit operator exponentials.
//!
//! The core primitive is the exponential of a dimensionality-preserving
//! linear operator (a 2-d convolution or a linear graph convolution),
//! evaluated implicitly through repeated operator applications so the
//! equivalent matrix is never materialized. On top of it sit generalized
//! Sylvester flow layers, a small flow runtime (actnorm, 1×1 mixing,
//! coupling layers, exact log-likelihood), a tape-based reverse-mode
//! differentiator, and synthetic graph datasets with Monte-Carlo entropy
//! oracles used as training targets.
//!
//! Everything implicit is verifiable against brute-force dense references
//! in [`dense`]: equivalent matrices are materialized by basis probing,
//! exponentials by scaling-and-squaring, determinants by LU. The `verify`
//! subcommand of the CLI (and the `acceptance` test suite) run these
//! cross-checks end to end.
//!
//! See the crate examples for runnable entry points into each capability.

pub mod autodiff;
pub mod commands;
pub mod convops;
pub mod datasets;
pub mod dense;
pub mod error;
pub mod expseries;
pub mod flows;
pub mod gemm;
pub mod linop;
pub mod model_io;
pub mod rng;
pub mod sylvester;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
