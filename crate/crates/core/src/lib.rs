//! Numerical core for studying ideal-versus-effective representation updates.
//!
//! A gradient step on a layer's parameters moves that layer's output by an
//! "effective" amount that generally differs from the ideal step `-η g` the
//! backward pass asked for. This crate implements the corrected layer forms
//! whose effective and ideal updates agree, the measurement harness that
//! checks the closed-form predictions numerically, and the small training
//! stack used for desk-scale classification experiments.

pub mod conv;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod network;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Reduction, Tensor};
