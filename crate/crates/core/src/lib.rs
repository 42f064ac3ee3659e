//! Massive correctors of random monotone elliptic operators on periodic tori,
//! the hierarchy of higher-order linearized correctors and flux correctors,
//! and Monte-Carlo estimation of the homogenized operator and its derivatives.
//!
//! The numerical kernels are generic over the floating-point type through
//! [`Real`]; the Monte-Carlo layer and the experiment harness run in `f64`.

pub mod config;
pub mod corrector;
pub mod error;
pub mod experiments;
pub mod field;
pub mod grid;
pub mod homogenize;
pub mod hierarchy;
pub mod operator;
pub mod scalar;
pub mod seeds;
pub mod sensitivity;

pub use error::{Error, Result};
pub use grid::{GridField, Mass, Rank, Spectral, TorusGrid};
pub use operator::{ModelKind, OperatorModel};
pub use scalar::Real;

/// Double-precision node field.
pub type Field = GridField<f64>;
/// Single-precision node field.
pub type Field32 = GridField<f32>;
