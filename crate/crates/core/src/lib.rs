//! Numerics for path-dependent heat equations: grid paths and the sup-norm path metric,
//! forward integrals, Fejér approximation and cylinder functionals, the smooth gauge
//! function, a finite smooth variational principle, Feynman–Kac estimators and a
//! functional Itô formula checker.

pub mod cylinder;
pub mod error;
pub mod fk;
pub mod fourier;
pub mod gauge;
pub mod ito;
pub mod path;
pub mod quadrature;
pub mod regcalc;
pub mod rng;
pub mod vp;

pub use error::{Error, Result};
