//! Steady-state simulation of optically pumped NV⁻ centers coupled to their
//! ¹⁴N nucleus, with ODMR line synthesis and fitting.
//!
//! Energies are ordinary frequencies in MHz, fields in gauss, angles in
//! degrees and times in microseconds.

// Links the OpenBLAS backend used by ndarray and ndarray-linalg.
extern crate blas_src;

pub mod error;
pub mod hamiltonian;
pub mod lindblad;
pub mod odmr;
pub mod spin;
pub mod sweep;

pub use error::{Error, Result};
pub use hamiltonian::{EigenSystem, Manifold, SystemParams};
pub use lindblad::{CollapseOperator, DensityMatrix, RateSet, RateUnits};
pub use odmr::{Branch, FitOptions, FitResult, LineShape, OdmrSpectrum, TransitionLine};
