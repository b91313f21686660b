//! Desk-scale simulation and analysis of a heralded microwave-optical Bell-pair
//! experiment: conditional states in a truncated two-mode Fock space, synthetic
//! heterodyne records, moment inversion, maximum-likelihood tomography and
//! Bell-fidelity bounds.

pub mod coupledmode;
pub mod error;
pub mod fockspace;
pub mod heterodyne;
pub mod moments;
pub mod pipeline;
pub mod sourcemodel;
pub mod tomography;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
