//! Offline-online parametric Fourier option pricing.
//!
//! The offline phase evaluates a family of Fourier pricing integrands on a
//! frequency grid and greedily selects "magic" interpolation points and
//! snapshot integrands (`eim`). The online phase prices a new parameter
//! constellation as a weighted sum of `M` closed-form integrand evaluations
//! (`pricer::price_magic`).
//!
//! Module map:
//!
//! * [`quad`]: frequency grids and adaptive Gauss-Kronrod quadrature.
//! * [`payoffs`]: generalized Fourier transforms of damped payoffs.
//! * [`models`]: characteristic functions and parameter-domain checks.
//! * [`eim`]: greedy magic point training, interpolation and rule files.
//! * [`pricer`]: reference, magic and truncation-tail pricing.
//! * [`cosbench`]: Fourier-cosine benchmark pricer.
//! * [`harness`]: configuration, parameter clouds and the numerical studies.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cosbench;
pub mod eim;
pub mod harness;
pub mod models;
pub mod par;
pub mod payoffs;
pub mod pricer;
pub mod quad;

pub use num_complex::Complex64;
pub use par::Execution;

use thiserror::Error;

/// Crate-level error used by the harness and the command line tool.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Quad(#[from] quad::QuadError),
    #[error(transparent)]
    Payoff(#[from] payoffs::PayoffError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Eim(#[from] eim::EimError),
    #[error(transparent)]
    Pricer(#[from] pricer::PricerError),
    #[error(transparent)]
    Cos(#[from] cosbench::CosError),
    #[error(transparent)]
    Config(#[from] harness::ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (quadrature, non-finite values)
    /// as opposed to invalid input or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Quad(_) => true,
            Error::Pricer(e) => e.is_numerical(),
            Error::Cos(e) => e.is_numerical(),
            Error::Eim(e) => e.is_numerical(),
            Error::Model(e) => matches!(e, models::ModelError::NonFinite { .. }),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
