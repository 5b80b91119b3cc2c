//! Fourier-cosine (COS) series pricer for European calls, used as the
//! efficiency benchmark.
//!
//! The truncation range comes from the cumulants of `X_T = ln(S_T / S0)`:
//! `[c1 - L w, c1 + L w]` with `w = sqrt(c2 + sqrt(c4))`. As in the
//! standard formulation it is applied to `ln(S_T / K)` without shifting by
//! the moneyness `ln(S0 / K)`, so far from the money a small `L` leaves part
//! of the density outside the range.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::models::{Model, ModelError, ModelKind, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CosError {
    #[error("invalid COS settings: {0}")]
    InvalidSettings(String),
    #[error("no cumulants implemented for {0}")]
    Unsupported(ModelKind),
    #[error("degenerate truncation range [{a}, {b}]")]
    InvalidRange { a: f64, b: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl CosError {
    pub fn is_numerical(&self) -> bool {
        match self {
            CosError::InvalidRange { .. } => true,
            CosError::Model(e) => matches!(e, ModelError::NonFinite { .. }),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosSettings {
    /// Number of cosine terms.
    pub n: usize,
    /// Truncation multiplier.
    pub l: f64,
}

impl CosSettings {
    pub fn validate(&self) -> Result<(), CosError> {
        if self.n == 0 {
            return Err(CosError::InvalidSettings("need at least one term".into()));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(CosError::InvalidSettings(format!("L must be positive, got {}", self.l)));
        }
        Ok(())
    }
}

/// First, second and fourth cumulant of the log-return `X_T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cumulants {
    pub c1: f64,
    pub c2: f64,
    pub c4: f64,
}

pub fn cumulants(params: &ModelParams, t: f64) -> Result<Cumulants, CosError> {
    let r = params.rate();
    Ok(match *params.model() {
        Model::BlackScholes { sigma } => Cumulants {
            c1: (r - 0.5 * sigma * sigma) * t,
            c2: sigma * sigma * t,
            c4: 0.0,
        },
        Model::Merton { sigma, alpha, beta, lambda } => {
            let (a2, b2) = (alpha * alpha, beta * beta);
            Cumulants {
                c1: (r - 0.5 * sigma * sigma - lambda * ((alpha + 0.5 * b2).exp() - 1.0)) * t + lambda * t * alpha,
                c2: t * (sigma * sigma + lambda * (a2 + b2)),
                c4: t * lambda * (a2 * a2 + 6.0 * a2 * b2 + 3.0 * b2 * b2),
            }
        }
        Model::Heston { v0, kappa, theta, sigma, rho } => {
            let e = (-kappa * t).exp();
            let c1 = r * t + (1.0 - e) * (theta - v0) / (2.0 * kappa) - 0.5 * theta * t;
            let k2 = kappa * kappa;
            let s2 = sigma * sigma;
            let c2 = (sigma * t * kappa * e * (v0 - theta) * (8.0 * kappa * rho - 4.0 * sigma)
                + kappa * rho * sigma * (1.0 - e) * (16.0 * theta - 8.0 * v0)
                + 2.0 * theta * kappa * t * (-4.0 * kappa * rho * sigma + s2 + 4.0 * k2)
                + s2 * ((theta - 2.0 * v0) * e * e + theta * (6.0 * e - 7.0) + 2.0 * v0)
                + 8.0 * k2 * (v0 - theta) * (1.0 - e))
                / (8.0 * k2 * kappa);
            Cumulants { c1, c2, c4: 0.0 }
        }
        _ => return Err(CosError::Unsupported(params.kind())),
    })
}

/// Truncation range for the log-return `X_T`.
pub fn cos_range(params: &ModelParams, t: f64, settings: &CosSettings) -> Result<(f64, f64), CosError> {
    settings.validate()?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(CosError::InvalidSettings(format!("maturity must be positive, got {t}")));
    }
    let c = cumulants(params, t)?;
    if !(c.c2 >= 0.0 && c.c4 >= 0.0) {
        return Err(CosError::InvalidRange { a: c.c1, b: c.c1 });
    }
    let w = settings.l * (c.c2 + c.c4.sqrt()).sqrt();
    let (a, b) = (c.c1 - w, c.c1 + w);
    if !(a < b && a.is_finite() && b.is_finite()) {
        return Err(CosError::InvalidRange { a, b });
    }
    Ok((a, b))
}

/// Cosine coefficients of `e^y` and `1` on `[c, d]` relative to `[a, b]`.
fn chi_psi(k: usize, a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let u = k as f64 * PI / (b - a);
    let (sd, cd) = (u * (d - a)).sin_cos();
    let (sc, cc) = (u * (c - a)).sin_cos();
    let (ed, ec) = (d.exp(), c.exp());
    let chi = (cd * ed - cc * ec + u * sd * ed - u * sc * ec) / (1.0 + u * u);
    let psi = if k == 0 { d - c } else { (sd - sc) / u };
    (chi, psi)
}

/// N-term COS price of a European call, undiscounted unless `discount`.
pub fn cos_price(
    params: &ModelParams,
    spot: f64,
    strike: f64,
    t: f64,
    settings: &CosSettings,
    discount: bool,
) -> Result<f64, CosError> {
    if !(spot > 0.0 && strike > 0.0) {
        return Err(CosError::InvalidSettings("spot and strike must be positive".into()));
    }
    if params.dim() != 1 {
        return Err(CosError::Unsupported(params.kind()));
    }
    // the cumulant range is used for y = ln(S_T / K) = x + X_T as is, so
    // it does not move with the moneyness x
    let (a, b) = cos_range(params, t, settings)?;
    let x = (spot / strike).ln();
    if b <= 0.0 {
        return Ok(0.0);
    }
    let c = a.max(0.0);
    let mut sum = 0.0;
    for k in 0..settings.n {
        let u = k as f64 * PI / (b - a);
        let phi = params.char_fn(t, &[Complex64::new(u, 0.0)])?;
        let term = (phi * Complex64::new(0.0, u * (x - a)).exp()).re;
        let (chi, psi) = chi_psi(k, a, b, c, b);
        let v = 2.0 / (b - a) * strike * (chi - psi);
        let weight = if k == 0 { 0.5 } else { 1.0 };
        sum += weight * term * v;
    }
    let disc = if discount { (-params.rate() * t).exp() } else { 1.0 };
    // without the e^{-rT} factor the series is the undiscounted expectation
    Ok(sum * disc)
}
