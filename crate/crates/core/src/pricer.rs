//! Fourier pricing: the parametric integrand `h_p`, reference quadrature,
//! magic point pricing and the truncation-tail estimator.
//!
//! With `x0 = ln S0` and `z = xi + i*eta` componentwise,
//!
//! ```text
//! h_p(xi) = Re( fhat_K(-xi + i*eta) * exp(i <z, x0>) * phi_{T,q}(z) )
//! price   = 2 / (2 pi)^d * int_{[lo,hi] x [-hi,hi]^{d-1}} h_p
//! ```
//!
//! where `fhat_K` is [`payoff_ft`]. The price is the undiscounted expectation
//! `E[f_K(x0 + X_T)]` unless discounting is requested.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::eim::MagicRule;
use crate::models::{ModelError, ModelKind, ModelParams, ParamPoint};
use crate::payoffs::{check_eta, payoff_ft, PayoffError, PayoffKind, PayoffSpec};
use crate::quad::{try_integrate_adaptive, QuadError, QuadSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PricerError {
    #[error(transparent)]
    Payoff(#[from] PayoffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("rule and request disagree on {0}")]
    SpecMismatch(String),
    #[error("integrand is not finite at xi = {xi:?}")]
    NonFinite { xi: Vec<f64> },
}

impl PricerError {
    pub fn is_numerical(&self) -> bool {
        match self {
            PricerError::Quad(_) | PricerError::NonFinite { .. } => true,
            PricerError::Model(e) => matches!(e, ModelError::NonFinite { .. }),
            _ => false,
        }
    }
}

/// A family of integrands: everything except the parameter point.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrandSpec {
    pub payoff: PayoffKind,
    pub model: ModelKind,
    pub dim: usize,
    pub eta: f64,
    pub rate: f64,
}

impl IntegrandSpec {
    pub fn new(payoff: PayoffKind, model: ModelKind, dim: usize, eta: f64, rate: f64) -> Self {
        IntegrandSpec { payoff, model, dim, eta, rate }
    }

    /// Fixes the parameter point, validating payoff, model and damping.
    pub fn bind(&self, p: &ParamPoint) -> Result<BoundIntegrand, PricerError> {
        let payoff = PayoffSpec::new(self.payoff, p.strike, self.dim)?;
        let model = ModelParams::from_values(self.model, &p.model, self.rate)?;
        BoundIntegrand::new(payoff, model, p.spot, p.maturity, self.eta)
    }

    /// Normalising constant `2 / (2 pi)^d`.
    pub fn prefactor(&self) -> f64 {
        prefactor(self.dim)
    }
}

pub fn prefactor(dim: usize) -> f64 {
    2.0 / (2.0 * PI).powi(dim as i32)
}

/// `h_p` for one parameter point.
#[derive(Clone, Debug)]
pub struct BoundIntegrand {
    payoff: PayoffSpec,
    model: ModelParams,
    x0: f64,
    maturity: f64,
    eta: f64,
}

impl BoundIntegrand {
    pub fn new(payoff: PayoffSpec, model: ModelParams, spot: f64, maturity: f64, eta: f64) -> Result<Self, PricerError> {
        if payoff.dim() != model.dim() {
            return Err(PricerError::InvalidRequest(format!(
                "payoff dimension {} and model dimension {} differ",
                payoff.dim(),
                model.dim()
            )));
        }
        if !(spot > 0.0 && spot.is_finite()) {
            return Err(PricerError::InvalidRequest(format!("spot must be positive, got {spot}")));
        }
        if !(maturity > 0.0 && maturity.is_finite()) {
            return Err(PricerError::InvalidRequest(format!("maturity must be positive, got {maturity}")));
        }
        check_eta(&payoff, eta)?;
        let (lo, hi) = model.model().strip();
        if !(lo < eta && eta < hi) {
            return Err(ModelError::StripViolation {
                kind: model.kind(),
                eta,
                lower: lo,
                upper: hi,
            }
            .into());
        }
        Ok(BoundIntegrand {
            payoff,
            model,
            x0: spot.ln(),
            maturity,
            eta,
        })
    }

    pub fn dim(&self) -> usize {
        self.payoff.dim()
    }

    /// Complex integrand before taking the real part.
    pub fn eval_complex(&self, xi: &[f64]) -> Result<Complex64, PricerError> {
        let eta = self.eta;
        let w: Vec<Complex64> = xi.iter().map(|&x| Complex64::new(-x, eta)).collect();
        let z: Vec<Complex64> = xi.iter().map(|&x| Complex64::new(x, eta)).collect();
        let fhat = payoff_ft(&self.payoff, &w)?;
        let phi = self.model.char_fn(self.maturity, &z)?;
        let sum_z: Complex64 = z.iter().sum();
        let shift = (Complex64::i() * sum_z * self.x0).exp();
        let v = fhat * shift * phi;
        if v.re.is_finite() && v.im.is_finite() {
            Ok(v)
        } else {
            Err(PricerError::NonFinite { xi: xi.to_vec() })
        }
    }

    pub fn eval(&self, xi: &[f64]) -> Result<f64, PricerError> {
        self.eval_complex(xi).map(|v| v.re)
    }

    pub fn eval1(&self, xi: f64) -> Result<f64, PricerError> {
        self.eval(&[xi])
    }

    /// `int h_p` over `[lo,hi] x [-hi,hi]^{d-1}` by nested adaptive quadrature.
    pub fn integrate(&self, lo: f64, hi: f64, settings: &QuadSettings) -> Result<f64, PricerError> {
        self.integrate_from(&[], lo, hi, settings)
    }

    fn integrate_from(&self, prefix: &[f64], lo: f64, hi: f64, settings: &QuadSettings) -> Result<f64, PricerError> {
        let (a, b) = if prefix.is_empty() { (lo, hi) } else { (-hi, hi) };
        try_integrate_adaptive(
            |x| {
                let mut xi = prefix.to_vec();
                xi.push(x);
                if xi.len() == self.dim() {
                    self.eval(&xi)
                } else {
                    self.integrate_from(&xi, lo, hi, settings)
                }
            },
            a,
            b,
            settings,
        )
    }
}

#[derive(Clone, Debug)]
pub struct PriceRequest {
    pub payoff: PayoffSpec,
    pub model: ModelParams,
    pub spot: f64,
    pub maturity: f64,
    pub eta: f64,
    pub omega: (f64, f64),
    pub discount: bool,
}

impl PriceRequest {
    pub fn integrand(&self) -> Result<BoundIntegrand, PricerError> {
        BoundIntegrand::new(self.payoff, self.model.clone(), self.spot, self.maturity, self.eta)
    }

    pub fn param_point(&self) -> ParamPoint {
        ParamPoint {
            spot: self.spot,
            strike: self.payoff.strike(),
            maturity: self.maturity,
            model: self.model.model().values(),
        }
    }

    fn discount_factor(&self) -> f64 {
        if self.discount {
            (-self.model.rate() * self.maturity).exp()
        } else {
            1.0
        }
    }

    fn check_omega(&self) -> Result<(), PricerError> {
        let (lo, hi) = self.omega;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi) {
            return Err(PricerError::InvalidRequest(format!("omega must satisfy 0 <= lo < hi, got [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Reference price by adaptive quadrature of `h_p` over `omega`.
pub fn price_reference(req: &PriceRequest, settings: &QuadSettings) -> Result<f64, PricerError> {
    req.check_omega()?;
    let h = req.integrand()?;
    let (lo, hi) = req.omega;
    let integral = h.integrate(lo, hi, settings)?;
    Ok(prefactor(h.dim()) * integral * req.discount_factor())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagicPrice {
    pub price: f64,
    /// The request lies outside the box the rule was trained on.
    pub extrapolated: bool,
}

/// Online price from a trained rule using its full basis.
pub fn price_magic(rule: &MagicRule, req: &PriceRequest) -> Result<MagicPrice, PricerError> {
    price_magic_with(rule, req, rule.m())
}

/// Online price using only the first `m` basis functions of `rule`.
pub fn price_magic_with(rule: &MagicRule, req: &PriceRequest, m: usize) -> Result<MagicPrice, PricerError> {
    let mismatch = |what: &str| Err(PricerError::SpecMismatch(what.to_string()));
    if rule.payoff_kind() != req.payoff.kind() {
        return mismatch("payoff");
    }
    if rule.model_kind() != req.model.kind() {
        return mismatch("model");
    }
    if rule.eta() != req.eta {
        return mismatch("damping eta");
    }
    if rule.omega() != req.omega {
        return mismatch("integration domain");
    }
    if rule.rate() != req.model.rate() {
        return mismatch("rate");
    }
    let p = req.param_point();
    let h = req.integrand()?;
    let integral = rule.online_integrate_bound(&h, m).map_err(|e| match e {
        crate::eim::EimError::Pricer(p) => *p,
        other => PricerError::InvalidRequest(other.to_string()),
    })?;
    Ok(MagicPrice {
        price: prefactor(1) * integral * req.discount_factor(),
        extrapolated: !rule.in_box(&p),
    })
}

/// `|2/(2 pi)^d * int_{omega_hi}^{far} h_p|`, a computable surrogate for the
/// error made by truncating the frequency domain at `omega_hi`.
pub fn truncation_tail(req: &PriceRequest, omega_hi: f64, far: f64, settings: &QuadSettings) -> Result<f64, PricerError> {
    if !(omega_hi.is_finite() && far.is_finite() && far >= omega_hi) {
        return Err(PricerError::InvalidRequest(format!("need far >= omega_hi, got {far} < {omega_hi}")));
    }
    let h = req.integrand()?;
    if h.dim() != 1 {
        return Err(PricerError::InvalidRequest("the tail estimator is one-dimensional".into()));
    }
    if far == omega_hi {
        return Ok(0.0);
    }
    let tail = try_integrate_adaptive(|x| h.eval1(x), omega_hi, far, settings)?;
    Ok((prefactor(1) * tail).abs())
}
