//! Characteristic functions of the log-return `X_T` extended to a damping
//! strip, together with parameter-domain validation.
//!
//! Every model carries its no-arbitrage drift so that `E[e^{X_T}] = e^{rT}`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use thiserror::Error;

use crate::payoffs::{eta_range, PayoffKind, PayoffSpec};

/// Damping used for models without a strip-derived choice.
pub const DEFAULT_ETA: f64 = -1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid {kind} parameters: {reason}")]
    InvalidParams { kind: ModelKind, reason: String },
    #[error("Im(z) = {eta} outside the analyticity strip ({lower}, {upper}) of {kind}")]
    StripViolation {
        kind: ModelKind,
        eta: f64,
        lower: f64,
        upper: f64,
    },
    #[error("{kind} characteristic function is not finite at {z}")]
    NonFinite { kind: ModelKind, z: Complex64 },
    #[error("no admissible damping: {0}")]
    InfeasibleEta(String),
    #[error("unknown model id {0:?}")]
    UnknownId(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bs,
    BsMulti,
    Merton,
    Cgmy,
    Nig,
    Heston,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Bs,
        ModelKind::BsMulti,
        ModelKind::Merton,
        ModelKind::Cgmy,
        ModelKind::Nig,
        ModelKind::Heston,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ModelKind::Bs => "bs",
            ModelKind::BsMulti => "bs_multi",
            ModelKind::Merton => "merton",
            ModelKind::Cgmy => "cgmy",
            ModelKind::Nig => "nig",
            ModelKind::Heston => "heston",
        }
    }

    /// Names of the model coordinates, in parameter-vector order.
    /// `bs_multi` uses `q1, q2, ...` for the lower triangle of the covariance.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Bs => &["sigma"],
            ModelKind::BsMulti => &["q1", "q2", "q3", "q4", "q5", "q6", "q7", "q8", "q9", "q10"],
            ModelKind::Merton => &["sigma", "alpha", "beta", "lambda"],
            ModelKind::Cgmy => &["c", "g", "m", "y"],
            ModelKind::Nig => &["delta", "alpha", "beta"],
            ModelKind::Heston => &["v0", "kappa", "theta", "sigma", "rho"],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| ModelError::UnknownId(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    /// Univariate Black-Scholes with volatility `sigma`.
    BlackScholes { sigma: f64 },
    /// d-variate Black-Scholes; `cov` is the full row-major covariance matrix.
    BlackScholesMulti { dim: usize, cov: Vec<f64> },
    Merton { sigma: f64, alpha: f64, beta: f64, lambda: f64 },
    Cgmy { c: f64, g: f64, m: f64, y: f64 },
    Nig { delta: f64, alpha: f64, beta: f64 },
    Heston { v0: f64, kappa: f64, theta: f64, sigma: f64, rho: f64 },
}

fn tri_dim(n: usize) -> Option<usize> {
    (1..=16).find(|d| d * (d + 1) / 2 == n)
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::BlackScholes { .. } => ModelKind::Bs,
            Model::BlackScholesMulti { .. } => ModelKind::BsMulti,
            Model::Merton { .. } => ModelKind::Merton,
            Model::Cgmy { .. } => ModelKind::Cgmy,
            Model::Nig { .. } => ModelKind::Nig,
            Model::Heston { .. } => ModelKind::Heston,
        }
    }

    /// Number of assets.
    pub fn dim(&self) -> usize {
        match self {
            Model::BlackScholesMulti { dim, .. } => *dim,
            _ => 1,
        }
    }

    /// Builds a model from its parameter vector (see [`ModelKind::param_names`]).
    pub fn from_values(kind: ModelKind, q: &[f64]) -> Result<Model, ModelError> {
        let want = |n: usize| {
            if q.len() == n {
                Ok(())
            } else {
                Err(ModelError::InvalidParams {
                    kind,
                    reason: format!("expected {n} parameters, got {}", q.len()),
                })
            }
        };
        Ok(match kind {
            ModelKind::Bs => {
                want(1)?;
                Model::BlackScholes { sigma: q[0] }
            }
            ModelKind::BsMulti => {
                let dim = tri_dim(q.len()).ok_or_else(|| ModelError::InvalidParams {
                    kind,
                    reason: format!("{} entries is not a lower triangle", q.len()),
                })?;
                let mut cov = vec![0.0; dim * dim];
                for i in 0..dim {
                    for j in 0..=i {
                        let v = q[i * (i + 1) / 2 + j];
                        cov[i * dim + j] = v;
                        cov[j * dim + i] = v;
                    }
                }
                Model::BlackScholesMulti { dim, cov }
            }
            ModelKind::Merton => {
                want(4)?;
                Model::Merton { sigma: q[0], alpha: q[1], beta: q[2], lambda: q[3] }
            }
            ModelKind::Cgmy => {
                want(4)?;
                Model::Cgmy { c: q[0], g: q[1], m: q[2], y: q[3] }
            }
            ModelKind::Nig => {
                want(3)?;
                Model::Nig { delta: q[0], alpha: q[1], beta: q[2] }
            }
            ModelKind::Heston => {
                want(5)?;
                Model::Heston { v0: q[0], kappa: q[1], theta: q[2], sigma: q[3], rho: q[4] }
            }
        })
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Model::BlackScholes { sigma } => vec![*sigma],
            Model::BlackScholesMulti { dim, cov } => {
                let mut q = Vec::with_capacity(dim * (dim + 1) / 2);
                for i in 0..*dim {
                    for j in 0..=i {
                        q.push(cov[i * dim + j]);
                    }
                }
                q
            }
            Model::Merton { sigma, alpha, beta, lambda } => vec![*sigma, *alpha, *beta, *lambda],
            Model::Cgmy { c, g, m, y } => vec![*c, *g, *m, *y],
            Model::Nig { delta, alpha, beta } => vec![*delta, *alpha, *beta],
            Model::Heston { v0, kappa, theta, sigma, rho } => vec![*v0, *kappa, *theta, *sigma, *rho],
        }
    }

    /// Checks the model's own parameter domain.
    pub fn validate(&self) -> Result<(), ModelError> {
        let kind = self.kind();
        let fail = |reason: String| Err(ModelError::InvalidParams { kind, reason });
        if self.values().iter().any(|v| !v.is_finite()) {
            return fail("parameters must be finite".into());
        }
        match *self {
            Model::BlackScholes { sigma } => {
                if sigma <= 0.0 {
                    return fail(format!("sigma = {sigma} must be positive"));
                }
            }
            Model::BlackScholesMulti { dim, ref cov } => {
                if cholesky(dim, cov).is_none() {
                    return fail("covariance matrix is not positive definite".into());
                }
            }
            Model::Merton { sigma, beta, lambda, .. } => {
                if sigma <= 0.0 || beta < 0.0 || lambda <= 0.0 {
                    return fail(format!("need sigma > 0, beta >= 0, lambda > 0; got {sigma}, {beta}, {lambda}"));
                }
            }
            Model::Cgmy { c, g, m, y } => {
                if c <= 0.0 || g < 0.0 || m < 1.0 || !(y > 1.0 && y < 2.0) {
                    return fail(format!("need C > 0, G >= 0, M >= 1, Y in (1,2); got {c}, {g}, {m}, {y}"));
                }
            }
            Model::Nig { delta, alpha, beta } => {
                if delta <= 0.0 || alpha <= 0.0 {
                    return fail(format!("need delta, alpha > 0; got {delta}, {alpha}"));
                }
                if alpha * alpha <= beta * beta || alpha * alpha < (beta + 1.0) * (beta + 1.0) {
                    return fail(format!(
                        "need alpha^2 > beta^2 and alpha^2 >= (beta+1)^2; got alpha = {alpha}, beta = {beta}"
                    ));
                }
            }
            Model::Heston { v0, kappa, theta, sigma, rho } => {
                if v0 <= 0.0 || kappa <= 0.0 || theta <= 0.0 || sigma <= 0.0 {
                    return fail("v0, kappa, theta, sigma must be positive".into());
                }
                if !(-1.0..=1.0).contains(&rho) {
                    return fail(format!("rho = {rho} outside [-1, 1]"));
                }
                if sigma * sigma > 2.0 * kappa * theta {
                    return fail(format!(
                        "Feller condition sigma^2 <= 2 kappa theta violated ({} > {})",
                        sigma * sigma,
                        2.0 * kappa * theta
                    ));
                }
            }
        }
        Ok(())
    }

    /// Open interval for `Im(z)` on which the characteristic function is analytic.
    pub fn strip(&self) -> (f64, f64) {
        match *self {
            Model::Cgmy { g, m, .. } => (-m, g),
            Model::Nig { alpha, beta, .. } => (beta - alpha, beta + alpha),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

fn cholesky(dim: usize, a: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Some(l)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    model: Model,
    rate: f64,
}

impl ModelParams {
    pub fn new(model: Model, rate: f64) -> Result<Self, ModelError> {
        model.validate()?;
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(ModelError::InvalidParams {
                kind: model.kind(),
                reason: format!("rate must be finite and nonnegative, got {rate}"),
            });
        }
        Ok(ModelParams { model, rate })
    }

    pub fn from_values(kind: ModelKind, q: &[f64], rate: f64) -> Result<Self, ModelError> {
        Self::new(Model::from_values(kind, q)?, rate)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Drift `b` of the log-return (per unit time), one entry per asset.
    pub fn drift(&self) -> Vec<f64> {
        let r = self.rate;
        match self.model {
            Model::BlackScholes { sigma } => vec![r - 0.5 * sigma * sigma],
            Model::BlackScholesMulti { dim, ref cov } => (0..dim).map(|i| r - 0.5 * cov[i * dim + i]).collect(),
            Model::Merton { sigma, alpha, beta, lambda } => {
                vec![r - 0.5 * sigma * sigma - lambda * ((alpha + 0.5 * beta * beta).exp() - 1.0)]
            }
            Model::Cgmy { c, g, m, y } => {
                let bracket = (m - 1.0).powf(y) - m.powf(y) + (g + 1.0).powf(y) - g.powf(y);
                vec![r - c * gamma(-y) * bracket]
            }
            Model::Nig { delta, alpha, beta } => {
                let a2 = alpha * alpha;
                vec![r - delta * ((a2 - beta * beta).sqrt() - (a2 - (beta + 1.0) * (beta + 1.0)).sqrt())]
            }
            Model::Heston { .. } => vec![r],
        }
    }

    fn check_strip(&self, z: &[Complex64]) -> Result<(), ModelError> {
        let (lower, upper) = self.model.strip();
        for zj in z {
            if !(lower < zj.im && zj.im < upper) {
                return Err(ModelError::StripViolation {
                    kind: self.kind(),
                    eta: zj.im,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    /// `log E[exp(i <z, X_T>)]`, principal branches throughout.
    pub fn log_char_fn(&self, t: f64, z: &[Complex64]) -> Result<Complex64, ModelError> {
        let kind = self.kind();
        if z.len() != self.dim() {
            return Err(ModelError::InvalidParams {
                kind,
                reason: format!("frequency has {} coordinates, model dimension is {}", z.len(), self.dim()),
            });
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(ModelError::InvalidParams {
                kind,
                reason: format!("maturity must be positive, got {t}"),
            });
        }
        self.check_strip(z)?;
        let i = Complex64::i();
        let one = Complex64::new(1.0, 0.0);
        let b = self.drift();
        let value = match self.model {
            Model::BlackScholes { sigma } => {
                let z = z[0];
                t * (i * b[0] * z - 0.5 * sigma * sigma * z * z)
            }
            Model::BlackScholesMulti { dim, ref cov } => {
                let mut quad = Complex64::new(0.0, 0.0);
                let mut lin = Complex64::new(0.0, 0.0);
                for r in 0..dim {
                    lin += b[r] * z[r];
                    for c in 0..dim {
                        quad += z[r] * cov[r * dim + c] * z[c];
                    }
                }
                t * (i * lin - 0.5 * quad)
            }
            Model::Merton { sigma, alpha, beta, lambda } => {
                let z = z[0];
                let jump = (i * z * alpha - 0.5 * beta * beta * z * z).exp() - one;
                t * (i * b[0] * z - 0.5 * sigma * sigma * z * z + lambda * jump)
            }
            Model::Cgmy { c, g, m, y } => {
                let z = z[0];
                let bracket = (m - i * z).powf(y) - m.powf(y) + (g + i * z).powf(y) - g.powf(y);
                t * (i * b[0] * z + c * gamma(-y) * bracket)
            }
            Model::Nig { delta, alpha, beta } => {
                let z = z[0];
                let a2 = alpha * alpha;
                let inner = (a2 - (beta + i * z) * (beta + i * z)).sqrt();
                t * (i * b[0] * z + delta * ((a2 - beta * beta).sqrt() - inner))
            }
            Model::Heston { v0, kappa, theta, sigma, rho } => {
                let z = z[0];
                let s2 = sigma * sigma;
                let a = kappa - i * rho * sigma * z;
                let c = (a * a - s2 * (-z * i - z * z)).sqrt();
                let g = (a - c) / (a + c);
                let e = (-c * t).exp();
                let first = v0 / s2 * (a - c) * (one - e) / (one - g * e);
                let second = kappa * theta / s2 * ((a - c) * t - 2.0 * ((one - g * e) / (one - g)).ln());
                i * self.rate * z * t + first + second
            }
        };
        if value.re.is_finite() && value.im.is_finite() {
            Ok(value)
        } else {
            Err(ModelError::NonFinite { kind, z: z[0] })
        }
    }

    pub fn char_fn(&self, t: f64, z: &[Complex64]) -> Result<Complex64, ModelError> {
        let v = self.log_char_fn(t, z)?.exp();
        if v.re.is_finite() && v.im.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NonFinite { kind: self.kind(), z: z[0] })
        }
    }
}

/// Variance of `X_1` used by the plausibility filter.
///
/// Black-Scholes (multi): largest diagonal variance. Merton: `sigma^2 + lambda (alpha^2 + beta^2)`.
/// Heston: the initial variance `v0`.
pub fn implied_variance(params: &ModelParams) -> Result<f64, ModelError> {
    Ok(match *params.model() {
        Model::BlackScholes { sigma } => sigma * sigma,
        Model::BlackScholesMulti { dim, ref cov } => (0..dim).map(|i| cov[i * dim + i]).fold(0.0, f64::max),
        Model::Merton { sigma, alpha, beta, lambda } => sigma * sigma + lambda * (alpha * alpha + beta * beta),
        Model::Cgmy { c, g, m, y } => {
            if g <= 0.0 {
                return Err(ModelError::InvalidParams {
                    kind: ModelKind::Cgmy,
                    reason: "implied variance needs G > 0".into(),
                });
            }
            c * gamma(2.0 - y) * (m.powf(y - 2.0) + g.powf(y - 2.0))
        }
        Model::Nig { delta, alpha, beta } => delta * alpha * alpha / (alpha * alpha - beta * beta).powf(1.5),
        Model::Heston { v0, .. } => v0,
    })
}

/// One parameter constellation `p = (K, T, q)` plus the spot `S0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPoint {
    pub spot: f64,
    pub strike: f64,
    pub maturity: f64,
    pub model: Vec<f64>,
}

impl ParamPoint {
    /// Flattened `[spot, strike, maturity, q...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.spot, self.strike, self.maturity];
        v.extend_from_slice(&self.model);
        v
    }

    pub fn from_slice(v: &[f64]) -> Option<ParamPoint> {
        if v.len() < 3 {
            return None;
        }
        Some(ParamPoint {
            spot: v[0],
            strike: v[1],
            maturity: v[2],
            model: v[3..].to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

/// Parameter domain for a training cloud: per-coordinate intervals, the
/// shared strip width `R` and the implied-variance window.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBox {
    pub kind: ModelKind,
    pub spot: Interval,
    pub strike: Interval,
    pub maturity: Interval,
    pub model: Vec<Interval>,
    pub strip_width: f64,
    pub variance_bounds: (f64, f64),
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxViolation {
    pub constraint: String,
    pub detail: String,
    /// `true` when no point of the box can satisfy the constraint;
    /// otherwise rejection sampling can still enforce it.
    pub infeasible: bool,
}

impl fmt::Display for BoxViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.infeasible { "infeasible" } else { "needs rejection" };
        write!(f, "{} [{}]: {}", self.constraint, tag, self.detail)
    }
}

impl ParamBox {
    pub fn lower(&self) -> ParamPoint {
        ParamPoint {
            spot: self.spot.lo,
            strike: self.strike.lo,
            maturity: self.maturity.lo,
            model: self.model.iter().map(|i| i.lo).collect(),
        }
    }

    pub fn upper(&self) -> ParamPoint {
        ParamPoint {
            spot: self.spot.hi,
            strike: self.strike.hi,
            maturity: self.maturity.hi,
            model: self.model.iter().map(|i| i.hi).collect(),
        }
    }

    /// All flattened coordinates as intervals, `[spot, strike, maturity, q...]`.
    pub fn intervals(&self) -> Vec<Interval> {
        let mut v = vec![self.spot, self.strike, self.maturity];
        v.extend_from_slice(&self.model);
        v
    }

    pub fn contains(&self, p: &ParamPoint) -> bool {
        let v = p.to_vec();
        let iv = self.intervals();
        v.len() == iv.len() && v.iter().zip(&iv).all(|(x, i)| i.contains(*x))
    }

    fn coord(&self, name: &str) -> Option<Interval> {
        self.kind
            .param_names()
            .iter()
            .position(|n| *n == name)
            .and_then(|i| self.model.get(i).copied())
    }

    /// Joint constraints a sample must satisfy: the model domain, the shared
    /// strip of width `R`, and the implied-variance window.
    pub fn admits(&self, p: &ParamPoint) -> Result<ModelParams, String> {
        let params = ModelParams::from_values(self.kind, &p.model, self.rate).map_err(|e| e.to_string())?;
        let r = self.strip_width;
        match *params.model() {
            Model::Cgmy { m, .. } if m < 1.0 + 2.0 * r => {
                return Err(format!("strip condition M >= 1 + 2R violated (M = {m})"));
            }
            Model::Nig { alpha, beta, .. } if !(alpha - beta > 2.0 * r + 1.0 && alpha + beta > -1.0) => {
                return Err(format!("strip conditions violated (alpha = {alpha}, beta = {beta})"));
            }
            _ => {}
        }
        let var = implied_variance(&params).map_err(|e| e.to_string())?;
        let (lo, hi) = self.variance_bounds;
        if !(lo <= var && var <= hi) {
            return Err(format!("implied variance {var} outside [{lo}, {hi}]"));
        }
        Ok(params)
    }
}

/// Checks every box-level constraint and reports all violations.
pub fn validate_box(b: &ParamBox) -> Vec<BoxViolation> {
    let mut out = Vec::new();
    let mut push = |constraint: &str, detail: String, infeasible: bool| {
        out.push(BoxViolation {
            constraint: constraint.to_string(),
            detail,
            infeasible,
        })
    };
    let names = b.kind.param_names();
    let expected = match b.kind {
        ModelKind::BsMulti => b.model.len(),
        _ => names.len(),
    };
    if b.model.len() != expected || (b.kind == ModelKind::BsMulti && tri_dim(b.model.len()).is_none()) {
        push("shape", format!("{} model intervals for {}", b.model.len(), b.kind), true);
        return out;
    }
    for (name, iv) in [("spot", b.spot), ("strike", b.strike), ("maturity", b.maturity)]
        .into_iter()
        .chain(names.iter().copied().zip(b.model.iter().copied()))
    {
        if !iv.is_valid() {
            push("interval", format!("{name} = [{}, {}] is empty or not finite", iv.lo, iv.hi), true);
        }
    }
    for (name, iv) in [("spot", b.spot), ("strike", b.strike), ("maturity", b.maturity)] {
        if iv.lo <= 0.0 {
            push("positivity", format!("{name} lower bound {} must be > 0", iv.lo), true);
        }
    }
    if !(b.strip_width > 0.0) {
        push("strip width", format!("R = {} must be > 0", b.strip_width), true);
    }
    let (vlo, vhi) = b.variance_bounds;
    if !(vlo > 0.0 && vlo < vhi) {
        push("variance bounds", format!("need 0 < lower < upper, got [{vlo}, {vhi}]"), true);
    }
    if !(b.rate >= 0.0 && b.rate.is_finite()) {
        push("rate", format!("r = {} must be finite and nonnegative", b.rate), true);
    }
    let get = |n: &str| b.coord(n).expect("coordinate exists for kind");
    let r = b.strip_width;
    // (name, worst-case holds, best-case holds)
    let mut check = |constraint: &str, detail: String, worst: bool, best: bool| {
        if !worst {
            push(constraint, detail, !best);
        }
    };
    match b.kind {
        ModelKind::Bs => {
            let s = get("sigma");
            check("sigma > 0", format!("sigma in [{}, {}]", s.lo, s.hi), s.lo > 0.0, s.hi > 0.0);
        }
        ModelKind::BsMulti => {
            let d = tri_dim(b.model.len()).unwrap_or(1);
            for i in 0..d {
                let iv = b.model[i * (i + 1) / 2 + i];
                check("positive variances", format!("diagonal {} in [{}, {}]", i + 1, iv.lo, iv.hi), iv.lo > 0.0, iv.hi > 0.0);
            }
        }
        ModelKind::Merton => {
            let (s, be, l) = (get("sigma"), get("beta"), get("lambda"));
            check("sigma > 0", format!("sigma in [{}, {}]", s.lo, s.hi), s.lo > 0.0, s.hi > 0.0);
            check("beta >= 0", format!("beta in [{}, {}]", be.lo, be.hi), be.lo >= 0.0, be.hi >= 0.0);
            check("lambda > 0", format!("lambda in [{}, {}]", l.lo, l.hi), l.lo > 0.0, l.hi > 0.0);
        }
        ModelKind::Cgmy => {
            let (c, g, m, y) = (get("c"), get("g"), get("m"), get("y"));
            check("C > 0", format!("C in [{}, {}]", c.lo, c.hi), c.lo > 0.0, c.hi > 0.0);
            check("G >= 0", format!("G in [{}, {}]", g.lo, g.hi), g.lo >= 0.0, g.hi >= 0.0);
            check("1 <= M", format!("M in [{}, {}]", m.lo, m.hi), m.lo >= 1.0, m.hi >= 1.0);
            check(
                "Y in (1, 2)",
                format!("Y in [{}, {}]", y.lo, y.hi),
                y.lo > 1.0 && y.hi < 2.0,
                y.hi > 1.0 && y.lo < 2.0,
            );
            check(
                "M >= 1 + 2R",
                format!("min M = {} against 1 + 2R = {}", m.lo, 1.0 + 2.0 * r),
                m.lo >= 1.0 + 2.0 * r,
                m.hi >= 1.0 + 2.0 * r,
            );
        }
        ModelKind::Nig => {
            let (d, a, be) = (get("delta"), get("alpha"), get("beta"));
            check("delta > 0", format!("delta in [{}, {}]", d.lo, d.hi), d.lo > 0.0, d.hi > 0.0);
            check("alpha > 0", format!("alpha in [{}, {}]", a.lo, a.hi), a.lo > 0.0, a.hi > 0.0);
            let abs_beta_max = be.lo.abs().max(be.hi.abs());
            let abs_beta_min = if be.contains(0.0) { 0.0 } else { be.lo.abs().min(be.hi.abs()) };
            check(
                "alpha^2 > beta^2",
                format!("min alpha = {} against max |beta| = {abs_beta_max}", a.lo),
                a.lo > abs_beta_max,
                a.hi > abs_beta_min,
            );
            let shifted_max = (be.lo + 1.0).abs().max((be.hi + 1.0).abs());
            let shifted_min = if be.contains(-1.0) { 0.0 } else { (be.lo + 1.0).abs().min((be.hi + 1.0).abs()) };
            check(
                "alpha^2 >= (beta+1)^2",
                format!("min alpha = {} against max |beta+1| = {shifted_max}", a.lo),
                a.lo >= shifted_max,
                a.hi >= shifted_min,
            );
            check(
                "alpha - beta > 2R + 1",
                format!("min alpha - max beta = {} against 2R + 1 = {}", a.lo - be.hi, 2.0 * r + 1.0),
                a.lo - be.hi > 2.0 * r + 1.0,
                a.hi - be.lo > 2.0 * r + 1.0,
            );
            check(
                "alpha + beta > -1",
                format!("min alpha + min beta = {}", a.lo + be.lo),
                a.lo + be.lo > -1.0,
                a.hi + be.hi > -1.0,
            );
        }
        ModelKind::Heston => {
            let (v0, k, th, s, rho) = (get("v0"), get("kappa"), get("theta"), get("sigma"), get("rho"));
            for (n, iv) in [("v0", v0), ("kappa", k), ("theta", th), ("sigma", s)] {
                check("positivity", format!("{n} in [{}, {}]", iv.lo, iv.hi), iv.lo > 0.0, iv.hi > 0.0);
            }
            check(
                "rho in [-1, 1]",
                format!("rho in [{}, {}]", rho.lo, rho.hi),
                rho.lo >= -1.0 && rho.hi <= 1.0,
                rho.hi >= -1.0 && rho.lo <= 1.0,
            );
            check(
                "Feller sigma^2 <= 2 kappa theta",
                format!("max sigma^2 = {} against min 2 kappa theta = {}", s.hi * s.hi, 2.0 * k.lo * th.lo),
                s.hi * s.hi <= 2.0 * k.lo * th.lo,
                s.lo * s.lo <= 2.0 * k.hi * th.hi,
            );
        }
    }
    out
}

/// Damping value jointly admissible for the payoff and the box's common strip.
///
/// CGMY and NIG use the strip-centred choices; the other models use `default_eta`.
pub fn select_eta(b: &ParamBox, payoff: PayoffKind, default_eta: f64) -> Result<f64, ModelError> {
    let r = b.strip_width;
    let eta = match b.kind {
        ModelKind::Cgmy | ModelKind::Nig if !payoff.is_call_type() => {
            return Err(ModelError::InfeasibleEta(format!(
                "strip-centred damping for {} is derived for call-type payoffs, not {payoff}",
                b.kind
            )));
        }
        ModelKind::Cgmy => {
            let m = b.coord("m").expect("cgmy has m");
            let min_m = m.lo.max(1.0 + 2.0 * r);
            if min_m > m.hi {
                return Err(ModelError::InfeasibleEta(format!("no M in [{}, {}] with M >= 1 + 2R", m.lo, m.hi)));
            }
            -(min_m + 1.0) / 2.0
        }
        ModelKind::Nig => {
            let (a, be) = (b.coord("alpha").expect("nig has alpha"), b.coord("beta").expect("nig has beta"));
            let max_gap = (be.hi - a.lo).min(-(2.0 * r + 1.0));
            ((max_gap) - 1.0) / 2.0
        }
        _ => default_eta,
    };
    let strike = b.strike.lo.max(f64::MIN_POSITIVE);
    let dim = if payoff == PayoffKind::BasketMinCall { b.kind_dim() } else { 1 };
    let spec = PayoffSpec::new(payoff, strike, dim).map_err(|e| ModelError::InfeasibleEta(e.to_string()))?;
    let range = eta_range(&spec);
    if !range.contains(eta) {
        return Err(ModelError::InfeasibleEta(format!(
            "eta = {eta} outside ({}, {}) required by {payoff}",
            range.lower, range.upper
        )));
    }
    Ok(eta)
}

impl ParamBox {
    fn kind_dim(&self) -> usize {
        match self.kind {
            ModelKind::BsMulti => tri_dim(self.model.len()).unwrap_or(1),
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_params(kind: ModelKind, rng: &mut ChaCha8Rng) -> ModelParams {
        let rate = rng.random_range(0.0..0.05);
        loop {
            let q: Vec<f64> = match kind {
                ModelKind::Bs => vec![rng.random_range(0.1..0.9)],
                ModelKind::BsMulti => {
                    let (s1, s2, rho) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6), rng.random_range(-0.9..0.9));
                    vec![s1 * s1, rho * s1 * s2, s2 * s2]
                }
                ModelKind::Merton => vec![
                    rng.random_range(0.1..0.7),
                    rng.random_range(-1.5..-0.1),
                    rng.random_range(0.1..1.0),
                    rng.random_range(1e-5..1.0),
                ],
                ModelKind::Cgmy => vec![
                    rng.random_range(1e-5..1.0),
                    rng.random_range(0.0..25.0),
                    rng.random_range(2.0..30.0),
                    rng.random_range(1.05..1.9),
                ],
                ModelKind::Nig => vec![
                    rng.random_range(0.2..1.0),
                    rng.random_range(1e-5..3.0),
                    rng.random_range(-3.0..3.0),
                ],
                ModelKind::Heston => vec![
                    rng.random_range(0.04..0.09),
                    2.0,
                    rng.random_range(0.0225..0.1225),
                    0.15,
                    rng.random_range(-1.0..1.0),
                ],
            };
            if let Ok(p) = ModelParams::from_values(kind, &q, rate) {
                return p;
            }
        }
    }

    fn origin(p: &ModelParams, shift: Complex64) -> Vec<Complex64> {
        vec![shift; p.dim()]
    }

    #[test]
    fn normalization_and_martingale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for kind in ModelKind::ALL {
            for _ in 0..100 {
                let p = random_params(kind, &mut rng);
                let t = rng.random_range(0.1..1.5);
                let at_zero = p.char_fn(t, &origin(&p, c(0.0, 0.0))).unwrap();
                assert!((at_zero - 1.0).norm() <= 1e-14, "{kind} {at_zero}");
                if p.dim() == 1 {
                    let m = p.char_fn(t, &[c(0.0, -1.0)]).unwrap();
                    let target = (p.rate() * t).exp();
                    assert!((m - target).norm() <= 1e-12, "{kind} {m} vs {target} ({p:?})");
                } else {
                    for j in 0..p.dim() {
                        let mut z = origin(&p, c(0.0, 0.0));
                        z[j] = c(0.0, -1.0);
                        let m = p.char_fn(t, &z).unwrap();
                        assert!((m - (p.rate() * t).exp()).norm() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bs_direct_substitution() {
        let p = ModelParams::from_values(ModelKind::Bs, &[0.2], 0.0).unwrap();
        let v = p.char_fn(1.0, &[c(1.0, 0.0)]).unwrap();
        let expected = c(-0.02, -0.02).exp();
        assert!((v - expected).norm() < 1e-15);
    }

    #[test]
    fn bs_monte_carlo_cross_check() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400_000;
        let mut acc = c(0.0, 0.0);
        for _ in 0..n {
            let w: f64 = StandardNormal.sample(&mut rng);
            let x = -0.02 + 0.2 * w;
            acc += c(0.0, x).exp();
        }
        let mc = acc / n as f64;
        let p = ModelParams::from_values(ModelKind::Bs, &[0.2], 0.0).unwrap();
        let v = p.char_fn(1.0, &[c(1.0, 0.0)]).unwrap();
        assert!((mc - v).norm() < 1e-3, "{mc} vs {v}");
    }

    #[test]
    fn multivariate_reduces_to_univariate() {
        let uni = ModelParams::from_values(ModelKind::Bs, &[0.3], 0.01).unwrap();
        let multi = ModelParams::from_values(ModelKind::BsMulti, &[0.09], 0.01).unwrap();
        let z = c(2.5, -1.5);
        let a = uni.char_fn(0.7, &[z]).unwrap();
        let b = multi.char_fn(0.7, &[z]).unwrap();
        assert!((a - b).norm() < 1e-15);
    }

    #[test]
    fn strip_violations() {
        let cgmy = ModelParams::from_values(ModelKind::Cgmy, &[0.5, 5.0, 2.0, 1.1], 0.0).unwrap();
        assert!(matches!(cgmy.char_fn(1.0, &[c(1.0, -2.5)]), Err(ModelError::StripViolation { .. })));
        assert!(cgmy.char_fn(1.0, &[c(1.0, -1.5)]).is_ok());
        let nig = ModelParams::from_values(ModelKind::Nig, &[0.5, 3.0, -0.5], 0.0).unwrap();
        assert!(matches!(nig.char_fn(1.0, &[c(1.0, -3.6)]), Err(ModelError::StripViolation { .. })));
    }

    #[test]
    fn invalid_parameters() {
        assert!(ModelParams::from_values(ModelKind::Bs, &[0.0], 0.0).is_err());
        assert!(ModelParams::from_values(ModelKind::BsMulti, &[0.04, 0.05, 0.04], 0.0).is_err());
        assert!(ModelParams::from_values(ModelKind::Cgmy, &[1.0, 5.0, 0.5, 1.1], 0.0).is_err());
        assert!(ModelParams::from_values(ModelKind::Nig, &[1.0, 1.0, 0.5], 0.0).is_err());
        assert!(ModelParams::from_values(ModelKind::Heston, &[0.04, 2.0, 0.01, 0.3, 0.0], 0.0).is_err());
        assert!(ModelParams::from_values(ModelKind::Merton, &[0.2, -0.5, 0.3], 0.0).is_err());
        assert!(ModelParams::from_values(ModelKind::Bs, &[0.2], -0.01).is_err());
    }

    #[test]
    fn implied_variances() {
        let nig = ModelParams::from_values(ModelKind::Nig, &[1.0, 2.0, 0.0], 0.0).unwrap();
        assert!((implied_variance(&nig).unwrap() - 0.5).abs() < 1e-15);
        let cgmy = ModelParams::from_values(ModelKind::Cgmy, &[1.0, 10.0, 10.0, 1.5], 0.0).unwrap();
        let expected = 2.0 * std::f64::consts::PI.sqrt() / 10f64.sqrt();
        assert!((implied_variance(&cgmy).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.121_00).abs() < 1e-5);
        let bs = ModelParams::from_values(ModelKind::Bs, &[0.2], 0.0).unwrap();
        assert!((implied_variance(&bs).unwrap() - 0.04).abs() < 1e-16);
        let cgmy0 = ModelParams::from_values(ModelKind::Cgmy, &[1.0, 0.0, 10.0, 1.5], 0.0).unwrap();
        assert!(implied_variance(&cgmy0).is_err());
    }

    #[test]
    fn nig_variance_monte_carlo() {
        // NIG(alpha, beta, delta) as a normal variance-mean mixture with an
        // inverse Gaussian mixing variable V ~ IG(delta/gamma, delta^2).
        use rand_distr::Distribution;
        let (alpha, beta, delta) = (2.0f64, 0.0f64, 1.0f64);
        let gam = (alpha * alpha - beta * beta).sqrt();
        let (mu, lam) = (delta / gam, delta * delta);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let nu: f64 = rand_distr::StandardNormal.sample(&mut rng);
            let y = nu * nu;
            let x = mu + mu * mu * y / (2.0 * lam) - mu / (2.0 * lam) * (4.0 * mu * lam * y + mu * mu * y * y).sqrt();
            let u: f64 = rng.random();
            let v = if u <= mu / (mu + x) { x } else { mu * mu / x };
            let w: f64 = rand_distr::StandardNormal.sample(&mut rng);
            xs.push(beta * v + v.sqrt() * w);
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.5).abs() < 1e-2, "{var}");
    }

    fn cgmy_box(m: Interval) -> ParamBox {
        ParamBox {
            kind: ModelKind::Cgmy,
            spot: Interval::new(0.5, 2.0),
            strike: Interval::point(1.0),
            maturity: Interval::new(0.1, 1.5),
            model: vec![Interval::new(1e-5, 1.0), Interval::new(0.0, 25.0), m, Interval::point(1.1)],
            strip_width: 0.5,
            variance_bounds: (1e-4, 0.64),
            rate: 0.0,
        }
    }

    fn nig_box(alpha: Interval, beta: Interval) -> ParamBox {
        ParamBox {
            kind: ModelKind::Nig,
            spot: Interval::new(0.5, 2.0),
            strike: Interval::point(1.0),
            maturity: Interval::new(0.1, 1.5),
            model: vec![Interval::new(0.2, 1.0), alpha, beta],
            strip_width: 0.5,
            variance_bounds: (1e-4, 0.64),
            rate: 0.0,
        }
    }

    #[test]
    fn cgmy_box_strip_condition() {
        let ok = validate_box(&cgmy_box(Interval::new(2.0, 30.0)));
        assert!(ok.is_empty(), "{ok:?}");
        let table = validate_box(&cgmy_box(Interval::new(0.0, 30.0)));
        assert!(table.iter().any(|v| v.constraint == "M >= 1 + 2R" && !v.infeasible));
        assert!(table.iter().all(|v| !v.infeasible));
        let dead = validate_box(&cgmy_box(Interval::new(0.0, 1.5)));
        assert!(dead.iter().any(|v| v.constraint == "M >= 1 + 2R" && v.infeasible));
    }

    #[test]
    fn nig_table_box_needs_rejection() {
        let v = validate_box(&nig_box(Interval::new(1e-5, 3.0), Interval::new(-3.0, 3.0)));
        let gap = v.iter().find(|v| v.constraint == "alpha - beta > 2R + 1").expect("reported");
        assert!(!gap.infeasible);
        assert!(v.iter().all(|v| !v.infeasible), "{v:?}");
    }

    #[test]
    fn heston_feller_at_worst_corner() {
        let b = ParamBox {
            kind: ModelKind::Heston,
            spot: Interval::new(0.5, 2.0),
            strike: Interval::point(1.0),
            maturity: Interval::new(0.1, 1.5),
            model: vec![
                Interval::new(0.04, 0.09),
                Interval::point(2.0),
                Interval::new(0.15 * 0.15, 0.35 * 0.35),
                Interval::point(0.15),
                Interval::new(-1.0, 1.0),
            ],
            strip_width: 0.5,
            variance_bounds: (1e-4, 0.64),
            rate: 0.0,
        };
        assert!(validate_box(&b).is_empty());
    }

    #[test]
    fn eta_selection() {
        let eta = select_eta(&cgmy_box(Interval::new(2.0, 30.0)), PayoffKind::Call, DEFAULT_ETA).unwrap();
        assert!((eta + 1.5).abs() < 1e-15);
        let eta = select_eta(&cgmy_box(Interval::new(0.0, 30.0)), PayoffKind::Call, DEFAULT_ETA).unwrap();
        assert!((eta + 1.5).abs() < 1e-15);
        // max(beta - alpha) = 1 - 5 = -4
        let eta = select_eta(&nig_box(Interval::new(5.0, 6.0), Interval::new(-1.0, 1.0)), PayoffKind::Call, DEFAULT_ETA).unwrap();
        assert!((eta + 2.5).abs() < 1e-15);
        let eta = select_eta(&nig_box(Interval::new(1e-5, 3.0), Interval::new(-3.0, 3.0)), PayoffKind::Call, DEFAULT_ETA).unwrap();
        assert!((eta + 1.5).abs() < 1e-15);
        let mut bs = cgmy_box(Interval::new(2.0, 30.0));
        bs.kind = ModelKind::Bs;
        bs.model = vec![Interval::new(0.1, 0.9)];
        assert_eq!(select_eta(&bs, PayoffKind::Call, DEFAULT_ETA).unwrap(), -1.5);
        assert!(select_eta(&bs, PayoffKind::Put, DEFAULT_ETA).is_err());
        assert!(select_eta(&cgmy_box(Interval::new(2.0, 30.0)), PayoffKind::Put, DEFAULT_ETA).is_err());
    }

    #[test]
    fn admits_enforces_joint_constraints() {
        let b = nig_box(Interval::new(1e-5, 3.0), Interval::new(-3.0, 3.0));
        let p = |a: f64, be: f64| ParamPoint { spot: 1.0, strike: 1.0, maturity: 1.0, model: vec![0.5, a, be] };
        assert!(b.admits(&p(3.0, 0.0)).is_ok());
        assert!(b.admits(&p(2.5, 0.8)).is_err());
        assert!(b.admits(&p(1.0, -1.5)).is_err());
    }

    #[test]
    fn ids_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.id().parse::<ModelKind>().unwrap(), k);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conjugate_symmetry_on_strip(seed in 0u64..10_000, xi in -60.0f64..60.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for kind in [ModelKind::Bs, ModelKind::Merton, ModelKind::Cgmy, ModelKind::Nig, ModelKind::Heston] {
                let p = random_params(kind, &mut rng);
                let (lo, hi) = p.model().strip();
                let eta = if lo < -1.5 && -1.5 < hi { -1.5 } else { 0.5 * (lo + hi) };
                let a = p.char_fn(0.8, &[c(-xi, eta)]).unwrap();
                let b = p.char_fn(0.8, &[c(xi, eta)]).unwrap().conj();
                prop_assert!((a - b).norm() <= 1e-13 * b.norm().max(1e-300) + 1e-300, "{kind}");
            }
        }
    }

    #[test]
    fn decay_along_the_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [ModelKind::Bs] {
            for _ in 0..20 {
                let p = random_params(kind, &mut rng);
                let t = rng.random_range(0.5..1.5);
                let mut last = f64::INFINITY;
                for k in 0..=40 {
                    let xi = 25.0 + k as f64;
                    let v = p.char_fn(t, &[c(xi, -1.5)]).unwrap().norm();
                    assert!(v <= last, "{kind}: |phi| increased at {xi}");
                    last = v;
                }
            }
        }
        for kind in [ModelKind::Merton, ModelKind::Cgmy, ModelKind::Nig, ModelKind::Heston] {
            for _ in 0..20 {
                let p = random_params(kind, &mut rng);
                let (lo, hi) = p.model().strip();
                let eta = if lo < -1.5 && -1.5 < hi { -1.5 } else { 0.5 * (lo + hi) };
                let near = p.char_fn(1.0, &[c(0.0, eta)]).unwrap().norm();
                let far = p.char_fn(1.0, &[c(200.0, eta)]).unwrap().norm();
                assert!(far < near, "{kind}: {far} >= {near}");
            }
        }
    }
}
