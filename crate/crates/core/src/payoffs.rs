//! Generalized Fourier transforms of exponentially damped payoffs.
//!
//! All payoffs are functions of the log-asset `x`. For a frequency
//! `z = xi + i*eta` the transform is `int e^{i xi x} e^{eta x} f_K(x) dx`,
//! which exists for `eta` inside [`eta_range`].

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance from a pole of the call/put transform below which `eta` is rejected.
pub const POLE_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PayoffError {
    #[error("invalid payoff: {0}")]
    Invalid(String),
    #[error("damping {eta} outside the admissible interval ({lower}, {upper}) for {kind}")]
    InadmissibleEta {
        kind: PayoffKind,
        eta: f64,
        lower: f64,
        upper: f64,
    },
    #[error("frequency {z} hits a pole of the {kind} transform")]
    Pole { kind: PayoffKind, z: Complex64 },
    #[error("unknown payoff id {0:?}")]
    UnknownId(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    Call,
    Put,
    DigitalDownOut,
    AssetOrNothingDownOut,
    BasketMinCall,
}

impl PayoffKind {
    pub const ALL: [PayoffKind; 5] = [
        PayoffKind::Call,
        PayoffKind::Put,
        PayoffKind::DigitalDownOut,
        PayoffKind::AssetOrNothingDownOut,
        PayoffKind::BasketMinCall,
    ];

    pub fn id(self) -> &'static str {
        match self {
            PayoffKind::Call => "call",
            PayoffKind::Put => "put",
            PayoffKind::DigitalDownOut => "digital_down_out",
            PayoffKind::AssetOrNothingDownOut => "asset_or_nothing_down_out",
            PayoffKind::BasketMinCall => "basket_min_call",
        }
    }

    /// Payoffs whose damping must satisfy `eta < -1`.
    pub fn is_call_type(self) -> bool {
        matches!(
            self,
            PayoffKind::Call | PayoffKind::AssetOrNothingDownOut | PayoffKind::BasketMinCall
        )
    }
}

impl fmt::Display for PayoffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for PayoffKind {
    type Err = PayoffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PayoffKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| PayoffError::UnknownId(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PayoffSpec {
    kind: PayoffKind,
    strike: f64,
    dim: usize,
}

impl PayoffSpec {
    pub fn new(kind: PayoffKind, strike: f64, dim: usize) -> Result<Self, PayoffError> {
        if !(strike > 0.0 && strike.is_finite()) {
            return Err(PayoffError::Invalid(format!("strike must be positive, got {strike}")));
        }
        match (kind, dim) {
            (_, 0) => return Err(PayoffError::Invalid("dimension must be at least 1".into())),
            (PayoffKind::BasketMinCall, _) | (_, 1) => {}
            (k, d) => {
                return Err(PayoffError::Invalid(format!("{k} is single-asset, got dim {d}")));
            }
        }
        Ok(PayoffSpec { kind, strike, dim })
    }

    pub fn single(kind: PayoffKind, strike: f64) -> Result<Self, PayoffError> {
        Self::new(kind, strike, 1)
    }

    pub fn kind(&self) -> PayoffKind {
        self.kind
    }

    pub fn strike(&self) -> f64 {
        self.strike
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Payoff value at log-asset coordinates `x`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let k = self.strike;
        match self.kind {
            PayoffKind::Call => (x[0].exp() - k).max(0.0),
            PayoffKind::Put => (k - x[0].exp()).max(0.0),
            PayoffKind::DigitalDownOut => {
                if x[0] > k.ln() {
                    1.0
                } else {
                    0.0
                }
            }
            PayoffKind::AssetOrNothingDownOut => {
                if x[0] > k.ln() {
                    x[0].exp()
                } else {
                    0.0
                }
            }
            PayoffKind::BasketMinCall => {
                let m = x.iter().copied().fold(f64::INFINITY, f64::min);
                (m.exp() - k).max(0.0)
            }
        }
    }
}

/// Open interval of admissible damping values, per coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtaRange {
    pub lower: f64,
    pub upper: f64,
}

impl EtaRange {
    pub fn contains(&self, eta: f64) -> bool {
        self.lower < eta && eta < self.upper
    }
}

pub fn eta_range(payoff: &PayoffSpec) -> EtaRange {
    let (lower, upper) = match payoff.kind {
        PayoffKind::Call | PayoffKind::AssetOrNothingDownOut | PayoffKind::BasketMinCall => {
            (f64::NEG_INFINITY, -1.0)
        }
        PayoffKind::Put => (0.0, f64::INFINITY),
        PayoffKind::DigitalDownOut => (f64::NEG_INFINITY, 0.0),
    };
    EtaRange { lower, upper }
}

/// Checks a damping value against the payoff's range and the call/put pole guard.
pub fn check_eta(payoff: &PayoffSpec, eta: f64) -> Result<(), PayoffError> {
    let range = eta_range(payoff);
    if !range.contains(eta) {
        return Err(PayoffError::InadmissibleEta {
            kind: payoff.kind,
            eta,
            lower: range.lower,
            upper: range.upper,
        });
    }
    let guarded = matches!(payoff.kind, PayoffKind::Call | PayoffKind::Put);
    if guarded && (eta.abs() < POLE_GUARD || (eta + 1.0).abs() < POLE_GUARD) {
        return Err(PayoffError::Pole {
            kind: payoff.kind,
            z: Complex64::new(0.0, eta),
        });
    }
    Ok(())
}

/// `K^w` for real `K > 0`, via the real logarithm.
fn strike_power(log_k: f64, w: Complex64) -> Complex64 {
    (w * log_k).exp()
}

fn nonzero(kind: PayoffKind, z: Complex64, d: Complex64) -> Result<Complex64, PayoffError> {
    if d == Complex64::new(0.0, 0.0) {
        Err(PayoffError::Pole { kind, z })
    } else {
        Ok(d)
    }
}

/// Generalized Fourier transform of the payoff at `z` (one entry per asset).
pub fn payoff_ft(payoff: &PayoffSpec, z: &[Complex64]) -> Result<Complex64, PayoffError> {
    if z.len() != payoff.dim {
        return Err(PayoffError::Invalid(format!(
            "frequency has {} coordinates, payoff dimension is {}",
            z.len(),
            payoff.dim
        )));
    }
    for zj in z {
        check_eta(payoff, zj.im)?;
    }
    let kind = payoff.kind;
    let log_k = payoff.strike.ln();
    let one = Complex64::new(1.0, 0.0);
    // s = i*xi + eta
    let s = |zj: &Complex64| Complex64::new(zj.im, zj.re);
    match kind {
        PayoffKind::Call | PayoffKind::Put => {
            let s0 = s(&z[0]);
            let den = nonzero(kind, z[0], s0 * (s0 + one))?;
            Ok(strike_power(log_k, s0 + one) / den)
        }
        PayoffKind::DigitalDownOut => {
            let s0 = s(&z[0]);
            let den = nonzero(kind, z[0], s0)?;
            Ok(-strike_power(log_k, s0) / den)
        }
        PayoffKind::AssetOrNothingDownOut => {
            let s0 = s(&z[0]);
            let den = nonzero(kind, z[0], s0 + one)?;
            Ok(-strike_power(log_k, s0 + one) / den)
        }
        PayoffKind::BasketMinCall => {
            let total: Complex64 = z.iter().map(s).sum();
            let prod: Complex64 = z.iter().map(s).product();
            let den = nonzero(kind, z[0], prod * (one + total))?;
            let sign = if payoff.dim.is_multiple_of(2) { 1.0 } else { -1.0 };
            Ok(-sign * strike_power(log_k, one + total) / den)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate_adaptive, QuadSettings};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn spec(kind: PayoffKind, k: f64) -> PayoffSpec {
        PayoffSpec::single(kind, k).unwrap()
    }

    /// Brute-force damped transform by quadrature over the payoff's support.
    fn brute_force(p: &PayoffSpec, xi: f64, eta: f64) -> Complex64 {
        let s = QuadSettings {
            abs_tol: 1e-13,
            rel_tol: 1e-13,
            max_intervals: 100_000,
        };
        let lk = p.strike().ln();
        let (lo, hi) = match p.kind() {
            PayoffKind::Put => (lk - 60.0 / eta, lk),
            _ => (lk, lk + 60.0 / (-eta - if p.kind() == PayoffKind::DigitalDownOut { 0.0 } else { 1.0 })),
        };
        let f = |x: f64| p.value(&[x]) * (eta * x).exp();
        let re = integrate_adaptive(|x| f(x) * (xi * x).cos(), lo, hi, &s).unwrap();
        let im = integrate_adaptive(|x| f(x) * (xi * x).sin(), lo, hi, &s).unwrap();
        c(re, im)
    }

    #[test]
    fn ranges_match_table() {
        assert_eq!(eta_range(&spec(PayoffKind::Call, 1.0)).upper, -1.0);
        assert_eq!(eta_range(&spec(PayoffKind::Call, 1.0)).lower, f64::NEG_INFINITY);
        assert_eq!(eta_range(&spec(PayoffKind::Put, 1.0)).lower, 0.0);
        assert_eq!(eta_range(&spec(PayoffKind::Put, 1.0)).upper, f64::INFINITY);
        let basket = PayoffSpec::new(PayoffKind::BasketMinCall, 1.0, 2).unwrap();
        assert_eq!(eta_range(&basket).upper, -1.0);
    }

    #[test]
    fn closed_forms_at_zero_frequency() {
        let v = payoff_ft(&spec(PayoffKind::Call, 1.0), &[c(0.0, -1.5)]).unwrap();
        assert!((v - c(4.0 / 3.0, 0.0)).norm() < 1e-15);
        let v = payoff_ft(&spec(PayoffKind::Put, 1.0), &[c(0.0, 1.0)]).unwrap();
        assert!((v - c(0.5, 0.0)).norm() < 1e-15);
        let v = payoff_ft(&spec(PayoffKind::DigitalDownOut, 1.0), &[c(0.0, -1.0)]).unwrap();
        assert!((v - c(1.0, 0.0)).norm() < 1e-15);
        let basket = PayoffSpec::new(PayoffKind::BasketMinCall, 1.0, 2).unwrap();
        let v = payoff_ft(&basket, &[c(0.0, -1.5), c(0.0, -1.5)]).unwrap();
        assert!((v - c(1.0 / 4.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn call_oracle_integral() {
        // int_0^inf e^{-0.5x} - e^{-1.5x} dx = 2 - 2/3
        let p = spec(PayoffKind::Call, 1.0);
        let bf = brute_force(&p, 0.0, -1.5);
        assert!((bf.re - 4.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn basket_matches_two_dimensional_integral() {
        // e^{eta.x} (min(e^x1, e^x2) - 1)^+ integrated over the positive quadrant
        // (the payoff vanishes elsewhere for K = 1).
        let s = QuadSettings {
            abs_tol: 1e-12,
            rel_tol: 1e-12,
            max_intervals: 10_000,
        };
        let basket = PayoffSpec::new(PayoffKind::BasketMinCall, 1.0, 2).unwrap();
        let (xi1, xi2, eta) = (0.7, -0.4, -1.5);
        let part = |trig: fn(f64) -> f64| {
            integrate_adaptive(
                |x1| {
                    let g = |x2: f64| basket.value(&[x1, x2]) * (eta * (x1 + x2)).exp() * trig(xi1 * x1 + xi2 * x2);
                    // split at the kink x2 = x1
                    integrate_adaptive(g, 0.0, x1, &s).unwrap() + integrate_adaptive(g, x1, 40.0, &s).unwrap()
                },
                0.0,
                40.0,
                &s,
            )
            .unwrap()
        };
        let re = part(f64::cos);
        let im = part(f64::sin);
        let v = payoff_ft(&basket, &[c(xi1, eta), c(xi2, eta)]).unwrap();
        assert!((v - c(re, im)).norm() < 1e-8, "{v} vs {re} {im}");
    }

    #[test]
    fn inadmissible_and_pole() {
        let call = spec(PayoffKind::Call, 1.0);
        assert!(matches!(
            payoff_ft(&call, &[c(1.0, -0.5)]),
            Err(PayoffError::InadmissibleEta { .. })
        ));
        let put = spec(PayoffKind::Put, 1.0);
        assert!(matches!(payoff_ft(&put, &[c(1.0, 1e-13)]), Err(PayoffError::Pole { .. })));
        assert!(matches!(check_eta(&call, -1.0 - 1e-13), Err(PayoffError::Pole { .. })));
        assert!(PayoffSpec::new(PayoffKind::Call, 1.0, 2).is_err());
        assert!(PayoffSpec::single(PayoffKind::Call, 0.0).is_err());
        assert!(payoff_ft(&call, &[c(0.0, -1.5), c(0.0, -1.5)]).is_err());
    }

    #[test]
    fn ids_round_trip() {
        for k in PayoffKind::ALL {
            assert_eq!(k.id().parse::<PayoffKind>().unwrap(), k);
        }
        assert!("straddle".parse::<PayoffKind>().is_err());
    }

    fn kind_and_eta() -> impl Strategy<Value = (PayoffKind, f64)> {
        prop_oneof![
            (-3.0f64..-1.1).prop_map(|e| (PayoffKind::Call, e)),
            (0.1f64..3.0).prop_map(|e| (PayoffKind::Put, e)),
            (-3.0f64..-0.1).prop_map(|e| (PayoffKind::DigitalDownOut, e)),
            (-3.0f64..-1.1).prop_map(|e| (PayoffKind::AssetOrNothingDownOut, e)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn matches_brute_force((kind, eta) in kind_and_eta(), k in 0.5f64..2.0, xi in -5.0f64..5.0) {
            let p = spec(kind, k);
            let v = payoff_ft(&p, &[c(xi, eta)]).unwrap();
            let bf = brute_force(&p, xi, eta);
            prop_assert!((v - bf).norm() <= 1e-8, "{kind}: {v} vs {bf}");
        }

        #[test]
        fn conjugate_symmetric((kind, eta) in kind_and_eta(), k in 0.5f64..2.0, xi in -20.0f64..20.0) {
            let p = spec(kind, k);
            let a = payoff_ft(&p, &[c(-xi, eta)]).unwrap();
            let b = payoff_ft(&p, &[c(xi, eta)]).unwrap().conj();
            prop_assert!((a - b).norm() <= 1e-14 * b.norm().max(1.0));
        }

        #[test]
        fn call_strike_scaling(k in 0.2f64..5.0, xi in -20.0f64..20.0, eta in -3.0f64..-1.1) {
            let z = c(xi, eta);
            let ratio = payoff_ft(&spec(PayoffKind::Call, k), &[z]).unwrap()
                / payoff_ft(&spec(PayoffKind::Call, 1.0), &[z]).unwrap();
            let expected = (Complex64::new(eta + 1.0, xi) * k.ln()).exp();
            prop_assert!((ratio - expected).norm() <= 1e-12 * expected.norm());
        }
    }
}
