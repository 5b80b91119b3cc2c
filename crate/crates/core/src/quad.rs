//! Frequency grids and adaptive Gauss-Kronrod quadrature.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid quadrature settings: {0}")]
    InvalidSettings(String),
    #[error("tolerance not met after {intervals} intervals (estimate {estimate:e}, error {error:e})")]
    ToleranceNotMet {
        estimate: f64,
        error: f64,
        intervals: usize,
    },
    #[error("integrand returned a non-finite value at x = {x}")]
    NonFiniteIntegrand { x: f64 },
}

/// Discretized integration domain on the half line, at damping offset `eta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqGrid {
    lo: f64,
    hi: f64,
    eta: f64,
    nodes: Vec<f64>,
}

impl FreqGrid {
    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn count(&self) -> usize {
        self.nodes.len()
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes.len() - 1) as f64
    }

    /// Length of the continuous interval the grid discretizes.
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Equally spaced nodes on `[lo, hi]`; the end points are hit exactly.
pub fn uniform_nodes(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>, QuadError> {
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(QuadError::InvalidBounds(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    if count < 2 {
        return Err(QuadError::InvalidBounds(format!("need at least 2 nodes, got {count}")));
    }
    let step = (hi - lo) / (count - 1) as f64;
    let mut nodes: Vec<f64> = (0..count).map(|i| lo + i as f64 * step).collect();
    nodes[count - 1] = hi;
    Ok(nodes)
}

pub fn make_uniform_grid(lo: f64, hi: f64, count: usize, eta: f64) -> Result<FreqGrid, QuadError> {
    if lo < 0.0 {
        return Err(QuadError::InvalidBounds(format!(
            "half-line grid must start at lo >= 0, got {lo}"
        )));
    }
    if !eta.is_finite() {
        return Err(QuadError::InvalidBounds(format!("eta must be finite, got {eta}")));
    }
    let nodes = uniform_nodes(lo, hi, count)?;
    Ok(FreqGrid { lo, hi, eta, nodes })
}

const ROUNDOFF_FLOOR: f64 = 50.0 * f64::EPSILON;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadSettings {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadSettings {
    fn default() -> Self {
        QuadSettings {
            abs_tol: 1e-14,
            rel_tol: 1e-12,
            max_intervals: 200_000,
        }
    }
}

impl QuadSettings {
    pub fn validate(&self) -> Result<(), QuadError> {
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) || self.max_intervals == 0 {
            return Err(QuadError::InvalidSettings(format!("{self:?}")));
        }
        Ok(())
    }
}

// Kronrod 15-point abscissae (positive half) with the embedded 7-point Gauss rule.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

const INITIAL_PIECES: usize = 10;

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    /// Kronrod estimate of the integral of `|f|`, for the roundoff floor.
    magnitude: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn checked<E, F>(f: &mut F, x: f64) -> Result<f64, E>
where
    E: From<QuadError>,
    F: FnMut(f64) -> Result<f64, E>,
{
    let y = f(x)?;
    if y.is_finite() {
        Ok(y)
    } else {
        Err(QuadError::NonFiniteIntegrand { x }.into())
    }
}

fn kronrod15<E, F>(f: &mut F, a: f64, b: f64) -> Result<Segment, E>
where
    E: From<QuadError>,
    F: FnMut(f64) -> Result<f64, E>,
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = checked(f, center)?;
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    let mut magnitude = fc.abs() * WGK[7];
    for j in 0..7 {
        let dx = half * XGK[j];
        let (lo, hi) = (checked(f, center - dx)?, checked(f, center + dx)?);
        let pair = lo + hi;
        kronrod += WGK[j] * pair;
        magnitude += WGK[j] * (lo.abs() + hi.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Ok(Segment {
        a,
        b,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
        magnitude: magnitude * half.abs(),
    })
}

/// Adaptive Gauss-Kronrod (7-15) quadrature with global bisection of the
/// worst interval, for integrands that may fail.
///
/// Converges when the summed error estimate is at most
/// `max(abs_tol, rel_tol * |I|)`, or when it has reached the roundoff floor
/// `50 eps int |f|` below which cancellation makes further refinement useless.
pub fn try_integrate_adaptive<E, F>(
    mut f: F,
    lo: f64,
    hi: f64,
    settings: &QuadSettings,
) -> Result<f64, E>
where
    E: From<QuadError>,
    F: FnMut(f64) -> Result<f64, E>,
{
    settings.validate()?;
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(QuadError::InvalidBounds(format!("need lo < hi, got [{lo}, {hi}]")).into());
    }
    let pieces = INITIAL_PIECES.min(settings.max_intervals);
    let step = (hi - lo) / pieces as f64;
    let mut heap = BinaryHeap::with_capacity(2 * pieces);
    for i in 0..pieces {
        let a = lo + i as f64 * step;
        let b = if i + 1 == pieces { hi } else { lo + (i + 1) as f64 * step };
        heap.push(kronrod15(&mut f, a, b)?);
    }
    loop {
        let value: f64 = heap.iter().map(|s| s.value).sum();
        let error: f64 = heap.iter().map(|s| s.error).sum();
        let magnitude: f64 = heap.iter().map(|s| s.magnitude).sum();
        let target = settings
            .abs_tol
            .max(settings.rel_tol * value.abs())
            .max(ROUNDOFF_FLOOR * magnitude);
        if error <= target {
            return Ok(value);
        }
        let not_met = QuadError::ToleranceNotMet {
            estimate: value,
            error,
            intervals: heap.len(),
        };
        if heap.len() >= settings.max_intervals {
            return Err(not_met.into());
        }
        // Refine a batch of the worst intervals before re-summing.
        let batch = (heap.len() / 10).max(1).min(settings.max_intervals - heap.len());
        for _ in 0..batch {
            let worst = heap.pop().expect("heap is never empty");
            let mid = 0.5 * (worst.a + worst.b);
            if mid <= worst.a || mid >= worst.b {
                return Err(not_met.into());
            }
            heap.push(kronrod15(&mut f, worst.a, mid)?);
            heap.push(kronrod15(&mut f, mid, worst.b)?);
        }
    }
}

/// [`try_integrate_adaptive`] for infallible integrands.
pub fn integrate_adaptive<F>(mut f: F, lo: f64, hi: f64, settings: &QuadSettings) -> Result<f64, QuadError>
where
    F: FnMut(f64) -> f64,
{
    try_integrate_adaptive(|x| Ok::<f64, QuadError>(f(x)), lo, hi, settings)
}

/// Integrates real and imaginary parts separately.
pub fn try_integrate_complex<E, F>(
    mut f: F,
    lo: f64,
    hi: f64,
    settings: &QuadSettings,
) -> Result<Complex64, E>
where
    E: From<QuadError>,
    F: FnMut(f64) -> Result<Complex64, E>,
{
    let re = try_integrate_adaptive(|x| f(x).map(|z| z.re), lo, hi, settings)?;
    let im = try_integrate_adaptive(|x| f(x).map(|z| z.im), lo, hi, settings)?;
    Ok(Complex64::new(re, im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tight() -> QuadSettings {
        QuadSettings::default()
    }

    #[test]
    fn paper_grid_spacing() {
        let g = make_uniform_grid(0.0, 65.0, 1714, -1.5).unwrap();
        assert_eq!(g.count(), 1714);
        assert_eq!(g.nodes()[0], 0.0);
        assert_eq!(g.nodes()[1713], 65.0);
        assert!((g.spacing() - 65.0 / 1713.0).abs() < 1e-15);
        assert!((g.spacing() - 0.037_945_125_5).abs() < 1e-10);
        assert!(g.nodes().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn small_grids() {
        assert_eq!(make_uniform_grid(0.0, 1.0, 2, 0.0).unwrap().nodes(), &[0.0, 1.0]);
        let g = make_uniform_grid(0.0, 10.0, 11, 0.0).unwrap();
        let expected: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(g.nodes(), expected.as_slice());
    }

    #[test]
    fn grid_rejects_bad_bounds() {
        assert!(matches!(make_uniform_grid(1.0, 1.0, 5, 0.0), Err(QuadError::InvalidBounds(_))));
        assert!(matches!(make_uniform_grid(2.0, 1.0, 5, 0.0), Err(QuadError::InvalidBounds(_))));
        assert!(matches!(make_uniform_grid(0.0, 1.0, 1, 0.0), Err(QuadError::InvalidBounds(_))));
        assert!(matches!(make_uniform_grid(-1.0, 1.0, 3, 0.0), Err(QuadError::InvalidBounds(_))));
    }

    #[test]
    fn grid_is_deterministic() {
        let a = make_uniform_grid(0.0, 65.0, 1714, -1.5).unwrap();
        let b = make_uniform_grid(0.0, 65.0, 1714, -1.5).unwrap();
        assert!(a.nodes().iter().zip(b.nodes()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn polynomial_exactness() {
        let v = integrate_adaptive(|x| x, 0.0, 1.0, &tight()).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn damped_cosine() {
        // Antiderivative of e^{-x} cos(10x) on [0, inf) is 1/101; the tail past 65 is ~e^{-65}.
        let v = integrate_adaptive(|x| (-x).exp() * (10.0 * x).cos(), 0.0, 65.0, &tight()).unwrap();
        assert!((v - 1.0 / 101.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn half_gaussian() {
        let v = integrate_adaptive(|x| (-0.5 * x * x).exp(), 0.0, 65.0, &tight()).unwrap();
        let exact = (std::f64::consts::PI / 2.0).sqrt();
        assert!((v - exact).abs() < 1e-12, "{v}");
    }

    #[test]
    fn complex_parts_integrate_separately() {
        let v = try_integrate_complex(
            |x| Ok::<_, QuadError>(Complex64::new(0.0, x).exp()),
            0.0,
            std::f64::consts::PI,
            &tight(),
        )
        .unwrap();
        assert!(v.re.abs() < 1e-13 && (v.im - 2.0).abs() < 1e-13);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let s = QuadSettings {
            abs_tol: 1e-14,
            rel_tol: 1e-14,
            max_intervals: 12,
        };
        let r = integrate_adaptive(|x| (50.0 * x).sin().abs(), 0.0, 10.0, &s);
        assert!(matches!(r, Err(QuadError::ToleranceNotMet { .. })), "{r:?}");
    }

    #[test]
    fn non_finite_is_reported() {
        let r = integrate_adaptive(|x| if x > 0.5 { f64::NAN } else { 1.0 }, 0.0, 1.0, &tight());
        assert!(matches!(r, Err(QuadError::NonFiniteIntegrand { .. })));
    }

    #[test]
    fn bad_settings() {
        let s = QuadSettings {
            abs_tol: 0.0,
            ..QuadSettings::default()
        };
        assert!(matches!(integrate_adaptive(|x| x, 0.0, 1.0, &s), Err(QuadError::InvalidSettings(_))));
    }

    fn poly(c: &[f64], x: f64) -> f64 {
        c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linear_in_integrand(
            f in proptest::collection::vec(-1.0f64..1.0, 11),
            g in proptest::collection::vec(-1.0f64..1.0, 11),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let s = tight();
            let ifg = integrate_adaptive(|x| a * poly(&f, x) + b * poly(&g, x), -1.0, 1.5, &s).unwrap();
            let i_f = integrate_adaptive(|x| poly(&f, x), -1.0, 1.5, &s).unwrap();
            let i_g = integrate_adaptive(|x| poly(&g, x), -1.0, 1.5, &s).unwrap();
            prop_assert!((ifg - (a * i_f + b * i_g)).abs() < 1e-11);
        }

        #[test]
        fn additive_in_interval(b in 0.01f64..4.99) {
            let s = tight();
            let h = |x: f64| (-x).exp() * (3.0 * x).sin();
            let whole = integrate_adaptive(h, 0.0, 5.0, &s).unwrap();
            let left = integrate_adaptive(h, 0.0, b, &s).unwrap();
            let right = integrate_adaptive(h, b, 5.0, &s).unwrap();
            prop_assert!((whole - left - right).abs() <= 2.0 * s.abs_tol + 1e-15);
        }
    }
}
