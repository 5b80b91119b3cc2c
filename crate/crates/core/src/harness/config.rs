//! TOML run configuration.
//!
//! ```toml
//! format_version = 1
//! model = "bs"
//! payoff = "call"
//! seed = 20240101
//! out_dir = "out/bs"
//!
//! [grid]
//! lo = 0.0
//! hi = 65.0
//! count = 1714
//!
//! [box]
//! spot = [0.5, 2.0]
//! strike = 1.0
//! maturity = [0.1, 1.5]
//! sigma = [0.1, 0.9]
//! ```
//!
//! Every key except `model`, `seed` and the `[box]` entries has a default.
//! Box entries are either a `[lo, hi]` pair or a single fixed value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ConfigError;
use crate::eim::GreedySettings;
use crate::models::{select_eta, validate_box, Interval, ModelKind, ParamBox, DEFAULT_ETA};
use crate::payoffs::{check_eta, PayoffKind, PayoffSpec};
use crate::quad::{make_uniform_grid, FreqGrid, QuadSettings};
use crate::Execution;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub model: String,
    #[serde(default = "default_payoff")]
    pub payoff: String,
    #[serde(default = "default_cloud_size")]
    pub cloud_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub rate: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    /// Damping; derived from the box when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_strip_width")]
    pub strip_width: f64,
    #[serde(default = "default_variance_bounds")]
    pub variance_bounds: [f64; 2],
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(rename = "box")]
    pub param_box: BTreeMap<String, BoxEntry>,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub basket: BasketConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub lo: f64,
    #[serde(default = "default_grid_hi")]
    pub hi: f64,
    #[serde(default = "default_grid_count")]
    pub count: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lo: 0.0,
            hi: default_grid_hi(),
            count: default_grid_count(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxEntry {
    Fixed(f64),
    Range([f64; 2]),
}

impl BoxEntry {
    pub fn interval(self) -> Interval {
        match self {
            BoxEntry::Fixed(v) => Interval::point(v),
            BoxEntry::Range([lo, hi]) => Interval::new(lo, hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Seed of the out-of-sample draws; `seed + 1` when absent.
    #[serde(default)]
    pub test_seed: Option<u64>,
    /// COS truncation multiplier; a per-model default when absent.
    #[serde(default)]
    pub cos_l: Option<f64>,
    #[serde(default = "default_cos_n_max")]
    pub cos_n_max: usize,
    #[serde(default = "default_tail_threshold")]
    pub tail_threshold: f64,
    #[serde(default = "default_tail_far")]
    pub tail_far: f64,
    /// Absolute tolerance of the out-of-sample reference quadrature.
    #[serde(default = "default_reference_abs_tol")]
    pub reference_abs_tol: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_test: default_n_test(),
            test_seed: None,
            cos_l: None,
            cos_n_max: default_cos_n_max(),
            tail_threshold: default_tail_threshold(),
            tail_far: default_tail_far(),
            reference_abs_tol: default_reference_abs_tol(),
        }
    }
}

/// Tensor grid of the two-asset basket study: `[lo, hi] x [-hi, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasketConfig {
    #[serde(default = "default_basket_count")]
    pub count_first: usize,
    #[serde(default = "default_basket_count_second")]
    pub count_second: usize,
    #[serde(default = "default_basket_hi")]
    pub hi: f64,
    #[serde(default = "default_basket_n_test")]
    pub n_test: usize,
}

impl Default for BasketConfig {
    fn default() -> Self {
        BasketConfig {
            count_first: default_basket_count(),
            count_second: default_basket_count_second(),
            hi: default_basket_hi(),
            n_test: default_basket_n_test(),
        }
    }
}

fn default_payoff() -> String {
    "call".into()
}
fn default_cloud_size() -> usize {
    4000
}
fn default_tol() -> f64 {
    1e-10
}
fn default_m_max() -> usize {
    50
}
fn default_strip_width() -> f64 {
    0.5
}
fn default_variance_bounds() -> [f64; 2] {
    [0.01 * 0.01, 0.8 * 0.8]
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_grid_hi() -> f64 {
    65.0
}
fn default_grid_count() -> usize {
    1714
}
fn default_n_test() -> usize {
    1000
}
fn default_cos_n_max() -> usize {
    50
}
fn default_tail_threshold() -> f64 {
    1e-8
}
fn default_tail_far() -> f64 {
    130.0
}
fn default_reference_abs_tol() -> f64 {
    1e-12
}
fn default_basket_count() -> usize {
    41
}
fn default_basket_count_second() -> usize {
    81
}
fn default_basket_hi() -> f64 {
    30.0
}
fn default_basket_n_test() -> usize {
    50
}

/// Truncation multipliers of the COS comparison.
pub fn default_cos_l(kind: ModelKind) -> Option<f64> {
    match kind {
        ModelKind::Bs => Some(14.0),
        ModelKind::Heston => Some(18.0),
        ModelKind::Merton => Some(3.1),
        _ => None,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if cfg.format_version != CONFIG_VERSION {
            return Err(ConfigError::Invalid(format!(
                "format_version {} is not supported (expected {CONFIG_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_toml(&text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_kind(&self) -> Result<ModelKind, ConfigError> {
        self.model.parse().map_err(|e: crate::models::ModelError| ConfigError::Invalid(e.to_string()))
    }

    pub fn payoff_kind(&self) -> Result<PayoffKind, ConfigError> {
        self.payoff.parse().map_err(|e: crate::payoffs::PayoffError| ConfigError::Invalid(e.to_string()))
    }

    pub fn test_seed(&self) -> u64 {
        self.study.test_seed.unwrap_or(self.seed.wrapping_add(1))
    }

    /// Model dimension implied by the box (number of assets).
    pub fn dim(&self) -> Result<usize, ConfigError> {
        let kind = self.model_kind()?;
        if kind != ModelKind::BsMulti {
            return Ok(1);
        }
        let q = self.param_box.keys().filter(|k| k.starts_with('q')).count();
        (1..=4)
            .find(|d| d * (d + 1) / 2 == q)
            .ok_or_else(|| ConfigError::Invalid(format!("bs_multi needs a triangular number of q entries, got {q}")))
    }

    /// Builds the parameter box. Unknown or missing coordinates are errors.
    pub fn param_box(&self) -> Result<ParamBox, ConfigError> {
        let kind = self.model_kind()?;
        let take = |name: &str| -> Result<Interval, ConfigError> {
            let iv = self
                .param_box
                .get(name)
                .ok_or_else(|| ConfigError::Invalid(format!("[box] is missing `{name}`")))?
                .interval();
            if !iv.is_valid() {
                return Err(ConfigError::Invalid(format!("[box] `{name}` = [{}, {}] is not an interval", iv.lo, iv.hi)));
            }
            Ok(iv)
        };
        let names: Vec<&str> = if kind == ModelKind::BsMulti {
            let d = self.dim()?;
            kind.param_names()[..d * (d + 1) / 2].to_vec()
        } else {
            kind.param_names().to_vec()
        };
        for key in self.param_box.keys() {
            let known = matches!(key.as_str(), "spot" | "strike" | "maturity") || names.contains(&key.as_str());
            if !known {
                return Err(ConfigError::Invalid(format!("[box] key `{key}` is not a {kind} coordinate")));
            }
        }
        let model = names.iter().map(|n| take(n)).collect::<Result<Vec<_>, _>>()?;
        Ok(ParamBox {
            kind,
            spot: take("spot")?,
            strike: take("strike")?,
            maturity: take("maturity")?,
            model,
            strip_width: self.strip_width,
            variance_bounds: (self.variance_bounds[0], self.variance_bounds[1]),
            rate: self.rate,
        })
    }

    /// The configured damping, or the box-derived default.
    pub fn eta(&self) -> Result<f64, ConfigError> {
        let b = self.param_box()?;
        let payoff = self.payoff_kind()?;
        match self.eta {
            Some(eta) => {
                let spec = PayoffSpec::new(payoff, b.strike.lo.max(f64::MIN_POSITIVE), self.dim()?)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                check_eta(&spec, eta).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                Ok(eta)
            }
            None => select_eta(&b, payoff, DEFAULT_ETA).map_err(|e| ConfigError::Invalid(e.to_string())),
        }
    }

    pub fn freq_grid(&self) -> Result<FreqGrid, ConfigError> {
        let eta = self.eta()?;
        make_uniform_grid(self.grid.lo, self.grid.hi, self.grid.count, eta).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn greedy_settings(&self, exec: Execution) -> GreedySettings {
        GreedySettings {
            tol: self.tol,
            m_max: self.m_max,
            exec,
        }
    }

    pub fn reference_quad(&self) -> QuadSettings {
        QuadSettings {
            abs_tol: self.study.reference_abs_tol,
            ..QuadSettings::default()
        }
    }

    pub fn cos_l(&self) -> Result<f64, ConfigError> {
        let kind = self.model_kind()?;
        self.study
            .cos_l
            .or_else(|| default_cos_l(kind))
            .ok_or_else(|| ConfigError::Invalid(format!("no COS truncation multiplier for {kind}; set study.cos_l")))
    }

    /// Full validation: ids, scalar settings, box feasibility and damping.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.payoff_kind()?;
        if self.cloud_size == 0 {
            return invalid("cloud_size must be at least 1".into());
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return invalid(format!("tol must be a nonnegative number, got {}", self.tol));
        }
        if self.m_max == 0 {
            return invalid("m_max must be at least 1".into());
        }
        if !self.rate.is_finite() {
            return invalid("rate must be finite".into());
        }
        if !(self.strip_width >= 0.0 && self.strip_width.is_finite()) {
            return invalid(format!("strip_width must be nonnegative, got {}", self.strip_width));
        }
        let [vlo, vhi] = self.variance_bounds;
        if !(0.0 <= vlo && vlo <= vhi) {
            return invalid(format!("variance_bounds [{vlo}, {vhi}] are not an interval"));
        }
        let s = &self.study;
        if s.n_test == 0 || s.cos_n_max == 0 {
            return invalid("study.n_test and study.cos_n_max must be positive".into());
        }
        if !(s.tail_threshold > 0.0 && s.tail_far >= self.grid.hi && s.reference_abs_tol > 0.0) {
            return invalid("study needs tail_threshold > 0, tail_far >= grid.hi and reference_abs_tol > 0".into());
        }
        let b = self.param_box()?;
        let infeasible: Vec<String> = validate_box(&b).into_iter().filter(|v| v.infeasible).map(|v| v.to_string()).collect();
        if !infeasible.is_empty() {
            return Err(ConfigError::InfeasibleBox(infeasible));
        }
        if self.dim()? == 1 {
            self.freq_grid()?;
        } else {
            self.eta()?;
            let bc = &self.basket;
            if bc.count_first < 2 || bc.count_second < 2 || !(bc.hi > 0.0) || bc.n_test == 0 {
                return invalid("basket grid needs at least two nodes per axis and hi > 0".into());
            }
        }
        Ok(())
    }
}
