//! Offline convergence, out-of-sample, COS comparison and basket studies.

use std::path::Path;
use std::time::Instant;

use serde_json::json;

use super::report::{fmt_f64, write_bytes, write_json, Table};
use super::sampling::{sample_cloud, Cloud, PRNG_NAME};
use super::{ConfigError, RunConfig};
use crate::cosbench::{cos_price, CosSettings};
use crate::eim::{greedy, Interpolant, MagicRule, SnapshotMatrix, TrainSettings, TrainingSet};
use crate::models::{ModelParams, ParamPoint};
use crate::par;
use crate::payoffs::PayoffSpec;
use crate::pricer::{prefactor, price_reference, truncation_tail, IntegrandSpec, PriceRequest};
use crate::quad::{uniform_nodes, QuadSettings};
use crate::{Error, Execution};

/// Relative errors are only recorded above this reference price.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub const RESIDUALS_CSV: &str = "offline_residuals.csv";
pub const RULE_FILE: &str = "rule.json";
pub const OFFLINE_META: &str = "offline_meta.json";
pub const OOS_SAMPLES_CSV: &str = "oos_samples.csv";
pub const OOS_LINF_CSV: &str = "oos_linf.csv";
pub const OOS_META: &str = "oos_meta.json";
pub const COS_CSV: &str = "cos_comparison.csv";
pub const COS_META: &str = "cos_meta.json";
pub const BASKET_RESIDUALS_CSV: &str = "basket_residuals.csv";
pub const BASKET_PRICES_CSV: &str = "basket_prices.csv";
pub const BASKET_META: &str = "basket_meta.json";

/// Least-squares fit of `log10(y)` against `x`: `(slope, r_squared)`.
pub fn log_linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(_, v)| **v > 0.0).map(|(a, v)| (*a, v.log10())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn require_one_dimensional(cfg: &RunConfig) -> Result<(), Error> {
    if cfg.dim()? != 1 {
        return Err(ConfigError::Invalid(format!(
            "{} with {} is a basket configuration; use the basket study",
            cfg.model, cfg.payoff
        ))
        .into());
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct OfflineReport {
    pub rule: MagicRule,
    pub cloud: Cloud,
    /// Entry `m - 1` is the pivot of greedy step `m`: the largest training
    /// residual left by the first `m - 1` basis functions.
    pub residuals: Vec<f64>,
    pub seconds_sampling: f64,
    pub seconds_snapshots: f64,
    pub seconds_training: f64,
}

impl OfflineReport {
    /// Largest residual left by the first `m` basis functions.
    pub fn residual_after(&self, m: usize) -> f64 {
        self.rule.interpolant().residual_after(m)
    }

    pub fn residual_table(&self) -> Table {
        let mut t = Table::new(["m", "residual", "residual_after_m"]);
        for (k, r) in self.residuals.iter().enumerate() {
            t.push(vec![(k + 1).to_string(), fmt_f64(*r), fmt_f64(self.residual_after(k + 1))]);
        }
        t
    }

    pub fn write(&self, cfg: &RunConfig, out_dir: &Path) -> Result<(), Error> {
        self.residual_table().write(&out_dir.join(RESIDUALS_CSV))?;
        write_bytes(&out_dir.join(RULE_FILE), &self.rule.save())?;
        let it = self.rule.interpolant();
        write_json(
            &out_dir.join(OFFLINE_META),
            &json!({
                "model": cfg.model,
                "payoff": cfg.payoff,
                "prng": PRNG_NAME,
                "seed": cfg.seed,
                "cloud_size": self.cloud.points.len(),
                "sampling_attempts": self.cloud.attempts,
                "acceptance_rate": self.cloud.acceptance_rate,
                "eta": self.rule.eta(),
                "grid": [self.rule.grid().lo(), self.rule.grid().hi(), self.rule.grid().count()],
                "m": self.rule.m(),
                "termination": it.termination(),
                "final_residual": it.final_residual(),
                "seconds_sampling": self.seconds_sampling,
                "seconds_snapshots": self.seconds_snapshots,
                "seconds_training": self.seconds_training,
            }),
        )
    }
}

/// Samples the cloud, evaluates the snapshots and trains the rule.
pub fn run_offline(cfg: &RunConfig, exec: Execution) -> Result<OfflineReport, Error> {
    cfg.validate()?;
    require_one_dimensional(cfg)?;
    let b = cfg.param_box()?;
    let grid = cfg.freq_grid()?;
    let t0 = Instant::now();
    let cloud = sample_cloud(&b, cfg.cloud_size, cfg.seed)?;
    let seconds_sampling = elapsed(t0);

    let t1 = Instant::now();
    let spec = IntegrandSpec::new(cfg.payoff_kind()?, b.kind, 1, grid.eta(), cfg.rate);
    let ts = TrainingSet::evaluate(spec, cloud.points.clone(), grid, exec)?;
    let seconds_snapshots = elapsed(t1);

    let t2 = Instant::now();
    let settings = TrainSettings {
        greedy: cfg.greedy_settings(exec),
        quad: QuadSettings::default(),
    };
    let mut rule = MagicRule::train(&ts, &settings, cfg.seed)?;
    rule.set_param_bounds(b.lower().to_vec(), b.upper().to_vec())?;
    let seconds_training = elapsed(t2);

    let residuals = rule.interpolant().residual_history().to_vec();
    Ok(OfflineReport {
        rule,
        cloud,
        residuals,
        seconds_sampling,
        seconds_snapshots,
        seconds_training,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub point: ParamPoint,
    pub reference: f64,
    /// Magic price with the full rule.
    pub magic: f64,
    pub abs_error: f64,
    /// Only recorded when `reference > 1e-3`.
    pub rel_error: Option<f64>,
    pub tail: f64,
    /// `tail <= threshold`.
    pub included: bool,
    /// Entry `m - 1` is the magic price with the first `m` basis functions.
    pub magic_by_m: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OosReport {
    pub samples: Vec<SampleRecord>,
    /// Entry `m - 1`: max absolute error over all samples with `m` basis functions.
    pub linf: Vec<f64>,
    pub mean_abs: Vec<f64>,
    /// Largest deviation from the reference at the magic parameters themselves.
    pub in_sample_max_error: f64,
    pub test_seed: u64,
    pub acceptance_rate: f64,
    pub seconds: f64,
}

impl OosReport {
    pub fn max_abs_error(&self) -> f64 {
        self.linf.last().copied().unwrap_or(f64::NAN)
    }

    pub fn mean_abs_error(&self) -> f64 {
        self.mean_abs.last().copied().unwrap_or(f64::NAN)
    }

    pub fn excluded(&self) -> usize {
        self.samples.iter().filter(|s| !s.included).count()
    }

    pub fn sample_table(&self, cfg: &RunConfig) -> Result<Table, Error> {
        let kind = cfg.model_kind()?;
        let mut header: Vec<String> = ["index", "spot", "strike", "maturity"].iter().map(|s| s.to_string()).collect();
        let width = self.samples.first().map_or(0, |s| s.point.model.len());
        header.extend(kind.param_names()[..width].iter().map(|s| s.to_string()));
        header.extend(["reference", "magic", "abs_error", "rel_error", "tail", "included"].iter().map(|s| s.to_string()));
        let mut t = Table::new(header);
        for (i, s) in self.samples.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(s.point.to_vec().into_iter().map(fmt_f64));
            row.push(fmt_f64(s.reference));
            row.push(fmt_f64(s.magic));
            row.push(fmt_f64(s.abs_error));
            row.push(s.rel_error.map(fmt_f64).unwrap_or_default());
            row.push(fmt_f64(s.tail));
            row.push(s.included.to_string());
            t.push(row);
        }
        Ok(t)
    }

    pub fn linf_table(&self) -> Table {
        let mut t = Table::new(["m", "linf_abs_error", "mean_abs_error"]);
        for (k, (l, a)) in self.linf.iter().zip(&self.mean_abs).enumerate() {
            t.push(vec![(k + 1).to_string(), fmt_f64(*l), fmt_f64(*a)]);
        }
        t
    }

    pub fn write(&self, cfg: &RunConfig, out_dir: &Path) -> Result<(), Error> {
        self.sample_table(cfg)?.write(&out_dir.join(OOS_SAMPLES_CSV))?;
        self.linf_table().write(&out_dir.join(OOS_LINF_CSV))?;
        write_json(
            &out_dir.join(OOS_META),
            &json!({
                "model": cfg.model,
                "payoff": cfg.payoff,
                "prng": PRNG_NAME,
                "test_seed": self.test_seed,
                "n_test": self.samples.len(),
                "acceptance_rate": self.acceptance_rate,
                "max_abs_error": self.max_abs_error(),
                "mean_abs_error": self.mean_abs_error(),
                "in_sample_max_error": self.in_sample_max_error,
                "excluded_by_tail": self.excluded(),
                "tail_threshold": cfg.study.tail_threshold,
                "seconds": self.seconds,
            }),
        )
    }
}

fn check_rule(cfg: &RunConfig, rule: &MagicRule) -> Result<(), Error> {
    let grid = cfg.freq_grid()?;
    let mut bad = Vec::new();
    if rule.model_kind() != cfg.model_kind()? {
        bad.push("model");
    }
    if rule.payoff_kind() != cfg.payoff_kind()? {
        bad.push("payoff");
    }
    if rule.eta() != grid.eta() {
        bad.push("eta");
    }
    if rule.omega() != (grid.lo(), grid.hi()) {
        bad.push("grid bounds");
    }
    if rule.rate() != cfg.rate {
        bad.push("rate");
    }
    if !bad.is_empty() {
        return Err(ConfigError::Invalid(format!("rule and config disagree on {}", bad.join(", "))).into());
    }
    Ok(())
}

fn request(rule: &MagicRule, p: &ParamPoint) -> Result<PriceRequest, Error> {
    Ok(PriceRequest {
        payoff: PayoffSpec::single(rule.payoff_kind(), p.strike)?,
        model: ModelParams::from_values(rule.model_kind(), &p.model, rule.rate())?,
        spot: p.spot,
        maturity: p.maturity,
        eta: rule.eta(),
        omega: rule.omega(),
        discount: false,
    })
}

/// Magic prices with `m = 1..=M` basis functions from one set of magic point values.
fn prices_by_m(values: &[f64], weights: &[Vec<f64>]) -> Vec<f64> {
    let c = prefactor(1);
    weights.iter().map(|w| c * w.iter().zip(values).map(|(a, b)| a * b).sum::<f64>()).collect()
}

/// Prices fresh draws by reference quadrature and by the rule at every `m`.
pub fn run_out_of_sample(cfg: &RunConfig, rule: &MagicRule, exec: Execution) -> Result<OosReport, Error> {
    cfg.validate()?;
    require_one_dimensional(cfg)?;
    check_rule(cfg, rule)?;
    let start = Instant::now();
    let b = cfg.param_box()?;
    let test_seed = cfg.test_seed();
    let cloud = sample_cloud(&b, cfg.study.n_test, test_seed)?;
    let ref_quad = cfg.reference_quad();
    let tail_quad = QuadSettings::default();
    let weights: Vec<Vec<f64>> = (1..=rule.m()).map(|m| rule.weights_for(m)).collect();
    let threshold = cfg.study.tail_threshold;
    let (omega_hi, far) = (rule.omega().1, cfg.study.tail_far);

    let samples = par::try_map_range(exec, cloud.points.len(), |i| -> Result<SampleRecord, Error> {
        let p = &cloud.points[i];
        let req = request(rule, p)?;
        let h = req.integrand()?;
        let values = rule.magic_points().iter().map(|z| h.eval1(*z)).collect::<Result<Vec<_>, _>>()?;
        let magic_by_m = prices_by_m(&values, &weights);
        let reference = price_reference(&req, &ref_quad)?;
        let tail = truncation_tail(&req, omega_hi, far, &tail_quad)?;
        let magic = *magic_by_m.last().expect("rule has a basis");
        let abs_error = (magic - reference).abs();
        Ok(SampleRecord {
            point: p.clone(),
            reference,
            magic,
            abs_error,
            rel_error: (reference > REL_ERROR_FLOOR).then(|| abs_error / reference),
            tail,
            included: tail <= threshold,
            magic_by_m,
        })
    })?;

    let n = samples.len() as f64;
    let mut linf = vec![0.0f64; rule.m()];
    let mut mean_abs = vec![0.0f64; rule.m()];
    for s in &samples {
        for (k, v) in s.magic_by_m.iter().enumerate() {
            let e = (v - s.reference).abs();
            linf[k] = linf[k].max(e);
            mean_abs[k] += e / n;
        }
    }

    let in_sample = par::try_map_range(exec, rule.m(), |k| -> Result<f64, Error> {
        let p = rule.magic_param_point(k);
        let req = request(rule, &p)?;
        let h = req.integrand()?;
        let values = rule.magic_points().iter().map(|z| h.eval1(*z)).collect::<Result<Vec<_>, _>>()?;
        let magic = prices_by_m(&values, &weights[weights.len() - 1..])[0];
        Ok((magic - price_reference(&req, &ref_quad)?).abs())
    })?;

    Ok(OosReport {
        samples,
        linf,
        mean_abs,
        in_sample_max_error: in_sample.into_iter().fold(0.0, f64::max),
        test_seed,
        acceptance_rate: cloud.acceptance_rate,
        seconds: elapsed(start),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosRow {
    /// Number of magic points and of cosine terms.
    pub n: usize,
    /// Basis size actually used (`min(n, M)`).
    pub m_used: usize,
    pub magic_linf: f64,
    pub cos_linf: f64,
}

#[derive(Clone, Debug)]
pub struct CosReport {
    pub l: f64,
    pub included: usize,
    pub excluded: usize,
    pub rows: Vec<CosRow>,
    pub seconds: f64,
}

impl CosReport {
    pub fn row(&self, n: usize) -> Option<&CosRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["n", "m_used", "magic_linf_error", "cos_linf_error"]);
        for r in &self.rows {
            t.push(vec![r.n.to_string(), r.m_used.to_string(), fmt_f64(r.magic_linf), fmt_f64(r.cos_linf)]);
        }
        t
    }

    pub fn write(&self, cfg: &RunConfig, out_dir: &Path) -> Result<(), Error> {
        self.table().write(&out_dir.join(COS_CSV))?;
        write_json(
            &out_dir.join(COS_META),
            &json!({
                "model": cfg.model,
                "cos_l": self.l,
                "tail_threshold": cfg.study.tail_threshold,
                "included": self.included,
                "excluded": self.excluded,
                "seconds": self.seconds,
            }),
        )
    }
}

/// Magic point versus COS errors on the truncation-filtered out-of-sample set.
pub fn run_cos_comparison(cfg: &RunConfig, rule: &MagicRule, oos: &OosReport, exec: Execution) -> Result<CosReport, Error> {
    let start = Instant::now();
    let l = cfg.cos_l()?;
    let kept: Vec<&SampleRecord> = oos.samples.iter().filter(|s| s.included).collect();
    let n_max = cfg.study.cos_n_max;
    let kind = rule.model_kind();
    let rate = rule.rate();
    let cos_errors = par::try_map_range(exec, kept.len(), |i| -> Result<Vec<f64>, Error> {
        let s = kept[i];
        let params = ModelParams::from_values(kind, &s.point.model, rate)?;
        (1..=n_max)
            .map(|n| {
                let v = cos_price(&params, s.point.spot, s.point.strike, s.point.maturity, &CosSettings { n, l }, false)?;
                Ok((v - s.reference).abs())
            })
            .collect()
    })?;
    let rows = (1..=n_max)
        .map(|n| {
            let m_used = n.min(rule.m());
            let magic_linf = kept.iter().map(|s| (s.magic_by_m[m_used - 1] - s.reference).abs()).fold(0.0, f64::max);
            let cos_linf = cos_errors.iter().map(|e| e[n - 1]).fold(0.0, f64::max);
            CosRow {
                n,
                m_used,
                magic_linf,
                cos_linf,
            }
        })
        .collect();
    Ok(CosReport {
        l,
        included: kept.len(),
        excluded: oos.samples.len() - kept.len(),
        rows,
        seconds: elapsed(start),
    })
}

#[derive(Clone, Debug)]
pub struct BasketReport {
    pub interpolant: Interpolant,
    pub weights: Vec<f64>,
    /// Magic frequencies as `(xi_1, xi_2)`.
    pub magic_points: Vec<(f64, f64)>,
    /// `(strike, reference, magic)` for each test strike.
    pub prices: Vec<(f64, f64, f64)>,
    pub seconds: f64,
}

impl BasketReport {
    pub fn residuals(&self) -> &[f64] {
        self.interpolant.residual_history()
    }

    pub fn max_abs_error(&self) -> f64 {
        self.prices.iter().map(|(_, r, m)| (r - m).abs()).fold(0.0, f64::max)
    }

    pub fn write(&self, cfg: &RunConfig, out_dir: &Path) -> Result<(), Error> {
        let mut t = Table::new(["m", "residual", "residual_after_m"]);
        for (k, r) in self.residuals().iter().enumerate() {
            t.push(vec![(k + 1).to_string(), fmt_f64(*r), fmt_f64(self.interpolant.residual_after(k + 1))]);
        }
        t.write(&out_dir.join(BASKET_RESIDUALS_CSV))?;
        let mut p = Table::new(["strike", "reference", "magic", "abs_error"]);
        for (k, r, m) in &self.prices {
            p.push(vec![fmt_f64(*k), fmt_f64(*r), fmt_f64(*m), fmt_f64((r - m).abs())]);
        }
        p.write(&out_dir.join(BASKET_PRICES_CSV))?;
        write_json(
            &out_dir.join(BASKET_META),
            &json!({
                "model": cfg.model,
                "payoff": cfg.payoff,
                "prng": PRNG_NAME,
                "seed": cfg.seed,
                "test_seed": cfg.test_seed(),
                "grid": [cfg.basket.count_first, cfg.basket.count_second, cfg.basket.hi],
                "m": self.interpolant.m(),
                "termination": self.interpolant.termination(),
                "magic_points": self.magic_points,
                "weights": self.weights,
                "max_abs_error": self.max_abs_error(),
                "seconds": self.seconds,
            }),
        )
    }
}

/// Two-asset basket: greedy training on a tensor grid over
/// `[0, hi] x [-hi, hi]` and comparison with nested 2-d quadrature.
pub fn run_basket(cfg: &RunConfig, exec: Execution) -> Result<BasketReport, Error> {
    cfg.validate()?;
    if cfg.dim()? != 2 {
        return Err(ConfigError::Invalid("the basket study needs a two-asset bs_multi box".into()).into());
    }
    let start = Instant::now();
    let b = cfg.param_box()?;
    let eta = cfg.eta()?;
    let payoff = cfg.payoff_kind()?;
    let bc = cfg.basket;
    let first = uniform_nodes(0.0, bc.hi, bc.count_first)?;
    let second = uniform_nodes(-bc.hi, bc.hi, bc.count_second)?;
    let nodes: Vec<[f64; 2]> = first.iter().flat_map(|&a| second.iter().map(move |&c| [a, c])).collect();
    let spec = IntegrandSpec::new(payoff, b.kind, 2, eta, cfg.rate);

    let cloud = sample_cloud(&b, cfg.cloud_size, cfg.seed)?;
    let rows = par::try_map_range(exec, cloud.points.len(), |i| -> Result<Vec<f64>, Error> {
        let h = spec.bind(&cloud.points[i])?;
        Ok(nodes.iter().map(|z| h.eval(z)).collect::<Result<Vec<_>, _>>()?)
    })?;
    let values = SnapshotMatrix::from_rows(rows)?;
    let interp = greedy(&values, &cfg.greedy_settings(exec))?;

    let quad = cfg.reference_quad();
    let integrals = par::try_map_range(exec, interp.m(), |k| -> Result<f64, Error> {
        let h = spec.bind(&cloud.points[interp.param_indices()[k]])?;
        Ok(h.integrate(0.0, bc.hi, &quad)?)
    })?;
    let weights = interp.weights(&interp.basis_integrals(&integrals)?)?;
    let magic: Vec<[f64; 2]> = interp.point_indices().iter().map(|&j| nodes[j]).collect();

    let tests = sample_cloud(&b, bc.n_test, cfg.test_seed())?;
    let prices = par::try_map_range(exec, tests.points.len(), |i| -> Result<(f64, f64, f64), Error> {
        let p = &tests.points[i];
        let h = spec.bind(p)?;
        let online: f64 = magic.iter().zip(&weights).map(|(z, w)| h.eval(z).map(|v| v * w)).sum::<Result<f64, _>>()?;
        let reference = h.integrate(0.0, bc.hi, &quad)? * prefactor(2);
        Ok((p.strike, reference, online * prefactor(2)))
    })?;

    Ok(BasketReport {
        magic_points: magic.iter().map(|z| (z[0], z[1])).collect(),
        interpolant: interp,
        weights,
        prices,
        seconds: elapsed(start),
    })
}
