//! Empirical interpolation ("magic points") for parametric integrand families.
//!
//! [`greedy`] works on any snapshot matrix (one row per parameter, one column
//! per grid node). [`MagicRule`] ties the result to a one-dimensional Fourier
//! integrand family, adds the online quadrature weights and is the artifact
//! written to rule files.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ModelKind, ParamPoint};
use crate::par::{self, Execution};
use crate::payoffs::PayoffKind;
use crate::pricer::{BoundIntegrand, IntegrandSpec, PricerError};
use crate::quad::{make_uniform_grid, try_integrate_adaptive, FreqGrid, QuadError, QuadSettings};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EimError {
    #[error("invalid training settings: {0}")]
    InvalidSettings(String),
    #[error("training cloud is empty")]
    EmptyCloud,
    #[error("every snapshot vanishes on the grid")]
    ZeroFamily,
    #[error("snapshot {row} is not finite at grid node {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Pricer(#[from] Box<PricerError>),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("malformed rule file: {0}")]
    Malformed(String),
    #[error("rule file version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
}

impl From<PricerError> for EimError {
    fn from(e: PricerError) -> Self {
        EimError::Pricer(Box::new(e))
    }
}

impl EimError {
    pub fn is_numerical(&self) -> bool {
        match self {
            EimError::NonFinite { .. } | EimError::Quad(_) => true,
            EimError::Pricer(e) => e.is_numerical(),
            _ => false,
        }
    }
}

/// Row-major `rows x cols` matrix of snapshot values.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SnapshotMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EimError> {
        if data.len() != rows * cols {
            return Err(EimError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(EimError::NonFinite {
                row: k / cols.max(1),
                col: k % cols.max(1),
            });
        }
        Ok(SnapshotMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EimError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(EimError::DimensionMismatch { expected: cols, got: bad.len() });
        }
        let n = rows.len();
        Self::new(n, cols, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The largest residual fell to the tolerance.
    Tolerance,
    /// `m_max` basis functions were built.
    MaxBasis,
    /// Every residual is exactly zero: the family is spanned.
    Spanned,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GreedySettings {
    pub tol: f64,
    pub m_max: usize,
    pub exec: Execution,
}

impl Default for GreedySettings {
    fn default() -> Self {
        GreedySettings {
            tol: 1e-10,
            m_max: 50,
            exec: Execution::Parallel,
        }
    }
}

/// Result of greedy training on a snapshot matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolant {
    point_indices: Vec<usize>,
    param_indices: Vec<usize>,
    /// `basis[m]` is `q_m` on the grid.
    basis: Vec<Vec<f64>>,
    /// `b[j][m] = q_m(z*_j)` for `m <= j`, zero above the diagonal.
    b: Vec<Vec<f64>>,
    b_inverse: Vec<Vec<f64>>,
    /// `q_j = sum_k snapshot_coefficients[j][k] * u_{p*_k}`.
    snapshot_coefficients: Vec<Vec<f64>>,
    residual_history: Vec<f64>,
    final_residual: f64,
    termination: Termination,
}

fn row_argmax(row: &[f64]) -> (f64, usize) {
    let mut best = (row[0].abs(), 0);
    for (j, v) in row.iter().enumerate().skip(1) {
        if v.abs() > best.0 {
            best = (v.abs(), j);
        }
    }
    best
}

/// Forward substitution with a unit lower-triangular matrix.
fn forward_solve(b: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let m = rhs.len();
    let mut x = vec![0.0; m];
    for j in 0..m {
        let mut s = rhs[j];
        for k in 0..j {
            s -= b[j][k] * x[k];
        }
        x[j] = s;
    }
    x
}

/// Solves `B^T w = rhs` for unit lower-triangular `B` (back substitution).
fn transpose_solve(b: &[Vec<f64>], rhs: &[f64]) -> Vec<f64> {
    let m = rhs.len();
    let mut w = vec![0.0; m];
    for j in (0..m).rev() {
        let mut s = rhs[j];
        for k in j + 1..m {
            s -= b[k][j] * w[k];
        }
        w[j] = s;
    }
    w
}

fn unit_lower_inverse(b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = b.len();
    let mut inv = vec![vec![0.0; m]; m];
    for col in 0..m {
        let mut e = vec![0.0; m];
        e[col] = 1.0;
        let x = forward_solve(b, &e);
        for row in 0..m {
            inv[row][col] = x[row];
        }
    }
    inv
}

/// Greedy empirical interpolation over the rows of `values`.
///
/// Each step picks the row with the largest residual sup-norm (ties: lowest
/// row, then lowest column) and normalizes its residual at the argmax.
/// Residuals of all rows are kept current by a rank-one update per step.
pub fn greedy(values: &SnapshotMatrix, settings: &GreedySettings) -> Result<Interpolant, EimError> {
    if !(settings.tol > 0.0) {
        return Err(EimError::InvalidSettings(format!("tol must be positive, got {}", settings.tol)));
    }
    if settings.m_max == 0 {
        return Err(EimError::InvalidSettings("m_max must be at least 1".into()));
    }
    if values.rows == 0 || values.cols == 0 {
        return Err(EimError::EmptyCloud);
    }
    let n = values.cols;
    let exec = settings.exec;
    let mut residual = values.data.clone();
    let mut out = Interpolant {
        point_indices: Vec::new(),
        param_indices: Vec::new(),
        basis: Vec::new(),
        b: Vec::new(),
        b_inverse: Vec::new(),
        snapshot_coefficients: Vec::new(),
        residual_history: Vec::new(),
        final_residual: 0.0,
        termination: Termination::MaxBasis,
    };
    loop {
        let maxima = par::map_rows(exec, &residual, n, |_, row| row_argmax(row));
        let mut best_row = 0;
        for (i, m) in maxima.iter().enumerate() {
            if m.0 > maxima[best_row].0 {
                best_row = i;
            }
        }
        let (best, col) = maxima[best_row];
        let m = out.point_indices.len();
        if best == 0.0 {
            if m == 0 {
                return Err(EimError::ZeroFamily);
            }
            out.termination = Termination::Spanned;
            out.final_residual = 0.0;
            break;
        }
        if m > 0 && best <= settings.tol {
            out.termination = Termination::Tolerance;
            out.final_residual = best;
            break;
        }
        if m == settings.m_max {
            out.termination = Termination::MaxBasis;
            out.final_residual = best;
            break;
        }

        let pivot = residual[best_row * n + col];
        let q: Vec<f64> = residual[best_row * n..(best_row + 1) * n].iter().map(|v| v / pivot).collect();

        // Coefficients of the chosen snapshot in the current basis.
        let u = values.row(best_row);
        let at_points: Vec<f64> = out.point_indices.iter().map(|&j| u[j]).collect();
        let alpha = forward_solve(&out.b, &at_points);
        let mut coeffs = vec![0.0; m + 1];
        coeffs[m] = 1.0;
        for (k, a) in alpha.iter().enumerate() {
            for (l, c) in out.snapshot_coefficients[k].iter().enumerate() {
                coeffs[l] -= a * c;
            }
        }
        for c in coeffs.iter_mut() {
            *c /= pivot;
        }
        for row in out.snapshot_coefficients.iter_mut() {
            row.resize(m + 1, 0.0);
        }
        out.snapshot_coefficients.push(coeffs);

        let mut b_row: Vec<f64> = out.basis.iter().map(|qk| qk[col]).collect();
        b_row.push(1.0);
        for row in out.b.iter_mut() {
            row.push(0.0);
        }
        out.b.push(b_row);

        par::for_each_row(exec, &mut residual, n, |i, row| {
            // The chosen snapshot is reproduced exactly; drop its rounding noise.
            if i == best_row {
                row.fill(0.0);
                return;
            }
            let factor = row[col];
            if factor != 0.0 {
                for (r, qv) in row.iter_mut().zip(&q) {
                    *r -= factor * qv;
                }
            }
        });

        out.residual_history.push(best);
        out.point_indices.push(col);
        out.param_indices.push(best_row);
        out.basis.push(q);
    }
    out.b_inverse = unit_lower_inverse(&out.b);
    Ok(out)
}

impl Interpolant {
    pub fn m(&self) -> usize {
        self.point_indices.len()
    }

    pub fn grid_len(&self) -> usize {
        self.basis.first().map_or(0, Vec::len)
    }

    pub fn point_indices(&self) -> &[usize] {
        &self.point_indices
    }

    pub fn param_indices(&self) -> &[usize] {
        &self.param_indices
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn b(&self) -> &[Vec<f64>] {
        &self.b
    }

    pub fn b_inverse(&self) -> &[Vec<f64>] {
        &self.b_inverse
    }

    pub fn snapshot_coefficients(&self) -> &[Vec<f64>] {
        &self.snapshot_coefficients
    }

    /// `residual_history[m]` is the largest residual left by the first `m`
    /// basis functions, i.e. the pivot magnitude of step `m + 1`.
    pub fn residual_history(&self) -> &[f64] {
        &self.residual_history
    }

    /// Largest residual left by the full basis.
    pub fn final_residual(&self) -> f64 {
        self.final_residual
    }

    pub fn termination(&self) -> Termination {
        self.termination
    }

    /// Largest residual over the training set after `m` basis functions.
    pub fn residual_after(&self, m: usize) -> f64 {
        if m < self.m() {
            self.residual_history[m]
        } else {
            self.final_residual
        }
    }

    /// The interpolant built from the first `m` greedy steps.
    pub fn truncated(&self, m: usize) -> Interpolant {
        let m = m.min(self.m());
        let block = |a: &[Vec<f64>]| a[..m].iter().map(|r| r[..m].to_vec()).collect::<Vec<_>>();
        Interpolant {
            point_indices: self.point_indices[..m].to_vec(),
            param_indices: self.param_indices[..m].to_vec(),
            basis: self.basis[..m].to_vec(),
            b: block(&self.b),
            b_inverse: block(&self.b_inverse),
            snapshot_coefficients: block(&self.snapshot_coefficients),
            residual_history: self.residual_history[..m].to_vec(),
            final_residual: self.residual_after(m),
            termination: if m == self.m() { self.termination } else { Termination::MaxBasis },
        }
    }

    fn check_len(&self, got: usize) -> Result<(), EimError> {
        if got != self.m() {
            return Err(EimError::DimensionMismatch { expected: self.m(), got });
        }
        Ok(())
    }

    /// Interpolation coefficients: solves `B alpha = u(z*)`.
    pub fn coefficients(&self, u_at_magic: &[f64]) -> Result<Vec<f64>, EimError> {
        self.check_len(u_at_magic.len())?;
        Ok(forward_solve(&self.b, u_at_magic))
    }

    /// `I_M(u)` on the grid from the values of `u` at the magic points.
    pub fn interpolate(&self, u_at_magic: &[f64]) -> Result<Vec<f64>, EimError> {
        let alpha = self.coefficients(u_at_magic)?;
        let mut out = vec![0.0; self.grid_len()];
        for (a, q) in alpha.iter().zip(&self.basis) {
            for (o, v) in out.iter_mut().zip(q) {
                *o += a * v;
            }
        }
        Ok(out)
    }

    /// Values of a grid function at the magic points.
    pub fn sample(&self, u: &[f64]) -> Result<Vec<f64>, EimError> {
        if u.len() != self.grid_len() {
            return Err(EimError::DimensionMismatch { expected: self.grid_len(), got: u.len() });
        }
        Ok(self.point_indices.iter().map(|&j| u[j]).collect())
    }

    /// Integrals of the basis functions from integrals of the magic snapshots.
    pub fn basis_integrals(&self, snapshot_integrals: &[f64]) -> Result<Vec<f64>, EimError> {
        self.check_len(snapshot_integrals.len())?;
        Ok(self
            .snapshot_coefficients
            .iter()
            .map(|c| c.iter().zip(snapshot_integrals).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Online weights `w_m = int theta_m`, from the basis integrals:
    /// `w = B^{-T} Q`.
    pub fn weights(&self, basis_integrals: &[f64]) -> Result<Vec<f64>, EimError> {
        self.check_len(basis_integrals.len())?;
        Ok(transpose_solve(&self.b, basis_integrals))
    }

    /// Recomputes the largest residual `max_u |u - I_M(u)|` over `values`.
    pub fn max_residual(&self, values: &SnapshotMatrix, exec: Execution) -> Result<f64, EimError> {
        if values.cols != self.grid_len() {
            return Err(EimError::DimensionMismatch { expected: self.grid_len(), got: values.cols });
        }
        let per_row = par::map_rows(exec, &values.data, values.cols, |_, row| -> Result<f64, EimError> {
            let approx = self.interpolate(&self.sample(row)?)?;
            Ok(row.iter().zip(&approx).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        });
        let mut worst: f64 = 0.0;
        for r in per_row {
            worst = worst.max(r?);
        }
        Ok(worst)
    }
}

/// A parameter cloud and its integrands evaluated on a frequency grid.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub cloud: Vec<ParamPoint>,
    pub spec: IntegrandSpec,
    pub grid: FreqGrid,
    pub values: SnapshotMatrix,
}

impl TrainingSet {
    pub fn evaluate(spec: IntegrandSpec, cloud: Vec<ParamPoint>, grid: FreqGrid, exec: Execution) -> Result<Self, EimError> {
        if cloud.is_empty() {
            return Err(EimError::EmptyCloud);
        }
        if spec.dim != 1 {
            return Err(EimError::InvalidSettings("rule training is one-dimensional; use greedy for tensor grids".into()));
        }
        if spec.eta != grid.eta() {
            return Err(EimError::InvalidSettings(format!("spec eta {} differs from grid eta {}", spec.eta, grid.eta())));
        }
        let nodes = grid.nodes();
        let rows = par::try_map_range(exec, cloud.len(), |i| -> Result<Vec<f64>, EimError> {
            let h = spec.bind(&cloud[i])?;
            let mut row = Vec::with_capacity(nodes.len());
            for (j, &xi) in nodes.iter().enumerate() {
                let v = h.eval1(xi)?;
                if !v.is_finite() {
                    return Err(EimError::NonFinite { row: i, col: j });
                }
                row.push(v);
            }
            Ok(row)
        })?;
        let values = SnapshotMatrix::from_rows(rows)?;
        Ok(TrainingSet { cloud, spec, grid, values })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainSettings {
    pub greedy: GreedySettings,
    pub quad: QuadSettings,
}


/// Trained magic point integration rule for a one-dimensional integrand family.
#[derive(Clone, Debug, PartialEq)]
pub struct MagicRule {
    spec: IntegrandSpec,
    grid: FreqGrid,
    interp: Interpolant,
    magic_points: Vec<f64>,
    magic_params: Vec<Vec<f64>>,
    snapshot_integrals: Vec<f64>,
    basis_integrals: Vec<f64>,
    weights: Vec<f64>,
    param_lower: Vec<f64>,
    param_upper: Vec<f64>,
    created_seed: u64,
}

impl MagicRule {
    /// Greedy training followed by [`MagicRule::compute_weights`].
    pub fn train(ts: &TrainingSet, settings: &TrainSettings, seed: u64) -> Result<MagicRule, EimError> {
        settings.quad.validate()?;
        let interp = greedy(&ts.values, &settings.greedy)?;
        let width = ts.cloud[0].to_vec().len();
        let mut lower = vec![f64::INFINITY; width];
        let mut upper = vec![f64::NEG_INFINITY; width];
        for p in &ts.cloud {
            for (k, v) in p.to_vec().into_iter().enumerate() {
                lower[k] = lower[k].min(v);
                upper[k] = upper[k].max(v);
            }
        }
        let nodes = ts.grid.nodes();
        let mut rule = MagicRule {
            spec: ts.spec.clone(),
            grid: ts.grid.clone(),
            magic_points: interp.point_indices.iter().map(|&j| nodes[j]).collect(),
            magic_params: interp.param_indices.iter().map(|&i| ts.cloud[i].to_vec()).collect(),
            interp,
            snapshot_integrals: Vec::new(),
            basis_integrals: Vec::new(),
            weights: Vec::new(),
            param_lower: lower,
            param_upper: upper,
            created_seed: seed,
        };
        rule.compute_weights(&settings.quad, settings.greedy.exec)?;
        Ok(rule)
    }

    /// Integrates every magic snapshot over `[lo, hi]` with adaptive
    /// quadrature and assembles the online weights.
    pub fn compute_weights(&mut self, quad: &QuadSettings, exec: Execution) -> Result<(), EimError> {
        let (lo, hi) = (self.grid.lo(), self.grid.hi());
        let spec = &self.spec;
        let params = &self.magic_params;
        let integrals = par::try_map_range(exec, params.len(), |k| -> Result<f64, EimError> {
            let p = ParamPoint::from_slice(&params[k]).ok_or_else(|| EimError::Malformed("short parameter vector".into()))?;
            let h = spec.bind(&p)?;
            let v = try_integrate_adaptive(|x| h.eval1(x), lo, hi, quad)?;
            Ok(v)
        })?;
        self.basis_integrals = self.interp.basis_integrals(&integrals)?;
        self.weights = self.interp.weights(&self.basis_integrals)?;
        self.snapshot_integrals = integrals;
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.interp.m()
    }

    pub fn interpolant(&self) -> &Interpolant {
        &self.interp
    }

    pub fn spec(&self) -> &IntegrandSpec {
        &self.spec
    }

    pub fn grid(&self) -> &FreqGrid {
        &self.grid
    }

    pub fn payoff_kind(&self) -> PayoffKind {
        self.spec.payoff
    }

    pub fn model_kind(&self) -> ModelKind {
        self.spec.model
    }

    pub fn eta(&self) -> f64 {
        self.spec.eta
    }

    pub fn rate(&self) -> f64 {
        self.spec.rate
    }

    pub fn omega(&self) -> (f64, f64) {
        (self.grid.lo(), self.grid.hi())
    }

    pub fn magic_points(&self) -> &[f64] {
        &self.magic_points
    }

    pub fn magic_params(&self) -> &[Vec<f64>] {
        &self.magic_params
    }

    pub fn magic_param_point(&self, k: usize) -> ParamPoint {
        ParamPoint::from_slice(&self.magic_params[k]).expect("validated parameter vector")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn snapshot_integrals(&self) -> &[f64] {
        &self.snapshot_integrals
    }

    pub fn created_seed(&self) -> u64 {
        self.created_seed
    }

    pub fn param_bounds(&self) -> (&[f64], &[f64]) {
        (&self.param_lower, &self.param_upper)
    }

    /// Replaces the training box used for the extrapolation flag
    /// (defaults to the bounding box of the cloud).
    pub fn set_param_bounds(&mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<(), EimError> {
        let width = self.param_lower.len();
        for v in [&lower, &upper] {
            if v.len() != width {
                return Err(EimError::DimensionMismatch { expected: width, got: v.len() });
            }
        }
        self.param_lower = lower;
        self.param_upper = upper;
        Ok(())
    }

    pub fn in_box(&self, p: &ParamPoint) -> bool {
        let v = p.to_vec();
        v.len() == self.param_lower.len()
            && v.iter()
                .zip(self.param_lower.iter().zip(&self.param_upper))
                .all(|(x, (lo, hi))| lo <= x && x <= hi)
    }

    /// Weights of the rule truncated to its first `m` basis functions.
    pub fn weights_for(&self, m: usize) -> Vec<f64> {
        let m = m.min(self.m());
        if m == self.m() {
            return self.weights.clone();
        }
        transpose_solve(&self.interp.b[..m], &self.basis_integrals[..m])
    }

    /// `sum_m h(z*_m) w_m` over the first `m` magic points.
    pub fn online_integrate_bound(&self, h: &BoundIntegrand, m: usize) -> Result<f64, EimError> {
        let m = m.min(self.m());
        let weights = self.weights_for(m);
        let mut acc = 0.0;
        for (z, w) in self.magic_points[..m].iter().zip(&weights) {
            acc += h.eval1(*z)? * w;
        }
        Ok(acc)
    }

    /// Magic point integral of `h_p` over the rule's domain.
    pub fn online_integrate(&self, p: &ParamPoint) -> Result<f64, EimError> {
        let h = self.spec.bind(p)?;
        self.online_integrate_bound(&h, self.m())
    }

    pub fn save(&self) -> Vec<u8> {
        let file = RuleFile {
            format_version: FORMAT_VERSION,
            model_id: self.spec.model,
            payoff_id: self.spec.payoff,
            eta: self.spec.eta,
            omega_lo: self.grid.lo(),
            omega_hi: self.grid.hi(),
            grid_count: self.grid.count(),
            m: self.m(),
            magic_points: self.magic_points.clone(),
            magic_params: self.magic_params.clone(),
            weights: self.weights.clone(),
            b_inverse: self.interp.b_inverse.clone(),
            basis: self.interp.basis.clone(),
            residual_history: self.interp.residual_history.clone(),
            rate: self.spec.rate,
            created_seed: self.created_seed,
            magic_point_indices: self.interp.point_indices.clone(),
            magic_param_indices: self.interp.param_indices.clone(),
            b_matrix: self.interp.b.clone(),
            snapshot_coefficients: self.interp.snapshot_coefficients.clone(),
            snapshot_integrals: self.snapshot_integrals.clone(),
            basis_integrals: self.basis_integrals.clone(),
            final_residual: self.interp.final_residual,
            termination: self.interp.termination,
            param_lower: self.param_lower.clone(),
            param_upper: self.param_upper.clone(),
        };
        let mut out = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut out, SignificantDigits::default());
        file.serialize(&mut ser).expect("serializing into memory cannot fail");
        out.push(b'\n');
        out
    }

    pub fn load(bytes: &[u8]) -> Result<MagicRule, EimError> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let version: Version = serde_json::from_slice(bytes).map_err(|e| EimError::Malformed(e.to_string()))?;
        if version.format_version != FORMAT_VERSION {
            return Err(EimError::VersionMismatch {
                found: version.format_version,
                supported: FORMAT_VERSION,
            });
        }
        let f: RuleFile = serde_json::from_slice(bytes).map_err(|e| EimError::Malformed(e.to_string()))?;
        f.into_rule()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    format_version: u32,
    model_id: ModelKind,
    payoff_id: PayoffKind,
    eta: f64,
    omega_lo: f64,
    omega_hi: f64,
    grid_count: usize,
    #[serde(rename = "M")]
    m: usize,
    magic_points: Vec<f64>,
    magic_params: Vec<Vec<f64>>,
    weights: Vec<f64>,
    b_inverse: Vec<Vec<f64>>,
    basis: Vec<Vec<f64>>,
    residual_history: Vec<f64>,
    rate: f64,
    created_seed: u64,
    magic_point_indices: Vec<usize>,
    magic_param_indices: Vec<usize>,
    b_matrix: Vec<Vec<f64>>,
    snapshot_coefficients: Vec<Vec<f64>>,
    snapshot_integrals: Vec<f64>,
    basis_integrals: Vec<f64>,
    final_residual: f64,
    termination: Termination,
    param_lower: Vec<f64>,
    param_upper: Vec<f64>,
}

impl RuleFile {
    fn into_rule(self) -> Result<MagicRule, EimError> {
        let bad = |what: &str| Err(EimError::Malformed(what.to_string()));
        let m = self.m;
        if m == 0 {
            return bad("M must be at least 1");
        }
        let grid = make_uniform_grid(self.omega_lo, self.omega_hi, self.grid_count, self.eta)
            .map_err(|e| EimError::Malformed(e.to_string()))?;
        let square = |a: &Vec<Vec<f64>>| a.len() == m && a.iter().all(|r| r.len() == m);
        if self.magic_points.len() != m
            || self.magic_params.len() != m
            || self.weights.len() != m
            || self.residual_history.len() != m
            || self.magic_point_indices.len() != m
            || self.magic_param_indices.len() != m
            || self.snapshot_integrals.len() != m
            || self.basis_integrals.len() != m
            || !square(&self.b_inverse)
            || !square(&self.b_matrix)
            || !square(&self.snapshot_coefficients)
        {
            return bad("array lengths disagree with M");
        }
        if self.basis.len() != m || self.basis.iter().any(|r| r.len() != self.grid_count) {
            return bad("basis must be M rows of grid_count values");
        }
        if self.magic_point_indices.iter().any(|&j| j >= self.grid_count) {
            return bad("magic point index outside the grid");
        }
        let width = self.param_lower.len();
        if width < 3 || self.param_upper.len() != width || self.magic_params.iter().any(|p| p.len() != width) {
            return bad("parameter vectors have inconsistent lengths");
        }
        Ok(MagicRule {
            spec: IntegrandSpec::new(self.payoff_id, self.model_id, 1, self.eta, self.rate),
            grid,
            interp: Interpolant {
                point_indices: self.magic_point_indices,
                param_indices: self.magic_param_indices,
                basis: self.basis,
                b: self.b_matrix,
                b_inverse: self.b_inverse,
                snapshot_coefficients: self.snapshot_coefficients,
                residual_history: self.residual_history,
                final_residual: self.final_residual,
                termination: self.termination,
            },
            magic_points: self.magic_points,
            magic_params: self.magic_params,
            snapshot_integrals: self.snapshot_integrals,
            basis_integrals: self.basis_integrals,
            weights: self.weights,
            param_lower: self.param_lower,
            param_upper: self.param_upper,
            created_seed: self.created_seed,
        })
    }
}

/// JSON formatter printing every float with 17 significant digits.
#[derive(Default)]
struct SignificantDigits {
    inner: serde_json::ser::CompactFormatter,
}

impl serde_json::ser::Formatter for SignificantDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.inner.write_f32(writer, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::uniform_nodes;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings(tol: f64, m_max: usize) -> GreedySettings {
        GreedySettings {
            tol,
            m_max,
            exec: Execution::Sequential,
        }
    }

    fn family(rows: &[(f64, f64)], nodes: &[f64]) -> SnapshotMatrix {
        SnapshotMatrix::from_rows(
            rows.iter()
                .map(|&(a, b)| nodes.iter().map(|x| a * x.cos() + b * x.sin()).collect())
                .collect(),
        )
        .unwrap()
    }

    /// Smooth family that is not finitely spanned.
    fn gaussian_family(n_rows: usize, nodes: &[f64], seed: u64) -> SnapshotMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SnapshotMatrix::from_rows(
            (0..n_rows)
                .map(|_| {
                    let (s, c) = (rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0));
                    nodes.iter().map(|x| (-((x - c) / s).powi(2)).exp()).collect()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_integrand() {
        let nodes = uniform_nodes(0.0, 5.0, 101).unwrap();
        let h: Vec<f64> = nodes.iter().map(|x| (-x).exp() * (3.0 * x).cos()).collect();
        let s = SnapshotMatrix::from_rows(vec![h.clone()]).unwrap();
        let it = greedy(&s, &settings(1e-10, 10)).unwrap();
        assert_eq!(it.m(), 1);
        assert!(it.final_residual() < 1e-15);
        let approx = it.interpolate(&it.sample(&h).unwrap()).unwrap();
        for (a, b) in approx.iter().zip(&h) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = it.point_indices()[0];
        for (q, v) in it.basis()[0].iter().zip(&h) {
            assert!((q - v / h[z]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_dimensional_span_is_exact() {
        let nodes = uniform_nodes(0.0, std::f64::consts::PI, 201).unwrap();
        let rows = [(1.0, 0.5), (-0.3, 2.0), (0.7, 0.7), (2.0, -1.0)];
        let s = family(&rows, &nodes);
        let it = greedy(&s, &settings(1e-13, 10)).unwrap();
        assert_eq!(it.m(), 2);
        assert!(it.final_residual() <= 1e-13);
        assert!(it.max_residual(&s, Execution::Sequential).unwrap() <= 1e-13);
        // online integral on [0, pi]: a * 0 + b * 2
        let snapshot_integrals: Vec<f64> = it.param_indices().iter().map(|&i| 2.0 * rows[i].1).collect();
        let w = it.weights(&it.basis_integrals(&snapshot_integrals).unwrap()).unwrap();
        for &(a, b) in &rows {
            let u: Vec<f64> = it.point_indices().iter().map(|&j| a * nodes[j].cos() + b * nodes[j].sin()).collect();
            let online: f64 = u.iter().zip(&w).map(|(x, y)| x * y).sum();
            assert!((online - 2.0 * b).abs() < 1e-12, "{online} vs {}", 2.0 * b);
        }
    }

    #[test]
    fn constant_family() {
        let nodes = uniform_nodes(0.0, 1.0, 11).unwrap();
        let s = SnapshotMatrix::from_rows(vec![vec![3.0; 11], vec![-1.0; 11]]).unwrap();
        let it = greedy(&s, &settings(1e-12, 5)).unwrap();
        assert_eq!(it.m(), 1);
        assert!(it.basis()[0].iter().all(|&q| q == 1.0));
        let q = it.basis_integrals(&[3.0 * (nodes[10] - nodes[0])]).unwrap();
        let w = it.weights(&q).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15);
        assert!((w[0] * 0.25 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn spanned_and_zero_families() {
        let nodes = uniform_nodes(0.0, 1.0, 11).unwrap();
        let rows: Vec<Vec<f64>> = vec![nodes.iter().map(|x| 1.0 + x).collect(), nodes.iter().map(|x| 2.0 + 2.0 * x).collect()];
        let s = SnapshotMatrix::from_rows(rows).unwrap();
        let it = greedy(&s, &settings(1e-300, 5)).unwrap();
        assert_eq!(it.m(), 1);
        assert!(matches!(it.termination(), Termination::Spanned | Termination::Tolerance));
        let zero = SnapshotMatrix::from_rows(vec![vec![0.0; 4]; 3]).unwrap();
        assert_eq!(greedy(&zero, &settings(1e-10, 5)), Err(EimError::ZeroFamily));
        assert!(SnapshotMatrix::from_rows(vec![vec![0.0, f64::NAN]]).is_err());
        assert!(greedy(&s, &settings(0.0, 5)).is_err());
        assert!(greedy(&s, &settings(1e-10, 0)).is_err());
    }

    fn trained() -> (SnapshotMatrix, Interpolant) {
        let nodes = uniform_nodes(-3.0, 3.0, 301).unwrap();
        let s = gaussian_family(200, &nodes, 1);
        let it = greedy(&s, &settings(1e-12, 25)).unwrap();
        (s, it)
    }

    #[test]
    fn appendix_properties() {
        let (s, it) = trained();
        let m = it.m();
        assert!(m >= 10);
        // exactness at magic points
        for i in 0..s.rows() {
            let u = s.row(i);
            let approx = it.interpolate(&it.sample(u).unwrap()).unwrap();
            for &j in it.point_indices() {
                assert!((approx[j] - u[j]).abs() <= 1e-12);
            }
            // coefficient bound
            let norm = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let alpha = it.coefficients(&it.sample(u).unwrap()).unwrap();
            for (j, a) in alpha.iter().enumerate() {
                assert!(a.abs() <= 2f64.powi(j as i32) * norm * (1.0 + 1e-12));
            }
        }
        // unit lower triangular B and basis maxima
        for (k, q) in it.basis().iter().enumerate() {
            assert_eq!(q[it.point_indices()[k]], 1.0);
            assert!(q.iter().all(|v| v.abs() <= 1.0));
            for j in 0..k {
                assert!(q[it.point_indices()[j]].abs() <= 1e-12);
            }
        }
        // residual history positive and a re-evaluation does not exceed it
        assert!(it.residual_history().iter().all(|&r| r > 0.0));
        let again = it.max_residual(&s, Execution::Sequential).unwrap();
        assert!(again <= it.final_residual() * (1.0 + 1e-9) + 1e-15);
        assert!(it.residual_history().windows(2).all(|w| w[1] <= w[0] * 1.5));
    }

    #[test]
    fn interpolating_basis_rows_returns_them() {
        let (_, it) = trained();
        for (k, q) in it.basis().iter().enumerate() {
            let back = it.interpolate(&it.sample(q).unwrap()).unwrap();
            for (a, b) in back.iter().zip(q) {
                assert!((a - b).abs() <= 1e-12);
            }
            let _ = k;
        }
    }

    #[test]
    fn truncation_matches_shorter_training() {
        let (s, it) = trained();
        let short = greedy(&s, &settings(1e-12, 7)).unwrap();
        let cut = it.truncated(7);
        assert_eq!(cut.point_indices(), short.point_indices());
        assert_eq!(cut.residual_history(), short.residual_history());
        assert_eq!(cut.final_residual(), short.final_residual());
    }

    #[test]
    fn parallel_matches_sequential() {
        let nodes = uniform_nodes(-3.0, 3.0, 301).unwrap();
        let s = gaussian_family(300, &nodes, 9);
        let a = greedy(&s, &settings(1e-12, 20)).unwrap();
        let b = greedy(&s, &GreedySettings { exec: Execution::Parallel, ..settings(1e-12, 20) }).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linearity_and_idempotence(i in 0usize..200, j in 0usize..200, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (s, it) = trained();
            let (u, v) = (s.row(i), s.row(j));
            let combo: Vec<f64> = u.iter().zip(v).map(|(x, y)| a * x + b * y).collect();
            let lhs = it.interpolate(&it.sample(&combo).unwrap()).unwrap();
            let iu = it.interpolate(&it.sample(u).unwrap()).unwrap();
            let iv = it.interpolate(&it.sample(v).unwrap()).unwrap();
            for k in 0..lhs.len() {
                prop_assert!((lhs[k] - (a * iu[k] + b * iv[k])).abs() <= 1e-12);
            }
            let prev = it.truncated(it.m() - 1);
            let once = prev.interpolate(&prev.sample(u).unwrap()).unwrap();
            let twice = it.interpolate(&it.sample(&once).unwrap()).unwrap();
            for k in 0..once.len() {
                prop_assert!((once[k] - twice[k]).abs() <= 1e-12);
            }
        }
    }

    fn small_rule() -> MagicRule {
        let spec = IntegrandSpec::new(PayoffKind::Call, ModelKind::Bs, 1, -1.5, 0.0);
        let grid = make_uniform_grid(0.0, 65.0, 400, -1.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud: Vec<ParamPoint> = (0..60)
            .map(|_| ParamPoint {
                spot: rng.random_range(0.5..2.0),
                strike: 1.0,
                maturity: rng.random_range(0.1..1.5),
                model: vec![rng.random_range(0.1..0.8)],
            })
            .collect();
        let ts = TrainingSet::evaluate(spec, cloud, grid, Execution::Parallel).unwrap();
        let settings = TrainSettings {
            greedy: GreedySettings { tol: 1e-10, m_max: 30, exec: Execution::Parallel },
            quad: QuadSettings::default(),
        };
        MagicRule::train(&ts, &settings, 4).unwrap()
    }

    #[test]
    fn rule_is_exact_on_magic_snapshots() {
        let rule = small_rule();
        for k in 0..rule.m() {
            let online = rule.online_integrate(&rule.magic_param_point(k)).unwrap();
            assert!((online - rule.snapshot_integrals()[k]).abs() <= 1e-10, "{k}");
        }
        let full = rule.weights_for(rule.m());
        assert_eq!(full, rule.weights());
        let w5 = rule.weights_for(5);
        assert_eq!(w5.len(), 5);
    }

    #[test]
    fn rule_round_trip() {
        let rule = small_rule();
        let bytes = rule.save();
        let back = MagicRule::load(&bytes).unwrap();
        assert_eq!(back, rule);
        for (a, b) in back.weights().iter().zip(rule.weights()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.save(), bytes);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"M\":"));
        assert!(matches!(MagicRule::load(&bytes[..bytes.len() / 2]), Err(EimError::Malformed(_))));
        let bumped = text.replacen("\"format_version\":1", "\"format_version\":7", 1);
        assert_eq!(
            MagicRule::load(bumped.as_bytes()),
            Err(EimError::VersionMismatch { found: 7, supported: FORMAT_VERSION })
        );
    }
}
