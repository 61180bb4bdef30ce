//! Batch estimation: the E-step, the likelihood gradient, the three update
//! rules and the fit loop.
//!
//! All rules consume [`SufficientStats`], the dataset average of the family
//! posteriors. With `joint = E(x_i^k, pa_i^j | D)` and `parent = E(pa_i^j | D)`:
//!
//! * gradient projection: `θ + η (∇ − mean_k ∇)` with `∇ = joint / θ`
//! * EM(η): `η · joint / parent + (1 − η) θ`
//! * EG(η): `θ · exp(η · joint / (θ · parent))`, renormalized per row
//!
//! Every step ends by clamping entries to [`EPS_FLOOR`] and renormalizing.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{InferenceEngine, Workspace};
use crate::model::{project_row, NetworkStructure, ParameterVector, Tables};
use crate::netio::{DataCase, DataSet};

/// Rows whose parent mass is at most this are left unchanged by a step.
pub const TAU_ROW: f64 = 1e-12;
/// Exponents of the EG update are clipped to `[0, EXP_MAX]`.
pub const EXP_MAX: f64 = 500.0;
/// Cases per parallel work unit in the E-step. Partial sums are combined in
/// block order, so results do not depend on the thread count.
pub const BLOCK_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// E(x_i^k, pa_i^j | D), the mean family posterior.
    pub joint: Tables,
    /// E(pa_i^j | D) = Σ_k joint(i, j, k), indexed `[i][j]`.
    pub parent: Vec<Vec<f64>>,
    /// Mean log-likelihood of the cases at the parameters used.
    pub log_likelihood: f64,
    pub num_cases: usize,
}

fn block_sums<T, F>(cases: &[DataCase], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &[DataCase]) -> Result<T> + Sync,
{
    cases
        .par_chunks(BLOCK_SIZE)
        .enumerate()
        .map(|(b, chunk)| f(b * BLOCK_SIZE, chunk))
        .collect()
}

pub fn expected_stats(
    structure: &NetworkStructure,
    theta: &Tables,
    data: &DataSet,
) -> Result<SufficientStats> {
    let engine = InferenceEngine::new(structure)?;
    expected_stats_with(&engine, theta, data)
}

/// [`expected_stats`] with a precompiled engine.
pub fn expected_stats_with(
    engine: &InferenceEngine,
    theta: &Tables,
    data: &DataSet,
) -> Result<SufficientStats> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let partials = block_sums(&data.cases, |start, chunk| {
        let mut ws = Workspace::new(engine);
        let mut acc = theta.clone();
        acc.as_mut_slice().fill(0.0);
        let mut ll = 0.0;
        for (idx, case) in chunk.iter().enumerate() {
            ll += engine
                .accumulate_posteriors(theta, case, &mut ws, &mut acc, 1.0)
                .map_err(|e| e.with_case(start + idx))?;
        }
        Ok((acc, ll))
    })?;
    let mut parts = partials.into_iter();
    let (mut joint, mut ll) = parts.next().expect("dataset is non-empty");
    for (acc, part_ll) in parts {
        joint
            .as_mut_slice()
            .iter_mut()
            .zip(acc.as_slice())
            .for_each(|(a, b)| *a += b);
        ll += part_ll;
    }
    let n = data.len() as f64;
    joint.as_mut_slice().iter_mut().for_each(|x| *x /= n);
    let parent = joint.row_sums();
    Ok(SufficientStats {
        joint,
        parent,
        log_likelihood: ll / n,
        num_cases: data.len(),
    })
}

/// Mean log-likelihood of the observed values of each case.
pub fn mean_log_likelihood(
    engine: &InferenceEngine,
    theta: &Tables,
    data: &DataSet,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let partials = block_sums(&data.cases, |start, chunk| {
        let mut ws = Workspace::new(engine);
        chunk.iter().enumerate().try_fold(0.0, |acc, (idx, case)| {
            engine
                .log_likelihood(theta, case, &mut ws)
                .map(|ll| acc + ll)
                .map_err(|e| e.with_case(start + idx))
        })
    })?;
    Ok(partials.into_iter().sum::<f64>() / data.len() as f64)
}

/// `joint / θ`, entrywise.
pub fn gradient(stats: &SufficientStats, theta: &Tables) -> Result<Tables> {
    stats.joint.check_shape(theta)?;
    let mut g = stats.joint.clone();
    g.as_mut_slice()
        .iter_mut()
        .zip(theta.as_slice())
        .for_each(|(x, t)| *x /= t);
    Ok(g)
}

fn project_all(mut t: Tables) -> ParameterVector {
    let rows: Vec<(usize, usize)> = t.row_indices().collect();
    for (i, j) in rows {
        project_row(t.row_mut(i, j));
    }
    ParameterVector::from_projected(t)
}

/// Gradient projection step before clamping.
pub fn gp_step_unclamped(theta: &Tables, grad: &Tables, eta: f64) -> Result<Tables> {
    theta.check_shape(grad)?;
    let mut out = theta.clone();
    let rows: Vec<(usize, usize)> = theta.row_indices().collect();
    for (i, j) in rows {
        let g = grad.row(i, j);
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        for (x, gk) in out.row_mut(i, j).iter_mut().zip(g) {
            *x += eta * (gk - mean);
        }
    }
    Ok(out)
}

pub fn gp_step(theta: &Tables, grad: &Tables, eta: f64) -> Result<ParameterVector> {
    gp_step_unclamped(theta, grad, eta).map(project_all)
}

/// EM(η) rows `η · joint / p_hat + (1 − η) · base`, divided by their sum,
/// with `eta(i, j)` the rate of row (i, j). Rows with `p_hat ≤ TAU_ROW`, or
/// whose raw sum is at most `TAU_ROW`, keep the values of `base`.
///
/// When `p_hat` is the row sum of `joint` the raw rows already sum to one.
/// Any other estimate of the parent probability, such as the model marginal
/// used on-line, is absorbed by the row normalization.
pub fn em_rows(
    base: &Tables,
    joint: &Tables,
    p_hat: &[Vec<f64>],
    eta: impl Fn(usize, usize) -> f64,
) -> Result<Tables> {
    base.check_shape(joint)?;
    let mut out = base.clone();
    let rows: Vec<(usize, usize)> = base.row_indices().collect();
    for (i, j) in rows {
        let p = p_hat[i][j];
        if !(p > TAU_ROW) {
            continue;
        }
        let e = eta(i, j);
        if e == 0.0 {
            continue;
        }
        let jr = joint.row(i, j);
        let row = out.row_mut(i, j);
        for (x, &a) in row.iter_mut().zip(jr) {
            *x = e * a / p + (1.0 - e) * *x;
        }
        let sum: f64 = row.iter().sum();
        if !(sum > TAU_ROW) {
            row.copy_from_slice(base.row(i, j));
        } else if sum != 1.0 {
            row.iter_mut().for_each(|x| *x /= sum);
        }
    }
    Ok(out)
}

pub fn em_eta_step_unclamped(theta: &Tables, stats: &SufficientStats, eta: f64) -> Result<Tables> {
    em_rows(theta, &stats.joint, &stats.parent, |_, _| eta)
}

pub fn em_eta_step(theta: &Tables, stats: &SufficientStats, eta: f64) -> Result<ParameterVector> {
    em_eta_step_unclamped(theta, stats, eta).map(project_all)
}

/// EM(η) with the parent probabilities supplied explicitly instead of taken
/// from `stats`.
pub fn em_eta_step_with(
    theta: &Tables,
    joint: &Tables,
    p_hat: &[Vec<f64>],
    eta: f64,
) -> Result<ParameterVector> {
    em_rows(theta, joint, p_hat, |_, _| eta).map(project_all)
}

/// EG rows `base · exp(clip(η · joint / (base · p_hat), 0, EXP_MAX))`,
/// normalized; frozen where `p_hat ≤ TAU_ROW`.
pub fn eg_rows(
    base: &Tables,
    joint: &Tables,
    p_hat: &[Vec<f64>],
    eta: impl Fn(usize, usize) -> f64,
) -> Result<Tables> {
    base.check_shape(joint)?;
    let mut out = base.clone();
    let rows: Vec<(usize, usize)> = base.row_indices().collect();
    let mut expo = Vec::new();
    for (i, j) in rows {
        let p = p_hat[i][j];
        if !(p > TAU_ROW) {
            continue;
        }
        let e = eta(i, j);
        let b = base.row(i, j);
        expo.clear();
        expo.extend(
            b.iter()
                .zip(joint.row(i, j))
                .map(|(&t, &a)| (e * a / (t * p)).clamp(0.0, EXP_MAX)),
        );
        // shifting every exponent by the row maximum leaves the normalized row unchanged
        let top = expo.iter().copied().fold(0.0, f64::max);
        let row = out.row_mut(i, j);
        for ((x, &t), &a) in row.iter_mut().zip(b).zip(&expo) {
            *x = t * (a - top).exp();
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
    Ok(out)
}

pub fn eg_eta_step(theta: &Tables, stats: &SufficientStats, eta: f64) -> Result<ParameterVector> {
    eg_rows(theta, &stats.joint, &stats.parent, |_, _| eta).map(project_all)
}

/// Largest `|θ_ijk − joint / parent|` over rows with parent mass above
/// [`TAU_ROW`], and whether it is below `tol`.
pub fn is_fixpoint(theta: &Tables, stats: &SufficientStats, tol: f64) -> Result<(bool, f64)> {
    theta.check_shape(&stats.joint)?;
    let mut residual: f64 = 0.0;
    for (i, j) in theta.row_indices() {
        let p = stats.parent[i][j];
        if !(p > TAU_ROW) {
            continue;
        }
        for (&t, &a) in theta.row(i, j).iter().zip(stats.joint.row(i, j)) {
            residual = residual.max((t - a / p).abs());
        }
    }
    Ok((residual < tol, residual))
}

fn check_weights(a: &Tables, weights: &[Vec<f64>]) -> Result<()> {
    let ok = weights.len() == a.num_families()
        && weights
            .iter()
            .enumerate()
            .all(|(i, w)| w.len() == a.num_rows(i));
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(
            "parent weights do not match the parameter tables".into(),
        ))
    }
}

/// `Σ_ij w_ij · KL(a_ij ‖ b_ij)`.
pub fn distance_kl(a: &Tables, b: &Tables, weights: &[Vec<f64>]) -> Result<f64> {
    a.check_shape(b)?;
    check_weights(a, weights)?;
    let mut total = 0.0;
    for (i, j) in a.row_indices() {
        let w = weights[i][j];
        if w == 0.0 {
            continue;
        }
        let kl: f64 = a
            .row(i, j)
            .iter()
            .zip(b.row(i, j))
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / y).ln())
            .sum();
        total += w * kl;
    }
    Ok(total)
}

/// `Σ_ij w_ij · ½ Σ_k (a − b)² / b`.
pub fn distance_chi2(a: &Tables, b: &Tables, weights: &[Vec<f64>]) -> Result<f64> {
    a.check_shape(b)?;
    check_weights(a, weights)?;
    let mut total = 0.0;
    for (i, j) in a.row_indices() {
        let w = weights[i][j];
        if w == 0.0 {
            continue;
        }
        let chi: f64 = a
            .row(i, j)
            .iter()
            .zip(b.row(i, j))
            .map(|(&x, &y)| (x - y) * (x - y) / y)
            .sum();
        total += w * 0.5 * chi;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    Em,
    Eg,
    Gp,
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateRule::Em => "em",
            UpdateRule::Eg => "eg",
            UpdateRule::Gp => "gp",
        })
    }
}

impl FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(UpdateRule::Em),
            "eg" => Ok(UpdateRule::Eg),
            "gp" => Ok(UpdateRule::Gp),
            _ => Err(Error::InvalidConfig(format!(
                "unknown rule `{s}` (expected em, eg or gp)"
            ))),
        }
    }
}

impl<'de> serde::Deserialize<'de> for UpdateRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One step of `rule` from `theta` given the statistics at `theta`.
pub fn apply_rule(
    rule: UpdateRule,
    theta: &Tables,
    stats: &SufficientStats,
    eta: f64,
) -> Result<ParameterVector> {
    match rule {
        UpdateRule::Em => em_eta_step(theta, stats, eta),
        UpdateRule::Eg => eg_eta_step(theta, stats, eta),
        UpdateRule::Gp => gp_step(theta, &gradient(stats, theta)?, eta),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Random { seed: u64 },
    Uniform,
    Given(ParameterVector),
}

impl Init {
    pub fn materialize(&self, structure: &NetworkStructure) -> Result<ParameterVector> {
        match self {
            Init::Random { seed } => Ok(ParameterVector::random(structure, *seed)),
            Init::Uniform => Ok(ParameterVector::uniform(structure)),
            Init::Given(theta) => {
                theta.check_shape(&Tables::zeros(structure))?;
                Ok(ParameterVector::from_projected(theta.tables().clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub rule: UpdateRule,
    pub eta: f64,
    pub max_iters: usize,
    /// Stop when `|ΔL_D| < tol_ll`.
    pub tol_ll: Option<f64>,
    /// Stop when `max |Δθ| < tol_param`.
    pub tol_param: Option<f64>,
    pub init: Init,
    /// Make the first iteration an EM(1) step regardless of `rule` and `eta`.
    pub warm_start_em1: bool,
    /// Keep every iterate in [`FitResult::iterates`].
    pub keep_iterates: bool,
    /// Fill the `wall_ms` trace column. Off by default so traces are reproducible.
    pub record_timing: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            rule: UpdateRule::Em,
            eta: 1.0,
            max_iters: 200,
            tol_ll: Some(1e-6),
            tol_param: None,
            init: Init::Uniform,
            warm_start_em1: false,
            keep_iterates: false,
            record_timing: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be a finite non-negative number, got {}",
                self.eta
            )));
        }
        for (name, tol) in [("tol_ll", self.tol_ll), ("tol_param", self.tol_param)] {
            if let Some(t) = tol {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "{name} must be positive, got {t}"
                    )));
                }
            }
        }
        if self.tol_ll.is_none() && self.tol_param.is_none() {
            return Err(Error::InvalidConfig(
                "at least one of tol_ll and tol_param must be set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub train_ll: f64,
    pub test_ll: Option<f64>,
    /// `max |θ_t − θ_{t−1}|`.
    pub max_param_delta: f64,
    /// `‖θ_t − θ_{t−1}‖₂`.
    pub l2_step: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TolLl,
    TolParam,
    MaxIters,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::TolLl => "tol_ll",
            Termination::TolParam => "tol_param",
            Termination::MaxIters => "max_iters",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: ParameterVector,
    pub initial: ParameterVector,
    /// Statistics at the final parameters.
    pub stats: SufficientStats,
    pub trace: Vec<TraceRecord>,
    pub termination: Termination,
    /// Number of update steps taken.
    pub iterations: usize,
    /// Every iterate including the initial point, when requested.
    pub iterates: Vec<Tables>,
}

fn l2_norm_diff(a: &Tables, b: &Tables) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn fit(
    structure: &NetworkStructure,
    data: &DataSet,
    config: &FitConfig,
    test: Option<&DataSet>,
) -> Result<FitResult> {
    config.validate()?;
    let engine = InferenceEngine::new(structure)?;
    let start = Instant::now();
    let elapsed = |on: bool| on.then(|| start.elapsed().as_secs_f64() * 1e3);
    let at = |iteration: usize| {
        move |e: Error| Error::AtIteration {
            iteration,
            source: Box::new(e),
        }
    };

    let initial = config.init.materialize(structure)?;
    let mut theta = initial.clone();
    let mut stats = expected_stats_with(&engine, &theta, data).map_err(at(0))?;
    let test_ll = |theta: &Tables, iteration: usize| -> Result<Option<f64>> {
        test.map(|t| mean_log_likelihood(&engine, theta, t))
            .transpose()
            .map_err(at(iteration))
    };
    let mut trace = vec![TraceRecord {
        iter: 0,
        train_ll: stats.log_likelihood,
        test_ll: test_ll(&theta, 0)?,
        max_param_delta: 0.0,
        l2_step: 0.0,
        wall_ms: elapsed(config.record_timing),
    }];
    let mut iterates = Vec::new();
    if config.keep_iterates {
        iterates.push(theta.tables().clone());
    }
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    for iter in 1..=config.max_iters {
        let (rule, eta) = if config.warm_start_em1 && iter == 1 {
            (UpdateRule::Em, 1.0)
        } else {
            (config.rule, config.eta)
        };
        let next = apply_rule(rule, &theta, &stats, eta).map_err(at(iter))?;
        let next_stats = expected_stats_with(&engine, &next, data).map_err(at(iter))?;
        let delta = next.max_abs_diff(&theta);
        let record = TraceRecord {
            iter,
            train_ll: next_stats.log_likelihood,
            test_ll: test_ll(&next, iter)?,
            max_param_delta: delta,
            l2_step: l2_norm_diff(&next, &theta),
            wall_ms: elapsed(config.record_timing),
        };
        let ll_change = (next_stats.log_likelihood - stats.log_likelihood).abs();
        trace.push(record);
        if config.keep_iterates {
            iterates.push(next.tables().clone());
        }
        theta = next;
        stats = next_stats;
        iterations = iter;
        if config.tol_ll.is_some_and(|t| ll_change < t) {
            termination = Termination::TolLl;
            break;
        }
        if config.tol_param.is_some_and(|t| delta < t) {
            termination = Termination::TolParam;
            break;
        }
    }
    Ok(FitResult {
        theta,
        initial,
        stats,
        trace,
        termination,
        iterations,
        iterates,
    })
}
