//! Local convergence of EM(η) around a fixpoint θ*.
//!
//! Near θ* the EM(η) operator Φ behaves like `θ* + (I − ηM)(θ − θ*)`, where
//! `M = I − ∇Φ` at η = 1. If λ_min and λ_max are the extreme non-zero
//! eigenvalues of M, EM(η) contracts at `ρ_η = max(|1 − ηλ_min|, |1 − ηλ_max|)`,
//! which is smallest at `η* = 2 / (λ_min + λ_max)`.
//!
//! M is estimated by central differences of Φ on a chart of the simplex:
//! each row of r entries contributes its first r − 1 entries as coordinates
//! and the last entry absorbs the balance, so every probe stays on the
//! simplex.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{em_eta_step, em_eta_step_unclamped, expected_stats_with, is_fixpoint};
use crate::inference::InferenceEngine;
use crate::model::{NetworkStructure, ParameterVector, Tables};
use crate::netio::DataSet;

/// Largest parameter count the Jacobian is estimated for.
pub const MAX_PARAMS: usize = 2000;
pub const DEFAULT_CUTOFF: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-5;
/// Fixpoint residual required before linearizing.
pub const FIXPOINT_TOL: f64 = 1e-6;
/// Distances to θ* used by [`empirical_rate`] must lie between these.
pub const RATE_WINDOW: f64 = 0.05;
pub const NOISE_FLOOR: f64 = 1e-13;

/// One application of EM(η): expected statistics at `theta` followed by the
/// update, without clamping.
pub fn phi_apply(
    engine: &InferenceEngine,
    theta: &Tables,
    data: &DataSet,
    eta: f64,
) -> Result<Tables> {
    let stats = expected_stats_with(engine, theta, data)?;
    em_eta_step_unclamped(theta, &stats, eta)
}

/// Free coordinates of the simplex chart as (family, row, entry).
fn chart(theta: &Tables) -> Vec<(usize, usize, usize)> {
    theta
        .row_indices()
        .flat_map(|(i, j)| (0..theta.arity(i) - 1).map(move |k| (i, j, k)))
        .collect()
}

fn chart_values(theta: &Tables, coords: &[(usize, usize, usize)]) -> Vec<f64> {
    coords.iter().map(|&(i, j, k)| theta.get(i, j, k)).collect()
}

#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    /// `M = I − ∇Φ` on the chart.
    pub m: DMatrix<f64>,
    /// Largest entrywise gap between the derivative estimates at h and h/2.
    pub richardson_gap: f64,
    pub fixpoint_residual: f64,
}

/// Estimates M at a fixpoint. Each column uses central differences at `h`
/// and `h/2`, combined by Richardson extrapolation; the step shrinks for
/// coordinates close to the simplex boundary.
pub fn jacobian(
    engine: &InferenceEngine,
    theta_star: &Tables,
    data: &DataSet,
    h: f64,
) -> Result<JacobianEstimate> {
    if theta_star.len() > MAX_PARAMS {
        return Err(Error::DimensionTooLarge {
            dim: theta_star.len(),
            limit: MAX_PARAMS,
        });
    }
    if !(h > 0.0 && h < 0.1) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must lie in (0, 0.1), got {h}"
        )));
    }
    let stats = expected_stats_with(engine, theta_star, data)?;
    let (ok, residual) = is_fixpoint(theta_star, &stats, FIXPOINT_TOL)?;
    if !ok {
        return Err(Error::NotAFixpoint {
            residual,
            tol: FIXPOINT_TOL,
        });
    }
    let coords = chart(theta_star);
    let d = coords.len();
    let columns: Vec<(Vec<f64>, f64)> = coords
        .par_iter()
        .map(|&(i, j, k)| -> Result<(Vec<f64>, f64)> {
            let last = theta_star.arity(i) - 1;
            let room = theta_star.get(i, j, k).min(theta_star.get(i, j, last));
            let step = h.min(0.25 * room);
            let diff = |s: f64| -> Result<Vec<f64>> {
                let probe = |sign: f64| -> Result<Vec<f64>> {
                    let mut t = theta_star.clone();
                    let row = t.row_mut(i, j);
                    row[k] += sign * s;
                    row[last] -= sign * s;
                    Ok(chart_values(&phi_apply(engine, &t, data, 1.0)?, &coords))
                };
                let plus = probe(1.0)?;
                let minus = probe(-1.0)?;
                Ok(plus
                    .iter()
                    .zip(&minus)
                    .map(|(a, b)| (a - b) / (2.0 * s))
                    .collect())
            };
            let coarse = diff(step)?;
            let fine = diff(step / 2.0)?;
            let gap = coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let col = coarse
                .iter()
                .zip(&fine)
                .map(|(c, f)| (4.0 * f - c) / 3.0)
                .collect();
            Ok((col, gap))
        })
        .collect::<Result<_>>()?;
    let mut m = DMatrix::identity(d, d);
    let mut gap: f64 = 0.0;
    for (c, (col, g)) in columns.into_iter().enumerate() {
        gap = gap.max(g);
        for (r, v) in col.into_iter().enumerate() {
            m[(r, c)] -= v;
        }
    }
    Ok(JacobianEstimate {
        m,
        richardson_gap: gap,
        fixpoint_residual: residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenRange {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub rank_deficient: bool,
    /// Real parts of all eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
}

/// Extreme eigenvalues of `m`: λ_max is the largest real part, λ_min the
/// smallest real part above `cutoff`.
pub fn eigen_range(m: &DMatrix<f64>, cutoff: f64) -> Result<EigenRange> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::Spectral(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Spectral("matrix has non-finite entries".into()));
    }
    let schur = m
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or(Error::EigenNonConvergence)?;
    let mut eigenvalues: Vec<f64> = schur.complex_eigenvalues().iter().map(|z| z.re).collect();
    eigenvalues.sort_by(f64::total_cmp);
    let lambda_max = *eigenvalues.last().expect("non-empty");
    let lambda_min = eigenvalues
        .iter()
        .copied()
        .find(|&x| x > cutoff)
        .ok_or_else(|| Error::Spectral(format!("no eigenvalue above cutoff {cutoff}")))?;
    Ok(EigenRange {
        lambda_min,
        lambda_max,
        rank_deficient: eigenvalues[0] < cutoff,
        eigenvalues,
    })
}

/// `2 / (λ_min + λ_max)`.
pub fn eta_star(lambda_min: f64, lambda_max: f64) -> Result<f64> {
    if !(lambda_min > 0.0 && lambda_max >= lambda_min && lambda_max.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "eta_star needs 0 < lambda_min <= lambda_max, got ({lambda_min}, {lambda_max})"
        )));
    }
    Ok(2.0 / (lambda_min + lambda_max))
}

/// `max(|1 − ηλ_min|, |1 − ηλ_max|)`.
pub fn contraction_rate(eta: f64, lambda_min: f64, lambda_max: f64) -> f64 {
    (1.0 - eta * lambda_min)
        .abs()
        .max((1.0 - eta * lambda_max).abs())
}

fn l2(a: &Tables, b: &Tables) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Geometric mean of `‖θ_{s+1} − θ*‖ / ‖θ_s − θ*‖` over the later half of
/// the consecutive iterates whose distance to θ* lies in
/// (`NOISE_FLOOR`, `RATE_WINDOW`).
pub fn empirical_rate(iterates: &[Tables], theta_star: &Tables) -> Result<f64> {
    let dist: Vec<f64> = iterates
        .iter()
        .map(|t| {
            t.check_shape(theta_star)?;
            Ok(l2(t, theta_star))
        })
        .collect::<Result<_>>()?;
    let usable = |d: f64| d < RATE_WINDOW && d > NOISE_FLOOR;
    let ratios: Vec<f64> = dist
        .windows(2)
        .filter(|w| usable(w[0]) && usable(w[1]))
        .map(|w| w[1] / w[0])
        .collect();
    if ratios.len() < 3 {
        return Err(Error::Spectral(format!(
            "need at least 3 consecutive distance ratios within ({NOISE_FLOOR:e}, {RATE_WINDOW}) of the fixpoint, found {}",
            ratios.len()
        )));
    }
    let tail = &ratios[ratios.len() / 2..];
    Ok((tail.iter().map(|r| r.ln()).sum::<f64>() / tail.len() as f64).exp())
}

/// Runs EM(η) from a small random displacement of `theta_star` until it
/// settles and returns the observed rate, measured against the run's own
/// limit.
pub fn empirical_run(
    engine: &InferenceEngine,
    theta_star: &Tables,
    data: &DataSet,
    eta: f64,
    perturbation: f64,
    seed: u64,
    max_iters: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = theta_star.clone();
    let coords = chart(theta_star);
    let dir: Vec<f64> = coords
        .iter()
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (&(i, j, k), d) in coords.iter().zip(&dir) {
        let last = theta.arity(i) - 1;
        let room = 0.5 * theta_star.get(i, j, k).min(theta_star.get(i, j, last));
        let delta = (perturbation * d / norm).clamp(-room, room);
        let row = theta.row_mut(i, j);
        row[k] += delta;
        row[last] -= delta;
    }
    let mut iterates = vec![theta.clone()];
    for _ in 0..max_iters {
        let stats = expected_stats_with(engine, &theta, data)?;
        let next = em_eta_step(&theta, &stats, eta)?.into_tables();
        let step = l2(&next, &theta);
        theta = next;
        iterates.push(theta.clone());
        if step < 1e-16 {
            break;
        }
    }
    let limit = iterates.last().expect("non-empty").clone();
    empirical_rate(&iterates, &limit)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoEntry {
    pub eta: f64,
    pub predicted: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub eta_star: f64,
    pub rank_deficient: bool,
    pub theta_residual: f64,
    pub rho: Vec<RhoEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralOptions {
    pub cutoff: f64,
    pub step: f64,
    /// EM(1) iterations applied to the input before the analysis.
    pub refine_iters: usize,
    /// Also measure the rate of each η by running EM(η).
    pub empirical: bool,
    pub seed: u64,
    pub perturbation: f64,
    pub max_empirical_iters: usize,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        SpectralOptions {
            cutoff: DEFAULT_CUTOFF,
            step: DEFAULT_STEP,
            refine_iters: 0,
            empirical: false,
            seed: 0,
            perturbation: 1e-3,
            max_empirical_iters: 20_000,
        }
    }
}

pub fn analyze(
    structure: &NetworkStructure,
    theta: &ParameterVector,
    data: &DataSet,
    etas: &[f64],
    options: &SpectralOptions,
) -> Result<SpectralReport> {
    if let Some(&bad) = etas.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::InvalidConfig(format!(
            "learning rates must be positive, got {bad}"
        )));
    }
    let engine = InferenceEngine::new(structure)?;
    let mut point = theta.tables().clone();
    for _ in 0..options.refine_iters {
        let stats = expected_stats_with(&engine, &point, data)?;
        point = em_eta_step(&point, &stats, 1.0)?.into_tables();
    }
    let jac = jacobian(&engine, &point, data, options.step)?;
    let range = eigen_range(&jac.m, options.cutoff)?;
    let star = eta_star(range.lambda_min, range.lambda_max)?;
    let rho = etas
        .iter()
        .map(|&eta| {
            let empirical = options
                .empirical
                .then(|| {
                    empirical_run(
                        &engine,
                        &point,
                        data,
                        eta,
                        options.perturbation,
                        options.seed,
                        options.max_empirical_iters,
                    )
                })
                .transpose()?;
            Ok(RhoEntry {
                eta,
                predicted: contraction_rate(eta, range.lambda_min, range.lambda_max),
                empirical,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SpectralReport {
        lambda_min: range.lambda_min,
        lambda_max: range.lambda_max,
        eta_star: star,
        rank_deficient: range.rank_deficient,
        theta_residual: jac.fixpoint_residual,
        rho,
    })
}
