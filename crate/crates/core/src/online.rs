//! One-case-at-a-time versions of the update rules.
//!
//! Each step computes the posteriors P(x_i^k, pa_i^j | y_t) of the arriving
//! case and the prior marginals P(pa_i^j) of the current model, which stand
//! in for the parent probability of the batch rules.
//!
//! [`OnlineState`] keeps two views of the parameters. `estimate` is the raw
//! iterate of the update rule and is pulled back onto the simplex only when
//! an entry turns negative. `theta` is `estimate` with every entry clamped to
//! [`EPS_FLOOR`](crate::model::EPS_FLOOR); it is the model used for inference
//! and the one reported to callers. Keeping the raw iterate lets the
//! `per_row` schedule reproduce running frequencies exactly even for rows
//! that have so far seen a single state.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{eg_rows, em_rows, UpdateRule, TAU_ROW};
use crate::inference::{InferenceEngine, Workspace};
use crate::model::{project_row, NetworkStructure, ParameterVector, Tables};
use crate::netio::DataCase;

/// Upper bound on any learning rate a schedule produces.
pub const ETA_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Fixed(f64),
    /// `η_t = c / (t + t0)` for the t-th case (t starting at 1).
    InverseT {
        c: f64,
        t0: f64,
    },
    /// `η_ij = P(pa_i^j) / (P(pa_i^j) + n_ij)` with `n_ij` the accumulated
    /// posterior mass of the row. Reduces to `1 / (n_ij + 1)` for roots and
    /// makes on-line EM on complete data a running average.
    PerRow,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Fixed(eta) if !(eta > 0.0 && eta <= ETA_MAX) => Err(Error::InvalidConfig(
                format!("fixed rate must lie in (0, {ETA_MAX}], got {eta}"),
            )),
            Schedule::InverseT { c, t0 }
                if !(c > 0.0 && c.is_finite() && t0 >= 0.0 && t0.is_finite()) =>
            {
                Err(Error::InvalidConfig(format!(
                    "inv_t needs c > 0 and t0 >= 0, got c={c}, t0={t0}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Rate for row (i, j) at step `t` (1-based), given the model marginal
    /// of the row and its visit mass before this step.
    pub fn rate(&self, t: u64, p_hat: f64, visits: f64) -> f64 {
        match *self {
            Schedule::Fixed(eta) => eta,
            Schedule::InverseT { c, t0 } => (c / (t as f64 + t0)).min(ETA_MAX),
            Schedule::PerRow => p_hat / (p_hat + visits),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Fixed(eta) => write!(f, "fixed:{eta}"),
            Schedule::InverseT { c, t0 } => write!(f, "inv_t:{c},{t0}"),
            Schedule::PerRow => f.write_str("per_row"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `fixed:ETA`, `inv_t:C,T0` or `per_row`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidConfig(format!(
                "bad schedule `{s}` (expected fixed:ETA, inv_t:C,T0 or per_row)"
            ))
        };
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let schedule = match s.split_once(':') {
            None if s == "per_row" => Schedule::PerRow,
            Some(("fixed", eta)) => Schedule::Fixed(num(eta)?),
            Some(("inv_t", args)) => {
                let (c, t0) = args.split_once(',').ok_or_else(bad)?;
                Schedule::InverseT {
                    c: num(c)?,
                    t0: num(t0)?,
                }
            }
            _ => return Err(bad()),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    estimate: Tables,
    theta: ParameterVector,
    t: u64,
    visits: Vec<Vec<f64>>,
    skipped: u64,
}

impl OnlineState {
    pub fn new(theta: ParameterVector) -> Self {
        let visits = (0..theta.num_families())
            .map(|i| vec![0.0; theta.num_rows(i)])
            .collect();
        OnlineState {
            estimate: theta.tables().clone(),
            theta,
            t: 0,
            visits,
            skipped: 0,
        }
    }

    /// Current model, clamped to the floor.
    pub fn theta(&self) -> &ParameterVector {
        &self.theta
    }

    /// Raw iterate of the update rule.
    pub fn estimate(&self) -> &Tables {
        &self.estimate
    }

    /// Cases consumed so far, skipped ones included.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Accumulated posterior mass `Σ_t P(pa_i^j | y_t)` per row.
    pub fn visits(&self) -> &[Vec<f64>] {
        &self.visits
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn into_theta(self) -> ParameterVector {
        self.theta
    }
}

/// What a single step observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// log P(case) under the model before the update.
    pub case_ll: f64,
    /// `‖θ^{t+1} − θ^t‖₂` of the clamped model.
    pub l2_step: f64,
}

fn rates(state: &OnlineState, schedule: &Schedule, p_hat: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = state.t + 1;
    p_hat
        .iter()
        .zip(&state.visits)
        .map(|(ph, n)| {
            ph.iter()
                .zip(n)
                .map(|(&p, &v)| schedule.rate(t, p, v))
                .collect()
        })
        .collect()
}

/// EM under [`Schedule::PerRow`]. With `η = P̂ / (P̂ + n)` the model marginal
/// cancels in the row normalization, leaving `(post + n·θ) / (m + n)` with
/// `m` the posterior mass of the row. Rows with `m + n ≤ TAU_ROW` are frozen.
fn running_average(base: &Tables, post: &Tables, visits: &[Vec<f64>]) -> Tables {
    let mut out = base.clone();
    let rows: Vec<(usize, usize)> = base.row_indices().collect();
    for (i, j) in rows {
        let n = visits[i][j];
        let m: f64 = post.row(i, j).iter().sum();
        if !(m + n > TAU_ROW) {
            continue;
        }
        for (x, &a) in out.row_mut(i, j).iter_mut().zip(post.row(i, j)) {
            *x = (a + n * *x) / (m + n);
        }
    }
    out
}

fn step(
    engine: &InferenceEngine,
    state: &mut OnlineState,
    case: &DataCase,
    schedule: &Schedule,
    rule: UpdateRule,
) -> Result<StepInfo> {
    let theta = state.theta.tables();
    let mut ws = Workspace::new(engine);
    let mut post = theta.clone();
    post.as_mut_slice().fill(0.0);
    let case_ll = engine.accumulate_posteriors(theta, case, &mut ws, &mut post, 1.0)?;
    let p_hat = engine.parent_marginals(theta)?;
    let eta = rates(state, schedule, &p_hat);
    let rate = |i: usize, j: usize| eta[i][j];

    let mut next = match rule {
        UpdateRule::Em if *schedule == Schedule::PerRow => {
            running_average(&state.estimate, &post, &state.visits)
        }
        UpdateRule::Em => em_rows(&state.estimate, &post, &p_hat, rate)?,
        UpdateRule::Eg => eg_rows(theta, &post, &p_hat, rate)?,
        UpdateRule::Gp => {
            let mut out = state.estimate.clone();
            for (i, j) in theta.row_indices() {
                if !(p_hat[i][j] > TAU_ROW) {
                    continue;
                }
                let grad: Vec<f64> = post
                    .row(i, j)
                    .iter()
                    .zip(theta.row(i, j))
                    .map(|(a, t)| a / t)
                    .collect();
                let mean = grad.iter().sum::<f64>() / grad.len() as f64;
                for (x, g) in out.row_mut(i, j).iter_mut().zip(&grad) {
                    *x += rate(i, j) * (g - mean);
                }
            }
            out
        }
    };
    let rows: Vec<(usize, usize)> = next.row_indices().collect();
    for (i, j) in rows {
        let row = next.row_mut(i, j);
        if row.iter().any(|&x| !(x >= 0.0)) {
            project_row(row);
        }
    }
    let model = ParameterVector::from_projected(next.clone());
    let l2_step = model
        .as_slice()
        .iter()
        .zip(theta.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    let parent_post = post.row_sums();
    for (n, pp) in state.visits.iter_mut().zip(&parent_post) {
        n.iter_mut().zip(pp).for_each(|(n, p)| *n += p);
    }
    state.estimate = next;
    state.theta = model;
    state.t += 1;
    Ok(StepInfo { case_ll, l2_step })
}

pub fn online_em_step(
    engine: &InferenceEngine,
    state: &mut OnlineState,
    case: &DataCase,
    schedule: &Schedule,
) -> Result<StepInfo> {
    step(engine, state, case, schedule, UpdateRule::Em)
}

pub fn online_eg_step(
    engine: &InferenceEngine,
    state: &mut OnlineState,
    case: &DataCase,
    schedule: &Schedule,
) -> Result<StepInfo> {
    step(engine, state, case, schedule, UpdateRule::Eg)
}

pub fn online_gp_step(
    engine: &InferenceEngine,
    state: &mut OnlineState,
    case: &DataCase,
    schedule: &Schedule,
) -> Result<StepInfo> {
    step(engine, state, case, schedule, UpdateRule::Gp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnlineTraceRecord {
    /// Index of the case in the stream.
    pub t: u64,
    /// Empty when the case was skipped.
    pub case_ll: Option<f64>,
    pub l2_step: f64,
    /// Cases skipped so far, this one included.
    pub skipped: u64,
}

/// Feeds `cases` through `rule` in order. Cases of zero probability under
/// the current model are skipped and counted instead of aborting the run.
pub fn run_stream<'a>(
    structure: &NetworkStructure,
    initial: ParameterVector,
    cases: impl IntoIterator<Item = &'a DataCase>,
    rule: UpdateRule,
    schedule: &Schedule,
) -> Result<(OnlineState, Vec<OnlineTraceRecord>)> {
    schedule.validate()?;
    initial.check_shape(&Tables::zeros(structure))?;
    let engine = InferenceEngine::new(structure)?;
    let mut state = OnlineState::new(initial);
    let mut trace = Vec::new();
    for case in cases {
        let t = state.t;
        case.validate(structure).map_err(|e| Error::AtIteration {
            iteration: t as usize,
            source: Box::new(e),
        })?;
        match step(&engine, &mut state, case, schedule, rule) {
            Ok(info) => trace.push(OnlineTraceRecord {
                t,
                case_ll: Some(info.case_ll),
                l2_step: info.l2_step,
                skipped: state.skipped,
            }),
            Err(Error::ZeroProbability { .. }) => {
                state.t += 1;
                state.skipped += 1;
                trace.push(OnlineTraceRecord {
                    t,
                    case_ll: None,
                    l2_step: 0.0,
                    skipped: state.skipped,
                });
            }
            Err(e) => {
                return Err(Error::AtIteration {
                    iteration: t as usize,
                    source: Box::new(e),
                });
            }
        }
    }
    Ok((state, trace))
}
