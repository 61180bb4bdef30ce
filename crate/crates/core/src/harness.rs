//! Data generation, evaluation metrics and the experiment driver.
//!
//! Datasets are produced in two stages: [`forward_sample`] draws complete
//! cases from a network and [`obscure`] hides values. Variables listed as
//! hidden are always removed; every other value is removed independently with
//! a fixed probability. The decision to hide a value depends only on the
//! seed, the case index and the variable index, never on the value itself.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::{fit, FitConfig, Init, Termination, UpdateRule};
use crate::inference::{marginal, InferenceEngine};
use crate::model::{Network, NetworkStructure, ParameterVector, Tables, Variable};
use crate::netio::{self, DataCase, DataSet};

pub const BUILTIN_NAMES: [&str; 3] = ["chain3", "tree8", "twolayer15"];
/// Prefix that selects a built-in network wherever a network file is expected.
pub const BUILTIN_PREFIX: &str = "builtin:";

fn vars(spec: &[(&str, usize)]) -> Result<Vec<Variable>> {
    spec.iter()
        .map(|&(n, r)| Variable::with_arity(n, r))
        .collect()
}

/// Rows drawn from a flat Dirichlet, sharpened by squaring, mixed with the
/// uniform row and rounded to three decimals.
fn peaked_tables(structure: &NetworkStructure, seed: u64) -> Tables {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tables::zeros(structure);
    let rows: Vec<(usize, usize)> = t.row_indices().collect();
    for (i, j) in rows {
        let r = structure.arity(i);
        let draw: Vec<f64> = (0..r).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let sq: Vec<f64> = draw.iter().map(|x| x * x).collect();
        let total: f64 = sq.iter().sum();
        let row = t.row_mut(i, j);
        let mut acc = 0.0;
        for k in 0..r - 1 {
            let p = 0.9 * sq[k] / total + 0.1 / r as f64;
            row[k] = (p * 1000.0).round() / 1000.0;
            acc += row[k];
        }
        row[r - 1] = 1.0 - acc;
    }
    t
}

fn chain3() -> Result<Network> {
    let s = NetworkStructure::new(
        vars(&[("A", 2), ("B", 2), ("C", 2)])?,
        vec![vec![], vec![0], vec![1]],
    )?;
    let t = Tables::from_rows(
        &s,
        &[
            vec![vec![0.35, 0.65]],
            vec![vec![0.8, 0.2], vec![0.25, 0.75]],
            vec![vec![0.85, 0.15], vec![0.3, 0.7]],
        ],
    )?;
    let theta = ParameterVector::new(t, &s)?;
    Network::new("chain3", s, theta)
}

fn tree8() -> Result<Network> {
    let s = NetworkStructure::new(
        vars(&[
            ("R", 3),
            ("X1", 2),
            ("X2", 3),
            ("X3", 2),
            ("X4", 2),
            ("X5", 2),
            ("X6", 3),
            ("X7", 2),
        ])?,
        vec![
            vec![],
            vec![0],
            vec![0],
            vec![1],
            vec![1],
            vec![2],
            vec![2],
            vec![3],
        ],
    )?;
    let theta = ParameterVector::new(peaked_tables(&s, 8), &s)?;
    Network::new("tree8", s, theta)
}

fn twolayer15() -> Result<Network> {
    let mut spec: Vec<(String, usize)> = (0..5).map(|k| (format!("H{k}"), 2)).collect();
    spec.extend((0..10).map(|k| (format!("O{k}"), if k % 2 == 0 { 3 } else { 2 })));
    let variables = spec
        .iter()
        .map(|(n, r)| Variable::with_arity(n.clone(), *r))
        .collect::<Result<Vec<_>>>()?;
    let mut parents: Vec<Vec<usize>> = vec![vec![]; 5];
    for k in 0..10 {
        parents.push(vec![k % 3, 3 + k % 2]);
    }
    let s = NetworkStructure::new(variables, parents)?;
    let priors = [0.3, 0.55, 0.4, 0.65, 0.5];
    let mut tables: Vec<Vec<Vec<f64>>> = priors.iter().map(|&p| vec![vec![p, 1.0 - p]]).collect();
    // each child is a noisy copy of `h + g` (mod its arity), h from H0..H2
    // and g from H3/H4, with the peak probability varying across children
    for k in 0..10 {
        let r = s.arity(5 + k);
        let peak = 0.8 + 0.05 * (k % 3) as f64;
        let rows = (0..4)
            .map(|j| {
                let (h, g) = (j / 2, j % 2);
                let t = (h + g) % r;
                (0..r)
                    .map(|x| {
                        if x == t {
                            peak
                        } else {
                            (1.0 - peak) / (r - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        tables.push(rows);
    }
    let theta = ParameterVector::new(Tables::from_rows(&s, &tables)?, &s)?;
    Network::new("twolayer15", s, theta)
}

/// `chain3`: A → B → C, all binary. `tree8`: an eight-node tree rooted at R.
/// `twolayer15`: five binary roots H0..H4 and ten children O0..O9, each with
/// one parent among H0..H2 and one among H3..H4; H0..H2 are the natural
/// candidates for hidden variables.
pub fn builtin_network(name: &str) -> Result<Network> {
    match name {
        "chain3" => chain3(),
        "tree8" => tree8(),
        "twolayer15" => twolayer15(),
        _ => Err(Error::InvalidConfig(format!(
            "unknown built-in network `{name}` (available: {})",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

/// Loads `builtin:NAME` or a network file; relative paths resolve against `base`.
pub fn load_network_ref(reference: &str, base: &Path) -> Result<Network> {
    match reference.strip_prefix(BUILTIN_PREFIX) {
        Some(name) => builtin_network(name),
        None => netio::read_network(base.join(reference)),
    }
}

/// Ancestral sampling of `n` complete cases.
pub fn forward_sample(network: &Network, n: usize, seed: u64) -> Vec<DataCase> {
    let s = &network.structure;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = vec![0usize; s.len()];
    (0..n)
        .map(|_| {
            for &i in s.topo_order() {
                let row = network.theta.row(i, s.row_of(i, &full));
                let u: f64 = rng.random();
                let mut acc = 0.0;
                full[i] = row.len() - 1;
                for (k, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        full[i] = k;
                        break;
                    }
                }
            }
            DataCase::complete(&full)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessSpec {
    pub hidden: Vec<String>,
    pub obscure_prob: f64,
    pub seed: u64,
}

/// Hides values per `spec`. Case `l` draws one uniform per variable from its
/// own stream of the seed, so the mask is the same for any network with the
/// same number of variables.
pub fn obscure(
    structure: &NetworkStructure,
    cases: &[DataCase],
    spec: &MissingnessSpec,
) -> Result<Vec<DataCase>> {
    if !(0.0..=1.0).contains(&spec.obscure_prob) {
        return Err(Error::InvalidConfig(format!(
            "obscure probability must lie in [0, 1], got {}",
            spec.obscure_prob
        )));
    }
    let hidden: BTreeSet<usize> = spec
        .hidden
        .iter()
        .map(|h| structure.require_index(h))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    cases
        .iter()
        .enumerate()
        .map(|(l, case)| {
            case.validate(structure)?;
            rng.set_stream(l as u64 + 1);
            rng.set_word_pos(0);
            let mut out = case.clone();
            for i in 0..structure.len() {
                let u: f64 = rng.random();
                if hidden.contains(&i) || u < spec.obscure_prob {
                    out.set(i, None);
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateError {
    pub state: String,
    pub p: f64,
    pub p_star: f64,
    pub absolute: f64,
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryError {
    /// Mean of `|p − p*|` over the target's states.
    pub absolute: f64,
    /// Mean of `|p − p*| / p*` over states with `p* > 0`.
    pub relative: Option<f64>,
    /// States with `p* = 0`, left out of `relative`.
    pub zero_p_star: usize,
    pub per_state: Vec<StateError>,
}

/// Errors of the predicted distribution `p` against the reference `p_star`.
pub fn distribution_error(states: &[String], p: &[f64], p_star: &[f64]) -> QueryError {
    let per_state: Vec<StateError> = states
        .iter()
        .zip(p.iter().zip(p_star))
        .map(|(s, (&p, &q))| StateError {
            state: s.clone(),
            p,
            p_star: q,
            absolute: (p - q).abs(),
            relative: (q > 0.0).then(|| (p - q).abs() / q),
        })
        .collect();
    let absolute = per_state.iter().map(|e| e.absolute).sum::<f64>() / per_state.len() as f64;
    let rel: Vec<f64> = per_state.iter().filter_map(|e| e.relative).collect();
    QueryError {
        absolute,
        relative: (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64),
        zero_p_star: per_state.len() - rel.len(),
        per_state,
    }
}

/// Compares P(target | evidence) under the learned and the true network.
/// The target's own value, if present in `case`, is not used as evidence.
pub fn query_error(
    learned: &Network,
    truth: &Network,
    case: &DataCase,
    target: usize,
) -> Result<QueryError> {
    if learned.structure.len() != truth.structure.len() || target >= truth.structure.len() {
        return Err(Error::ShapeMismatch(
            "learned and true networks differ".into(),
        ));
    }
    let mut evidence = case.clone();
    evidence.set(target, None);
    let p = marginal(&learned.structure, &learned.theta, &evidence, &[target])?;
    let p_star = marginal(&truth.structure, &truth.theta, &evidence, &[target])?;
    Ok(distribution_error(
        truth.structure.variable(target).states(),
        &p,
        &p_star,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateReport {
    pub state: String,
    pub mean_absolute: f64,
    pub mean_relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetReport {
    pub target: String,
    pub mean_absolute: f64,
    pub mean_relative: Option<f64>,
    pub zero_p_star: usize,
    pub per_state: Vec<StateReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_cases: usize,
    pub mean_absolute: f64,
    pub mean_relative: Option<f64>,
    pub zero_p_star: usize,
    /// Mean log-likelihood of the observed values under the learned network.
    pub log_likelihood: f64,
    pub targets: Vec<TargetReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(
    learned: &Network,
    truth: &Network,
    data: &DataSet,
    targets: &[String],
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if learned.structure.variables() != truth.structure.variables() {
        return Err(Error::ShapeMismatch(
            "learned and true networks have different variables".into(),
        ));
    }
    let idx: Vec<usize> = targets
        .iter()
        .map(|t| truth.structure.require_index(t))
        .collect::<Result<_>>()?;
    let per_target: Vec<Vec<QueryError>> = idx
        .iter()
        .map(|&t| {
            data.cases
                .par_iter()
                .enumerate()
                .map(|(l, case)| query_error(learned, truth, case, t).map_err(|e| e.with_case(l)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    for (&t, errs) in idx.iter().zip(&per_target) {
        let states = truth.structure.variable(t).states();
        let per_state = states
            .iter()
            .enumerate()
            .map(|(k, s)| StateReport {
                state: s.clone(),
                mean_absolute: mean(errs.iter().map(|e| e.per_state[k].absolute)).unwrap_or(0.0),
                mean_relative: mean(errs.iter().filter_map(|e| e.per_state[k].relative)),
            })
            .collect();
        reports.push(TargetReport {
            target: truth.structure.variable(t).name().to_string(),
            mean_absolute: mean(errs.iter().map(|e| e.absolute)).unwrap_or(0.0),
            mean_relative: mean(errs.iter().filter_map(|e| e.relative)),
            zero_p_star: errs.iter().map(|e| e.zero_p_star).sum(),
            per_state,
        });
    }
    let all = || per_target.iter().flatten();
    let engine = InferenceEngine::new(&learned.structure)?;
    Ok(EvalReport {
        num_cases: data.len(),
        mean_absolute: mean(all().map(|e| e.absolute)).unwrap_or(0.0),
        mean_relative: mean(all().filter_map(|e| e.relative)),
        zero_p_star: all().map(|e| e.zero_p_star).sum(),
        log_likelihood: crate::estimation::mean_log_likelihood(&engine, &learned.theta, data)?,
        targets: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    /// Defaults to `RULE_ETA`, e.g. `em_1.8`.
    #[serde(default)]
    pub name: Option<String>,
    pub rule: UpdateRule,
    pub eta: f64,
}

impl ArmSpec {
    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}_{}", self.rule, self.eta))
    }
}

fn default_init() -> String {
    "random".into()
}
fn default_max_iters() -> usize {
    200
}
fn default_tol_ll() -> Option<f64> {
    Some(1e-6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network file, or `builtin:NAME`.
    pub network: String,
    pub train_size: usize,
    #[serde(default)]
    pub test_size: usize,
    #[serde(default)]
    pub hidden: Vec<String>,
    #[serde(default)]
    pub obscure_prob: f64,
    pub seed: u64,
    /// `random`, `uniform` or `file:PATH`.
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol_ll")]
    pub tol_ll: Option<f64>,
    #[serde(default)]
    pub tol_param: Option<f64>,
    #[serde(default)]
    pub warm_start_em1: bool,
    #[serde(default)]
    pub targets: Vec<String>,
    pub arms: Vec<ArmSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Seeds of the training sample, test sample, training mask, test mask
    /// and random initialization.
    pub fn seeds(&self) -> [u64; 5] {
        let s = self.seed;
        [
            s,
            s.wrapping_add(1),
            s.wrapping_add(2),
            s.wrapping_add(4),
            s.wrapping_add(3),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub rule: UpdateRule,
    pub eta: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Iterations until a tolerance was met; absent when the run hit `max_iters`.
    pub iterations_to_tol: Option<usize>,
    pub final_train_ll: f64,
    pub final_test_ll: Option<f64>,
    /// `max |θ_final − θ_init|`.
    pub total_param_delta: f64,
    pub train_sha256: String,
    pub test_sha256: Option<String>,
    pub errors: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub network: String,
    pub train_cases: usize,
    pub test_cases: usize,
    pub train_sha256: String,
    pub test_sha256: Option<String>,
    pub arms: Vec<ArmSummary>,
}

fn sha256_file(path: &Path) -> Result<(Vec<u8>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    Ok((bytes, digest))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !label.starts_with('.')
}

/// Runs every arm from the same initial parameters on the same sampled data.
///
/// Writes `train.csv`, `test.csv` (when `test_size > 0`), and per arm
/// `ARM.trace.csv` and `ARM.learned.json` into `out_dir`, then
/// `summary.json` last. Relative paths in the config resolve against `base`.
pub fn run_experiment(
    config: &ExperimentConfig,
    base: &Path,
    out_dir: &Path,
) -> Result<ExperimentSummary> {
    if config.arms.is_empty() {
        return Err(Error::InvalidConfig("experiment has no arms".into()));
    }
    if config.train_size == 0 {
        return Err(Error::InvalidConfig("train_size must be positive".into()));
    }
    let mut labels = BTreeSet::new();
    for arm in &config.arms {
        let label = arm.label();
        if !valid_label(&label) {
            return Err(Error::InvalidConfig(format!(
                "arm name `{label}` is not usable as a file name"
            )));
        }
        if !labels.insert(label.clone()) {
            return Err(Error::InvalidConfig(format!("duplicate arm `{label}`")));
        }
    }
    let truth = load_network_ref(&config.network, base)?;
    let s = &truth.structure;
    for t in &config.targets {
        s.require_index(t)?;
        if config.hidden.contains(t) {
            return Err(Error::InvalidConfig(format!("target `{t}` is hidden")));
        }
    }
    let [train_seed, test_seed, train_mask, test_mask, init_seed] = config.seeds();
    let mask = |seed| MissingnessSpec {
        hidden: config.hidden.clone(),
        obscure_prob: config.obscure_prob,
        seed,
    };
    let train = obscure(
        s,
        &forward_sample(&truth, config.train_size, train_seed),
        &mask(train_mask),
    )?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train_path = out_dir.join("train.csv");
    write(&train_path, &netio::dataset_to_string(s, &train))?;
    let test_path: Option<PathBuf> = if config.test_size > 0 {
        let test = obscure(
            s,
            &forward_sample(&truth, config.test_size, test_seed),
            &mask(test_mask),
        )?;
        let p = out_dir.join("test.csv");
        write(&p, &netio::dataset_to_string(s, &test))?;
        Some(p)
    } else {
        None
    };

    let init = match config.init.as_str() {
        "random" => ParameterVector::random(s, init_seed),
        "uniform" => ParameterVector::uniform(s),
        other => match other.strip_prefix("file:") {
            Some(path) => {
                let net = netio::read_network(base.join(path))?;
                if net.structure.variables() != s.variables() {
                    return Err(Error::ShapeMismatch(
                        "initial network does not match the true network".into(),
                    ));
                }
                net.theta
            }
            None => {
                return Err(Error::InvalidConfig(format!(
                    "init must be random, uniform or file:PATH, got `{other}`"
                )))
            }
        },
    };

    let arms: Vec<ArmSummary> = config
        .arms
        .par_iter()
        .map(|arm| {
            let label = arm.label();
            run_arm(
                config,
                &truth,
                arm,
                &init,
                &train_path,
                test_path.as_deref(),
                out_dir,
            )
            .map_err(|e| Error::InArm {
                arm: label,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let summary = ExperimentSummary {
        network: truth.name.clone(),
        train_cases: config.train_size,
        test_cases: config.test_size,
        train_sha256: sha256_file(&train_path)?.1,
        test_sha256: test_path
            .as_deref()
            .map(sha256_file)
            .transpose()?
            .map(|(_, h)| h),
        arms,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write(&out_dir.join("summary.json"), &text)?;
    Ok(summary)
}

fn run_arm(
    config: &ExperimentConfig,
    truth: &Network,
    arm: &ArmSpec,
    init: &ParameterVector,
    train_path: &Path,
    test_path: Option<&Path>,
    out_dir: &Path,
) -> Result<ArmSummary> {
    let s = &truth.structure;
    let read = |path: &Path| -> Result<(DataSet, String)> {
        let (bytes, hash) = sha256_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Dataset {
            line: 0,
            reason: "not UTF-8".into(),
        })?;
        Ok((netio::load_dataset(&text, s)?, hash))
    };
    let (train, train_sha256) = read(train_path)?;
    let test = test_path.map(read).transpose()?;
    let fit_config = FitConfig {
        rule: arm.rule,
        eta: arm.eta,
        max_iters: config.max_iters,
        tol_ll: config.tol_ll,
        tol_param: config.tol_param,
        init: Init::Given(init.clone()),
        warm_start_em1: config.warm_start_em1,
        keep_iterates: false,
        record_timing: false,
    };
    let result = fit(s, &train, &fit_config, test.as_ref().map(|(d, _)| d))?;
    let label = arm.label();
    netio::write_trace(&result.trace, out_dir.join(format!("{label}.trace.csv")))?;
    let learned = truth.with_theta(result.theta.clone())?;
    let learned = Network {
        name: format!("{}-{label}", truth.name),
        ..learned
    };
    netio::write_network(&learned, out_dir.join(format!("{label}.learned.json")))?;
    let errors = match (&test, config.targets.is_empty()) {
        (Some((data, _)), false) => Some(evaluate(&learned, truth, data, &config.targets)?),
        _ => None,
    };
    let last = result.trace.last().expect("trace holds the initial point");
    Ok(ArmSummary {
        name: label,
        rule: arm.rule,
        eta: arm.eta,
        iterations: result.iterations,
        termination: result.termination,
        iterations_to_tol: (result.termination != Termination::MaxIters)
            .then_some(result.iterations),
        final_train_ll: last.train_ll,
        final_test_ll: last.test_ll,
        total_param_delta: result.theta.max_abs_diff(&result.initial),
        train_sha256,
        test_sha256: test.map(|(_, h)| h),
        errors,
    })
}
