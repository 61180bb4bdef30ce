//! Exact inference for the quantities the update rules consume: case
//! likelihoods and the family posteriors P(x_i^k, pa_i^j | y).
//!
//! [`InferenceEngine`] compiles a structure once into an elimination tree: a
//! min-degree ordering of the moral graph, one cluster per eliminated variable
//! and each CPT attached to the cluster of its first-eliminated member. A case
//! is then processed by an upward pass (which yields the likelihood) and a
//! downward pass (which yields every family posterior at once). Messages are
//! rescaled to sum to one and the log of each scale factor is accumulated, so
//! likelihoods far below `f64::MIN_POSITIVE` stay representable.
//!
//! [`marginal`] answers arbitrary joint-marginal queries by plain factor
//! elimination and [`enumerate_family_posteriors`] is a brute-force oracle.

use std::collections::BTreeSet;
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::model::{NetworkStructure, Tables};
use crate::netio::DataCase;

/// Largest cluster table the engine will allocate.
pub const MAX_CLUSTER_SIZE: usize = 1 << 24;
/// Largest joint state space [`enumerate_family_posteriors`] will sum over.
pub const MAX_ENUMERATION: u128 = 1 << 20;

/// Per-family posteriors for one case: entry (i, j, k) is
/// P(X_i = x_i^k, Pa_i = pa_i^j | y). Each family's table sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyPosteriors(Tables);

impl Deref for FamilyPosteriors {
    type Target = Tables;

    fn deref(&self) -> &Tables {
        &self.0
    }
}

impl FamilyPosteriors {
    pub fn into_tables(self) -> Tables {
        self.0
    }

    /// P(Pa_i = pa_i^j | y), indexed `[i][j]`.
    pub fn parent_posteriors(&self) -> Vec<Vec<f64>> {
        self.0.row_sums()
    }
}

/// Maps every entry of a row-major table over `cards` (last index fastest)
/// to `Σ digit_p * strides[p]`.
fn index_map(cards: &[usize], strides: &[usize]) -> Vec<usize> {
    let size: usize = cards.iter().product();
    let mut out = Vec::with_capacity(size);
    let mut digits = vec![0usize; cards.len()];
    let mut idx = 0usize;
    for _ in 0..size {
        out.push(idx);
        for p in (0..cards.len()).rev() {
            digits[p] += 1;
            idx += strides[p];
            if digits[p] < cards[p] {
                break;
            }
            idx -= cards[p] * strides[p];
            digits[p] = 0;
        }
    }
    out
}

/// Strides of `sub` (row-major over the listed order) laid out along `vars`;
/// variables of `vars` not in `sub` get stride 0.
fn strides_along(vars: &[usize], sub: &[usize], arity: &[usize]) -> Vec<usize> {
    let mut sub_strides = vec![0; sub.len()];
    let mut s = 1;
    for p in (0..sub.len()).rev() {
        sub_strides[p] = s;
        s *= arity[sub[p]];
    }
    vars.iter()
        .map(|v| {
            sub.iter()
                .position(|u| u == v)
                .map_or(0, |q| sub_strides[q])
        })
        .collect()
}

fn check_case(structure: &NetworkStructure, case: &DataCase) -> Result<()> {
    case.validate(structure)
}

fn moral_graph(structure: &NetworkStructure) -> Vec<BTreeSet<usize>> {
    let n = structure.len();
    let mut adj = vec![BTreeSet::new(); n];
    for i in 0..n {
        let pa = structure.parents(i);
        for (a, &p) in pa.iter().enumerate() {
            adj[i].insert(p);
            adj[p].insert(i);
            for &q in &pa[a + 1..] {
                adj[p].insert(q);
                adj[q].insert(p);
            }
        }
    }
    adj
}

/// Greedy min-degree elimination over an undirected graph; ties go to the
/// smallest index. Returns the order and the cluster formed at each step.
fn min_degree_order(
    mut adj: Vec<BTreeSet<usize>>,
    candidates: &[usize],
) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut remaining: BTreeSet<usize> = candidates.iter().copied().collect();
    let mut order = Vec::with_capacity(remaining.len());
    let mut clusters = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let v = *remaining
            .iter()
            .min_by_key(|&&v| (adj[v].len(), v))
            .expect("non-empty");
        remaining.remove(&v);
        let nbrs: Vec<usize> = adj[v].iter().copied().collect();
        for (a, &x) in nbrs.iter().enumerate() {
            adj[x].remove(&v);
            for &y in &nbrs[a + 1..] {
                adj[x].insert(y);
                adj[y].insert(x);
            }
        }
        adj[v].clear();
        let mut cluster = nbrs;
        cluster.push(v);
        cluster.sort_unstable();
        order.push(v);
        clusters.push(cluster);
    }
    (order, clusters)
}

#[derive(Debug, Clone)]
struct FamilySlot {
    var: usize,
    arity: usize,
    /// cluster entry -> CPT entry `j * r + k`
    cpt_index: Vec<u32>,
}

#[derive(Debug, Clone)]
struct Cluster {
    size: usize,
    parent: Option<usize>,
    sep_size: usize,
    /// cluster entry -> separator entry
    to_sep: Vec<u32>,
    /// parent cluster entry -> separator entry
    parent_to_sep: Vec<u32>,
    families: Vec<FamilySlot>,
}

/// Elimination tree compiled for one network structure.
#[derive(Debug, Clone)]
pub struct InferenceEngine {
    arity: Vec<usize>,
    clusters: Vec<Cluster>,
    elimination_order: Vec<usize>,
}

/// Reusable scratch buffers for one thread.
#[derive(Debug, Clone)]
pub struct Workspace {
    beliefs: Vec<Vec<f64>>,
    up: Vec<Vec<f64>>,
    marg: Vec<f64>,
}

impl Workspace {
    pub fn new(engine: &InferenceEngine) -> Self {
        Workspace {
            beliefs: engine.clusters.iter().map(|c| vec![0.0; c.size]).collect(),
            up: engine
                .clusters
                .iter()
                .map(|c| vec![0.0; c.sep_size])
                .collect(),
            marg: Vec::new(),
        }
    }
}

impl InferenceEngine {
    pub fn new(structure: &NetworkStructure) -> Result<Self> {
        let n = structure.len();
        let arity: Vec<usize> = (0..n).map(|i| structure.arity(i)).collect();
        let all: Vec<usize> = (0..n).collect();
        let (order, cluster_vars) = min_degree_order(moral_graph(structure), &all);
        let mut position = vec![0; n];
        for (p, &v) in order.iter().enumerate() {
            position[v] = p;
        }

        let mut clusters = Vec::with_capacity(n);
        for (c, vars) in cluster_vars.iter().enumerate() {
            let size = vars
                .iter()
                .try_fold(1usize, |acc, &v| acc.checked_mul(arity[v]))
                .filter(|&s| s <= MAX_CLUSTER_SIZE)
                .ok_or_else(|| {
                    Error::InvalidStructure(format!(
                        "elimination cluster over {} variables exceeds {MAX_CLUSTER_SIZE} entries",
                        vars.len()
                    ))
                })?;
            let sep: Vec<usize> = vars.iter().copied().filter(|&v| v != order[c]).collect();
            let parent = sep.iter().map(|&u| position[u]).min();
            let sep_size: usize = sep.iter().map(|&v| arity[v]).product();
            let to_sep = index_map(
                &vars.iter().map(|&v| arity[v]).collect::<Vec<_>>(),
                &strides_along(vars, &sep, &arity),
            )
            .into_iter()
            .map(|x| x as u32)
            .collect();
            clusters.push(Cluster {
                size,
                parent,
                sep_size: if parent.is_some() { sep_size } else { 0 },
                to_sep,
                parent_to_sep: Vec::new(),
                families: Vec::new(),
            });
        }
        for c in 0..n {
            if let Some(p) = clusters[c].parent {
                let sep: Vec<usize> = cluster_vars[c]
                    .iter()
                    .copied()
                    .filter(|&v| v != order[c])
                    .collect();
                let pvars = &cluster_vars[p];
                debug_assert!(sep.iter().all(|v| pvars.contains(v)));
                clusters[c].parent_to_sep = index_map(
                    &pvars.iter().map(|&v| arity[v]).collect::<Vec<_>>(),
                    &strides_along(pvars, &sep, &arity),
                )
                .into_iter()
                .map(|x| x as u32)
                .collect();
            }
        }
        for i in 0..n {
            let mut family: Vec<usize> = structure.parents(i).to_vec();
            family.push(i);
            let c = family
                .iter()
                .map(|&v| position[v])
                .min()
                .expect("family is non-empty");
            let vars = &cluster_vars[c];
            debug_assert!(family.iter().all(|v| vars.contains(v)));
            let cpt_index = index_map(
                &vars.iter().map(|&v| arity[v]).collect::<Vec<_>>(),
                &strides_along(vars, &family, &arity),
            )
            .into_iter()
            .map(|x| x as u32)
            .collect();
            clusters[c].families.push(FamilySlot {
                var: i,
                arity: arity[i],
                cpt_index,
            });
        }
        Ok(InferenceEngine {
            arity,
            clusters,
            elimination_order: order,
        })
    }

    pub fn elimination_order(&self) -> &[usize] {
        &self.elimination_order
    }

    pub fn num_vars(&self) -> usize {
        self.arity.len()
    }

    fn check(&self, theta: &Tables, case: &DataCase) -> Result<()> {
        if theta.num_families() != self.arity.len()
            || (0..self.arity.len()).any(|i| theta.arity(i) != self.arity[i])
        {
            return Err(Error::ShapeMismatch(
                "parameters do not match the engine".into(),
            ));
        }
        if case.len() != self.arity.len() {
            return Err(Error::ShapeMismatch(format!(
                "case has {} values for {} variables",
                case.len(),
                self.arity.len()
            )));
        }
        for (i, v) in case.values().iter().enumerate() {
            if let Some(s) = *v {
                if s >= self.arity[i] {
                    return Err(Error::StateOutOfRange {
                        variable: format!("#{i}"),
                        state: s,
                        arity: self.arity[i],
                    });
                }
            }
        }
        Ok(())
    }

    /// Initializes cluster potentials and runs the upward pass.
    /// Returns log P(case).
    fn upward(&self, theta: &Tables, case: &DataCase, ws: &mut Workspace) -> Result<f64> {
        let mut log_scale = 0.0;
        for (c, cluster) in self.clusters.iter().enumerate() {
            let belief = &mut ws.beliefs[c];
            belief.fill(1.0);
            for slot in &cluster.families {
                let table = theta.table(slot.var);
                let observed = case.get(slot.var);
                for (b, &idx) in belief.iter_mut().zip(&slot.cpt_index) {
                    let idx = idx as usize;
                    match observed {
                        Some(s) if idx % slot.arity != s => *b = 0.0,
                        _ => *b *= table[idx],
                    }
                }
            }
            let sum: f64 = belief.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                return Err(Error::ZeroProbability { case: None });
            }
            belief.iter_mut().for_each(|b| *b /= sum);
            log_scale += sum.ln();
        }
        for c in 0..self.clusters.len() {
            let cluster = &self.clusters[c];
            match cluster.parent {
                Some(p) => {
                    let msg = &mut ws.up[c];
                    msg.fill(0.0);
                    for (&b, &s) in ws.beliefs[c].iter().zip(&cluster.to_sep) {
                        msg[s as usize] += b;
                    }
                    let sum: f64 = msg.iter().sum();
                    if !(sum > 0.0) {
                        return Err(Error::ZeroProbability { case: None });
                    }
                    msg.iter_mut().for_each(|m| *m /= sum);
                    log_scale += sum.ln();
                    let (before, after) = ws.beliefs.split_at_mut(p);
                    let _ = before;
                    let parent_belief = &mut after[0];
                    for (b, &s) in parent_belief.iter_mut().zip(&cluster.parent_to_sep) {
                        *b *= msg[s as usize];
                    }
                }
                None => {
                    let sum: f64 = ws.beliefs[c].iter().sum();
                    if !(sum > 0.0) {
                        return Err(Error::ZeroProbability { case: None });
                    }
                    ws.beliefs[c].iter_mut().for_each(|b| *b /= sum);
                    log_scale += sum.ln();
                }
            }
        }
        Ok(log_scale)
    }

    fn downward(&self, ws: &mut Workspace) {
        for c in (0..self.clusters.len()).rev() {
            let cluster = &self.clusters[c];
            let Some(p) = cluster.parent else {
                continue;
            };
            ws.marg.clear();
            ws.marg.resize(cluster.sep_size, 0.0);
            for (&b, &s) in ws.beliefs[p].iter().zip(&cluster.parent_to_sep) {
                ws.marg[s as usize] += b;
            }
            let up = &ws.up[c];
            let belief = &mut ws.beliefs[c];
            let mut sum = 0.0;
            for (b, &s) in belief.iter_mut().zip(&cluster.to_sep) {
                let m = up[s as usize];
                *b = if m > 0.0 {
                    *b * ws.marg[s as usize] / m
                } else {
                    0.0
                };
                sum += *b;
            }
            if sum > 0.0 {
                belief.iter_mut().for_each(|b| *b /= sum);
            }
        }
    }

    /// log P(case) under `theta`.
    pub fn log_likelihood(
        &self,
        theta: &Tables,
        case: &DataCase,
        ws: &mut Workspace,
    ) -> Result<f64> {
        self.check(theta, case)?;
        self.upward(theta, case, ws)
    }

    /// Adds `weight * P(x_i^k, pa_i^j | case)` into `acc` and returns log P(case).
    pub fn accumulate_posteriors(
        &self,
        theta: &Tables,
        case: &DataCase,
        ws: &mut Workspace,
        acc: &mut Tables,
        weight: f64,
    ) -> Result<f64> {
        self.check(theta, case)?;
        let ll = self.upward(theta, case, ws)?;
        self.downward(ws);
        for (c, cluster) in self.clusters.iter().enumerate() {
            let belief = &ws.beliefs[c];
            for slot in &cluster.families {
                let table = acc.table_mut(slot.var);
                for (&b, &idx) in belief.iter().zip(&slot.cpt_index) {
                    table[idx as usize] += weight * b;
                }
            }
        }
        Ok(ll)
    }

    pub fn family_posteriors(
        &self,
        theta: &Tables,
        case: &DataCase,
    ) -> Result<(FamilyPosteriors, f64)> {
        let mut ws = Workspace::new(self);
        let mut acc = zeros_like(theta);
        let ll = self.accumulate_posteriors(theta, case, &mut ws, &mut acc, 1.0)?;
        Ok((FamilyPosteriors(acc), ll))
    }

    /// Prior marginals P(Pa_i = pa_i^j), indexed `[i][j]`.
    pub fn parent_marginals(&self, theta: &Tables) -> Result<Vec<Vec<f64>>> {
        let (post, _) = self.family_posteriors(theta, &DataCase::empty(self.num_vars()))?;
        Ok(post.parent_posteriors())
    }
}

fn zeros_like(t: &Tables) -> Tables {
    let mut z = t.clone();
    z.as_mut_slice().fill(0.0);
    z
}

/// Product of the CPT entries selected by a complete case.
pub fn joint_probability(
    structure: &NetworkStructure,
    theta: &Tables,
    case: &DataCase,
) -> Result<f64> {
    check_case(structure, case)?;
    let full = case
        .as_complete()
        .map_err(|i| Error::IncompleteCase(structure.variable(i).name().to_string()))?;
    Ok((0..structure.len())
        .map(|i| theta.get(i, structure.row_of(i, &full), full[i]))
        .product())
}

/// log P(case), marginalizing unobserved variables.
pub fn log_marginal_likelihood(
    structure: &NetworkStructure,
    theta: &Tables,
    case: &DataCase,
) -> Result<f64> {
    let engine = InferenceEngine::new(structure)?;
    let mut ws = Workspace::new(&engine);
    engine.log_likelihood(theta, case, &mut ws)
}

pub fn family_posteriors(
    structure: &NetworkStructure,
    theta: &Tables,
    case: &DataCase,
) -> Result<FamilyPosteriors> {
    let engine = InferenceEngine::new(structure)?;
    engine.family_posteriors(theta, case).map(|(p, _)| p)
}

/// Family posteriors and P(case) by summing the joint over every completion
/// of the case.
pub fn enumerate(
    structure: &NetworkStructure,
    theta: &Tables,
    case: &DataCase,
) -> Result<(FamilyPosteriors, f64)> {
    check_case(structure, case)?;
    let count = structure.joint_state_count();
    if count > MAX_ENUMERATION {
        return Err(Error::StateSpaceTooLarge(count));
    }
    let n = structure.len();
    let free: Vec<usize> = (0..n).filter(|&i| case.get(i).is_none()).collect();
    let mut full: Vec<usize> = (0..n).map(|i| case.get(i).unwrap_or(0)).collect();
    let mut acc = Tables::zeros(structure);
    let mut rows = vec![0usize; n];
    let mut total = 0.0;
    loop {
        let mut p = 1.0;
        for i in 0..n {
            rows[i] = structure.row_of(i, &full);
            p *= theta.get(i, rows[i], full[i]);
        }
        if p != 0.0 {
            for i in 0..n {
                let idx = rows[i] * structure.arity(i) + full[i];
                acc.table_mut(i)[idx] += p;
            }
            total += p;
        }
        // odometer over the unobserved variables
        let mut carried = true;
        for &v in free.iter().rev() {
            full[v] += 1;
            if full[v] < structure.arity(v) {
                carried = false;
                break;
            }
            full[v] = 0;
        }
        if carried {
            break;
        }
    }
    if !(total > 0.0) {
        return Err(Error::ZeroProbability { case: None });
    }
    acc.as_mut_slice().iter_mut().for_each(|x| *x /= total);
    Ok((FamilyPosteriors(acc), total))
}

/// Brute-force counterpart of [`family_posteriors`]; limited to
/// [`MAX_ENUMERATION`] joint states.
pub fn enumerate_family_posteriors(
    structure: &NetworkStructure,
    theta: &Tables,
    case: &DataCase,
) -> Result<FamilyPosteriors> {
    enumerate(structure, theta, case).map(|(p, _)| p)
}

#[derive(Debug, Clone)]
struct Factor {
    vars: Vec<usize>,
    values: Vec<f64>,
}

impl Factor {
    fn cards(&self, arity: &[usize]) -> Vec<usize> {
        self.vars.iter().map(|&v| arity[v]).collect()
    }

    fn product(&self, other: &Factor, arity: &[usize]) -> Factor {
        let vars: Vec<usize> = self
            .vars
            .iter()
            .chain(&other.vars)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cards: Vec<usize> = vars.iter().map(|&v| arity[v]).collect();
        let ia = index_map(&cards, &strides_along(&vars, &self.vars, arity));
        let ib = index_map(&cards, &strides_along(&vars, &other.vars, arity));
        let values = ia
            .iter()
            .zip(&ib)
            .map(|(&a, &b)| self.values[a] * other.values[b])
            .collect();
        Factor { vars, values }
    }

    fn sum_out(&self, var: usize, arity: &[usize]) -> Factor {
        let vars: Vec<usize> = self.vars.iter().copied().filter(|&v| v != var).collect();
        let size: usize = vars.iter().map(|&v| arity[v]).product();
        let map = index_map(&self.cards(arity), &strides_along(&self.vars, &vars, arity));
        let mut values = vec![0.0; size];
        for (&x, &t) in self.values.iter().zip(&map) {
            values[t] += x;
        }
        Factor { vars, values }
    }

    /// Rescales so the largest entry is one; false if every entry is zero.
    fn rescale(&mut self) -> bool {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) {
            return false;
        }
        self.values.iter_mut().for_each(|x| *x /= max);
        true
    }
}

/// Posterior joint distribution of `query` given the observed values of
/// `case`, laid out row-major in the order of `query` (first variable most
/// significant). Computed by factor elimination with a min-degree ordering,
/// independently of [`InferenceEngine`].
pub fn marginal(
    structure: &NetworkStructure,
    theta: &Tables,
    case: &DataCase,
    query: &[usize],
) -> Result<Vec<f64>> {
    check_case(structure, case)?;
    let n = structure.len();
    let mut uniq = BTreeSet::new();
    for &q in query {
        if q >= n {
            return Err(Error::VariableIndex(q));
        }
        if !uniq.insert(q) {
            return Err(Error::InvalidConfig(format!(
                "variable `{}` queried twice",
                structure.variable(q).name()
            )));
        }
    }
    let arity: Vec<usize> = (0..n).map(|i| structure.arity(i)).collect();
    let mut factors: Vec<Factor> = Vec::with_capacity(n);
    for i in 0..n {
        let mut family: Vec<usize> = structure.parents(i).to_vec();
        family.push(i);
        let mut vars = family.clone();
        vars.sort_unstable();
        let cards: Vec<usize> = vars.iter().map(|&v| arity[v]).collect();
        let map = index_map(&cards, &strides_along(&vars, &family, &arity));
        let table = theta.table(i);
        let observed = case.get(i);
        let values = map
            .iter()
            .map(|&idx| match observed {
                Some(s) if idx % arity[i] != s => 0.0,
                _ => table[idx],
            })
            .collect();
        factors.push(Factor { vars, values });
    }

    let mut adj = vec![BTreeSet::new(); n];
    for f in &factors {
        for &a in &f.vars {
            for &b in &f.vars {
                if a != b {
                    adj[a].insert(b);
                }
            }
        }
    }
    let hidden: Vec<usize> = (0..n).filter(|v| !uniq.contains(v)).collect();
    let (order, _) = min_degree_order(adj, &hidden);
    for v in order {
        let (touching, rest): (Vec<Factor>, Vec<Factor>) =
            factors.into_iter().partition(|f| f.vars.contains(&v));
        factors = rest;
        let mut prod = touching
            .into_iter()
            .reduce(|a, b| a.product(&b, &arity))
            .expect("every variable appears in its own CPT factor");
        prod = prod.sum_out(v, &arity);
        if !prod.rescale() {
            return Err(Error::ZeroProbability { case: None });
        }
        factors.push(prod);
    }
    let mut result = factors
        .into_iter()
        .reduce(|a, b| a.product(&b, &arity))
        .unwrap_or(Factor {
            vars: Vec::new(),
            values: vec![1.0],
        });
    let total: f64 = result.values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroProbability { case: None });
    }
    result.values.iter_mut().for_each(|x| *x /= total);
    // reorder from sorted variable order to the requested order
    let qcards: Vec<usize> = query.iter().map(|&v| arity[v]).collect();
    let map = index_map(&qcards, &strides_along(query, &result.vars, &arity));
    Ok(map.into_iter().map(|i| result.values[i]).collect())
}
