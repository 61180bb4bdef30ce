//! Discrete Bayesian network representation: variables, parent structure and
//! the conditional probability tables (CPTs).
//!
//! Row `j` of the table of variable `i` enumerates parent configurations in
//! lexicographic order: the first listed parent is the most significant digit
//! and each parent's states follow their declared order. This ordering is part
//! of the network file format.

use std::collections::HashSet;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Smallest value any estimator leaves in a CPT entry.
pub const EPS_FLOOR: f64 = 1e-9;
pub const MAX_ARITY: usize = 64;
pub const MAX_ROWS: usize = 1 << 20;
/// Tolerance on row sums of a valid parameter vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

fn valid_token(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variable {
    name: String,
    states: Vec<String>,
}

impl Variable {
    /// Names and states are restricted to `[A-Za-z0-9_-]` so they can appear
    /// unquoted in dataset files.
    pub fn new(name: impl Into<String>, states: Vec<String>) -> Result<Self> {
        let name = name.into();
        let invalid = |reason: String| Error::InvalidVariable {
            name: name.clone(),
            reason,
        };
        if !valid_token(&name) {
            return Err(invalid("name must match [A-Za-z0-9_-]+".into()));
        }
        if states.len() < 2 {
            return Err(invalid(format!("arity {} < 2", states.len())));
        }
        if states.len() > MAX_ARITY {
            return Err(invalid(format!(
                "arity {} exceeds {MAX_ARITY}",
                states.len()
            )));
        }
        let mut seen = HashSet::new();
        for s in &states {
            if !valid_token(s) {
                return Err(invalid(format!("state `{s}` must match [A-Za-z0-9_-]+")));
            }
            if !seen.insert(s.as_str()) {
                return Err(invalid(format!("duplicate state `{s}`")));
            }
        }
        Ok(Variable { name, states })
    }

    /// Variable with states `s0 .. s{arity-1}`.
    pub fn with_arity(name: impl Into<String>, arity: usize) -> Result<Self> {
        Self::new(name, (0..arity).map(|k| format!("s{k}")).collect())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn arity(&self) -> usize {
        self.states.len()
    }

    pub fn state_index(&self, state: &str) -> Option<usize> {
        self.states.iter().position(|s| s == state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkStructure {
    variables: Vec<Variable>,
    parents: Vec<Vec<usize>>,
    topo_order: Vec<usize>,
    rows: Vec<usize>,
}

impl NetworkStructure {
    pub fn new(variables: Vec<Variable>, parents: Vec<Vec<usize>>) -> Result<Self> {
        let n = variables.len();
        if parents.len() != n {
            return Err(Error::InvalidStructure(format!(
                "{} parent lists for {n} variables",
                parents.len()
            )));
        }
        let mut names = HashSet::new();
        for v in &variables {
            if !names.insert(v.name()) {
                return Err(Error::InvalidStructure(format!(
                    "duplicate variable name `{}`",
                    v.name()
                )));
            }
        }
        let mut rows = Vec::with_capacity(n);
        for (i, pa) in parents.iter().enumerate() {
            let mut seen = HashSet::new();
            let mut q: usize = 1;
            for &p in pa {
                if p >= n {
                    return Err(Error::VariableIndex(p));
                }
                if p == i {
                    return Err(Error::Cycle(variables[i].name().to_string()));
                }
                if !seen.insert(p) {
                    return Err(Error::InvalidStructure(format!(
                        "duplicate parent `{}` of `{}`",
                        variables[p].name(),
                        variables[i].name()
                    )));
                }
                q = q.saturating_mul(variables[p].arity());
            }
            if q > MAX_ROWS {
                return Err(Error::InvalidStructure(format!(
                    "`{}` has {q} parent configurations (limit {MAX_ROWS})",
                    variables[i].name()
                )));
            }
            rows.push(q);
        }
        let topo_order = topological_order(&variables, &parents)?;
        Ok(NetworkStructure {
            variables,
            parents,
            topo_order,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, i: usize) -> &Variable {
        &self.variables[i]
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn arity(&self, i: usize) -> usize {
        self.variables[i].arity()
    }

    /// Number of parent configurations q_i.
    pub fn num_rows(&self, i: usize) -> usize {
        self.rows[i]
    }

    pub fn num_params(&self) -> usize {
        (0..self.len()).map(|i| self.rows[i] * self.arity(i)).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name() == name)
    }

    pub fn require_index(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Product of all arities, saturating at `u128::MAX`.
    pub fn joint_state_count(&self) -> u128 {
        self.variables
            .iter()
            .fold(1u128, |acc, v| acc.saturating_mul(v.arity() as u128))
    }

    /// Row index of a parent assignment given in the order of `parents(i)`.
    pub fn parent_config_index(&self, i: usize, assignment: &[usize]) -> Result<usize> {
        if i >= self.len() {
            return Err(Error::VariableIndex(i));
        }
        let pa = &self.parents[i];
        if assignment.len() != pa.len() {
            return Err(Error::ShapeMismatch(format!(
                "`{}` has {} parents, assignment has {} values",
                self.variables[i].name(),
                pa.len(),
                assignment.len()
            )));
        }
        let mut j = 0;
        for (&p, &s) in pa.iter().zip(assignment) {
            let r = self.arity(p);
            if s >= r {
                return Err(Error::StateOutOfRange {
                    variable: self.variables[p].name().to_string(),
                    state: s,
                    arity: r,
                });
            }
            j = j * r + s;
        }
        Ok(j)
    }

    pub fn decode_parent_config(&self, i: usize, mut j: usize) -> Result<Vec<usize>> {
        if i >= self.len() {
            return Err(Error::VariableIndex(i));
        }
        if j >= self.rows[i] {
            return Err(Error::ShapeMismatch(format!(
                "row {j} out of range for `{}` with {} rows",
                self.variables[i].name(),
                self.rows[i]
            )));
        }
        let pa = &self.parents[i];
        let mut out = vec![0; pa.len()];
        for (slot, &p) in out.iter_mut().zip(pa).rev() {
            let r = self.arity(p);
            *slot = j % r;
            j /= r;
        }
        Ok(out)
    }

    /// Row index of family `i` under a complete assignment of all variables.
    pub(crate) fn row_of(&self, i: usize, full: &[usize]) -> usize {
        self.parents[i]
            .iter()
            .fold(0, |j, &p| j * self.arity(p) + full[p])
    }
}

fn topological_order(variables: &[Variable], parents: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = variables.len();
    let mut indegree: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut children = vec![Vec::new(); n];
    for (i, pa) in parents.iter().enumerate() {
        for &p in pa {
            children[p].push(i);
        }
    }
    // Kahn's algorithm, smallest index first so the order is canonical.
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(Error::Cycle(variables[stuck].name().to_string()));
    }
    Ok(order)
}

/// Dense per-family tables shaped like the CPTs of a structure: family `i`
/// holds `num_rows(i)` rows of `arity(i)` entries, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    offsets: Vec<usize>,
    rows: Vec<usize>,
    arity: Vec<usize>,
    data: Vec<f64>,
}

impl Tables {
    pub fn zeros(structure: &NetworkStructure) -> Self {
        Self::filled(structure, 0.0)
    }

    pub fn filled(structure: &NetworkStructure, value: f64) -> Self {
        let mut offsets = Vec::with_capacity(structure.len());
        let mut total = 0;
        for i in 0..structure.len() {
            offsets.push(total);
            total += structure.num_rows(i) * structure.arity(i);
        }
        Tables {
            offsets,
            rows: (0..structure.len())
                .map(|i| structure.num_rows(i))
                .collect(),
            arity: (0..structure.len()).map(|i| structure.arity(i)).collect(),
            data: vec![value; total],
        }
    }

    pub fn from_rows(structure: &NetworkStructure, tables: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut out = Self::zeros(structure);
        if tables.len() != structure.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tables for {} variables",
                tables.len(),
                structure.len()
            )));
        }
        for (i, table) in tables.iter().enumerate() {
            let name = structure.variable(i).name();
            if table.len() != out.rows[i] {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}` needs {} rows, got {}",
                    out.rows[i],
                    table.len()
                )));
            }
            for (j, row) in table.iter().enumerate() {
                if row.len() != out.arity[i] {
                    return Err(Error::InvalidParameters {
                        variable: name.to_string(),
                        row: j,
                        reason: format!("length {} != arity {}", row.len(), out.arity[i]),
                    });
                }
                out.row_mut(i, j).copy_from_slice(row);
            }
        }
        Ok(out)
    }

    pub fn num_families(&self) -> usize {
        self.rows.len()
    }

    pub fn num_rows(&self, i: usize) -> usize {
        self.rows[i]
    }

    pub fn arity(&self, i: usize) -> usize {
        self.arity[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn table(&self, i: usize) -> &[f64] {
        let start = self.offsets[i];
        &self.data[start..start + self.rows[i] * self.arity[i]]
    }

    pub fn table_mut(&mut self, i: usize) -> &mut [f64] {
        let start = self.offsets[i];
        let len = self.rows[i] * self.arity[i];
        &mut self.data[start..start + len]
    }

    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let r = self.arity[i];
        let start = self.offsets[i] + j * r;
        &self.data[start..start + r]
    }

    pub fn row_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let r = self.arity[i];
        let start = self.offsets[i] + j * r;
        &mut self.data[start..start + r]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offsets[i] + j * self.arity[i] + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.offsets[i] + j * self.arity[i] + k;
        self.data[idx] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Tables) -> bool {
        self.rows == other.rows && self.arity == other.arity
    }

    pub(crate) fn check_shape(&self, other: &Tables) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                "parameter tables differ in shape".into(),
            ))
        }
    }

    /// Iterator over `(i, j)` for every row of every family.
    pub fn row_indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_families()).flat_map(move |i| (0..self.rows[i]).map(move |j| (i, j)))
    }

    /// Per-row sums, indexed `[i][j]`.
    pub fn row_sums(&self) -> Vec<Vec<f64>> {
        (0..self.num_families())
            .map(|i| {
                (0..self.rows[i])
                    .map(|j| self.row(i, j).iter().sum())
                    .collect()
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Tables) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.num_families())
            .map(|i| (0..self.rows[i]).map(|j| self.row(i, j).to_vec()).collect())
            .collect()
    }
}

/// CPT parameters θ_ijk: every row lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector(Tables);

impl Deref for ParameterVector {
    type Target = Tables;

    fn deref(&self) -> &Tables {
        &self.0
    }
}

impl ParameterVector {
    /// Validates entries in `[0, 1]` and row sums within [`SIMPLEX_TOL`].
    pub fn new(tables: Tables, structure: &NetworkStructure) -> Result<Self> {
        let expected = Tables::zeros(structure);
        tables.check_shape(&expected)?;
        for (i, j) in tables.row_indices() {
            let row = tables.row(i, j);
            let invalid = |reason: String| Error::InvalidParameters {
                variable: structure.variable(i).name().to_string(),
                row: j,
                reason,
            };
            if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(invalid(format!("entry {x} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(invalid(format!("row sums to {sum}")));
            }
        }
        Ok(ParameterVector(tables))
    }

    /// Projects every row onto the floored simplex.
    pub fn from_projected(mut tables: Tables) -> Self {
        for i in 0..tables.num_families() {
            let r = tables.arity(i);
            for row in tables.table_mut(i).chunks_mut(r) {
                project_row(row);
            }
        }
        ParameterVector(tables)
    }

    pub fn uniform(structure: &NetworkStructure) -> Self {
        let mut t = Tables::zeros(structure);
        for i in 0..structure.len() {
            let v = 1.0 / structure.arity(i) as f64;
            t.table_mut(i).fill(v);
        }
        ParameterVector(t)
    }

    /// Each row drawn from the flat Dirichlet distribution, deterministic in `seed`.
    pub fn random(structure: &NetworkStructure, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tables::zeros(structure);
        for i in 0..structure.len() {
            let r = structure.arity(i);
            for row in t.table_mut(i).chunks_mut(r) {
                // Normalized unit exponentials are uniform on the simplex.
                for x in row.iter_mut() {
                    let u: f64 = rng.random();
                    *x = -(1.0 - u).ln();
                }
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|x| *x /= sum);
                } else {
                    row.fill(1.0 / r as f64);
                }
                project_row(row);
            }
        }
        ParameterVector(t)
    }

    pub fn tables(&self) -> &Tables {
        &self.0
    }

    pub fn into_tables(self) -> Tables {
        self.0
    }
}

/// Row sums closer than this to one count as normalized, which keeps
/// projection idempotent.
const ROUNDING_SLACK: f64 = 1e-14;

/// Maps a row back onto the simplex with every entry at least [`EPS_FLOOR`].
///
/// A row without entries below the floor is divided by its sum unless that
/// sum is already one up to rounding. Otherwise the
/// low entries are raised to the floor and the remaining mass is rescaled so
/// the row sums to one. Rows that carry no positive mass become uniform.
pub fn project_row(row: &mut [f64]) {
    let r = row.len();
    if r == 0 {
        return;
    }
    if row.iter().all(|&x| x >= EPS_FLOOR && x.is_finite()) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROUNDING_SLACK {
            row.iter_mut().for_each(|x| *x /= sum);
        }
        if row.iter().all(|&x| x >= EPS_FLOOR) {
            return;
        }
    }
    let mut floored: Vec<bool> = row.iter().map(|&x| !(x >= EPS_FLOOR)).collect();
    loop {
        let n_floored = floored.iter().filter(|&&f| f).count();
        let free_mass: f64 = row
            .iter()
            .zip(&floored)
            .filter(|(_, &f)| !f)
            .map(|(x, _)| *x)
            .sum();
        let target = 1.0 - n_floored as f64 * EPS_FLOOR;
        if n_floored == r || !(free_mass > 0.0) || !free_mass.is_finite() {
            row.fill(1.0 / r as f64);
            return;
        }
        let scale = target / free_mass;
        let mut changed = false;
        for (x, f) in row.iter().zip(floored.iter_mut()) {
            if !*f && x * scale < EPS_FLOOR {
                *f = true;
                changed = true;
            }
        }
        if !changed {
            for (x, &f) in row.iter_mut().zip(&floored) {
                *x = if f { EPS_FLOOR } else { *x * scale };
            }
            return;
        }
    }
}

/// Half the squared L2 distance between two parameter vectors.
pub fn param_distance(a: &Tables, b: &Tables) -> Result<f64> {
    a.check_shape(b)?;
    Ok(0.5
        * a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    pub structure: NetworkStructure,
    pub theta: ParameterVector,
}

impl Network {
    pub fn new(
        name: impl Into<String>,
        structure: NetworkStructure,
        theta: ParameterVector,
    ) -> Result<Self> {
        theta.check_shape(&Tables::zeros(&structure))?;
        Ok(Network {
            name: name.into(),
            structure,
            theta,
        })
    }

    pub fn with_theta(&self, theta: ParameterVector) -> Result<Self> {
        Network::new(self.name.clone(), self.structure.clone(), theta)
    }
}
