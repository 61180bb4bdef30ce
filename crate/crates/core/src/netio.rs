//! File formats: network JSON, dataset CSV and trace CSV.
//!
//! Network file:
//!
//! ```json
//! { "name": "chain",
//!   "variables": [{"name": "A", "states": ["a0", "a1"]}, ...],
//!   "parents": {"B": ["A"]},
//!   "cpt": {"A": [[0.3, 0.7]], "B": [[0.9, 0.1], [0.2, 0.8]]} }
//! ```
//!
//! CPT rows follow the lexicographic parent-configuration order of
//! [`NetworkStructure::parent_config_index`]. Dataset files are plain CSV with
//! a header of variable names, state names in the cells and `?` for a missing
//! value.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimation::TraceRecord;
use crate::model::{Network, NetworkStructure, ParameterVector, Tables, Variable};
use crate::online::OnlineTraceRecord;

pub const MISSING: &str = "?";
/// Row sums within this distance of one are renormalized on load.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// A (possibly partial) assignment of states to the variables of a network.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataCase(Vec<Option<usize>>);

impl DataCase {
    pub fn empty(num_vars: usize) -> Self {
        DataCase(vec![None; num_vars])
    }

    pub fn from_values(values: Vec<Option<usize>>) -> Self {
        DataCase(values)
    }

    pub fn complete(states: &[usize]) -> Self {
        DataCase(states.iter().map(|&s| Some(s)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, state: Option<usize>) {
        self.0[i] = state;
    }

    pub fn values(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    pub fn num_observed(&self) -> usize {
        self.0.iter().filter(|v| v.is_some()).count()
    }

    /// All states, or the name of the first unobserved variable's index.
    pub fn as_complete(&self) -> std::result::Result<Vec<usize>, usize> {
        self.0.iter().enumerate().map(|(i, v)| v.ok_or(i)).collect()
    }

    pub fn validate(&self, structure: &NetworkStructure) -> Result<()> {
        if self.len() != structure.len() {
            return Err(Error::ShapeMismatch(format!(
                "case has {} values for {} variables",
                self.len(),
                structure.len()
            )));
        }
        for (i, v) in self.0.iter().enumerate() {
            if let Some(s) = *v {
                if s >= structure.arity(i) {
                    return Err(Error::StateOutOfRange {
                        variable: structure.variable(i).name().to_string(),
                        state: s,
                        arity: structure.arity(i),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub cases: Vec<DataCase>,
}

impl DataSet {
    pub fn new(cases: Vec<DataCase>) -> Self {
        DataSet { cases }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// Fraction of missing cells over the given variables.
    pub fn missing_fraction(&self, vars: &[usize]) -> f64 {
        let total = self.cases.len() * vars.len();
        if total == 0 {
            return 0.0;
        }
        let missing = self
            .cases
            .iter()
            .map(|c| vars.iter().filter(|&&v| c.get(v).is_none()).count())
            .sum::<usize>();
        missing as f64 / total as f64
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    name: String,
    variables: Vec<VariableDoc>,
    #[serde(default)]
    parents: BTreeMap<String, Vec<String>>,
    cpt: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VariableDoc {
    name: String,
    states: Vec<String>,
}

pub fn parse_network(text: &str) -> Result<Network> {
    let doc: NetworkDoc =
        serde_json::from_str(text).map_err(|e| Error::NetworkFormat(e.to_string()))?;
    let mut variables = Vec::with_capacity(doc.variables.len());
    let mut seen = HashSet::new();
    for v in doc.variables {
        if !seen.insert(v.name.clone()) {
            return Err(Error::NetworkFormat(format!(
                "duplicate variable name `{}`",
                v.name
            )));
        }
        variables.push(Variable::new(v.name, v.states)?);
    }
    let index = |name: &str| {
        variables
            .iter()
            .position(|v| v.name() == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    };
    let mut parents = vec![Vec::new(); variables.len()];
    for (child, pa) in &doc.parents {
        let c = index(child)?;
        parents[c] = pa.iter().map(|p| index(p)).collect::<Result<_>>()?;
    }
    for name in doc.cpt.keys() {
        index(name)?;
    }
    let structure = NetworkStructure::new(variables, parents)?;

    let mut rows = Vec::with_capacity(structure.len());
    for i in 0..structure.len() {
        let name = structure.variable(i).name();
        let mut table = doc
            .cpt
            .get(name)
            .cloned()
            .ok_or_else(|| Error::NetworkFormat(format!("missing cpt for `{name}`")))?;
        if table.len() != structure.num_rows(i) {
            return Err(Error::NetworkFormat(format!(
                "cpt for `{name}` has {} rows, expected {}",
                table.len(),
                structure.num_rows(i)
            )));
        }
        for (j, row) in table.iter_mut().enumerate() {
            let invalid = |reason: String| Error::InvalidParameters {
                variable: name.to_string(),
                row: j,
                reason,
            };
            if row.len() != structure.arity(i) {
                return Err(invalid(format!(
                    "length {} != arity {}",
                    row.len(),
                    structure.arity(i)
                )));
            }
            if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(invalid(format!("entry {x} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("row sums to {sum}")));
            }
            if sum != 1.0 {
                row.iter_mut().for_each(|x| *x /= sum);
            }
        }
        rows.push(table);
    }
    let tables = Tables::from_rows(&structure, &rows)?;
    let theta = ParameterVector::new(tables, &structure)?;
    Network::new(doc.name, structure, theta)
}

pub fn read_network(path: impl AsRef<Path>) -> Result<Network> {
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_network(&text)
}

/// Probability with 17 significant digits in plain decimal notation,
/// trailing zeros trimmed. 17 digits always round-trip an `f64`.
pub fn format_probability(x: f64) -> String {
    if x == 0.0 {
        return "0.0".to_string();
    }
    let sci = format!("{:.16e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let mut out = String::new();
    if x < 0.0 {
        out.push('-');
    }
    if exp < 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    } else {
        let int_len = exp as usize + 1;
        if digits.len() <= int_len {
            out.push_str(&digits);
            out.extend(std::iter::repeat_n('0', int_len - digits.len()));
            out.push_str(".0");
        } else {
            out.push_str(&digits[..int_len]);
            out.push('.');
            out.push_str(&digits[int_len..]);
        }
    }
    let trimmed = out.trim_end_matches('0');
    let mut s = trimmed.to_string();
    if s.ends_with('.') {
        s.push('0');
    }
    s
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

/// Canonical network text: variables in declared order, every variable listed
/// under `parents` and `cpt`.
pub fn serialize_network(network: &Network) -> String {
    let s = &network.structure;
    let mut out = String::new();
    out.push_str("{\n");
    let _ = writeln!(out, "  \"name\": {},", json_str(&network.name));
    out.push_str("  \"variables\": [\n");
    for (i, v) in s.variables().iter().enumerate() {
        let states: Vec<String> = v.states().iter().map(|st| json_str(st)).collect();
        let _ = write!(
            out,
            "    {{\"name\": {}, \"states\": [{}]}}",
            json_str(v.name()),
            states.join(", ")
        );
        out.push_str(if i + 1 < s.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ],\n  \"parents\": {\n");
    for i in 0..s.len() {
        let pa: Vec<String> = s
            .parents(i)
            .iter()
            .map(|&p| json_str(s.variable(p).name()))
            .collect();
        let _ = write!(
            out,
            "    {}: [{}]",
            json_str(s.variable(i).name()),
            pa.join(", ")
        );
        out.push_str(if i + 1 < s.len() { ",\n" } else { "\n" });
    }
    out.push_str("  },\n  \"cpt\": {\n");
    for i in 0..s.len() {
        let _ = writeln!(out, "    {}: [", json_str(s.variable(i).name()));
        for j in 0..s.num_rows(i) {
            let row: Vec<String> = network
                .theta
                .row(i, j)
                .iter()
                .map(|&x| format_probability(x))
                .collect();
            let _ = write!(out, "      [{}]", row.join(", "));
            out.push_str(if j + 1 < s.num_rows(i) { ",\n" } else { "\n" });
        }
        out.push_str("    ]");
        out.push_str(if i + 1 < s.len() { ",\n" } else { "\n" });
    }
    out.push_str("  }\n}\n");
    out
}

pub fn write_network(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(&path, serialize_network(network)).map_err(|e| Error::io(&path, e))
}

/// Parses a dataset. The header may name any subset of the variables in any
/// order; variables not in the header are missing in every case.
pub fn load_dataset(text: &str, structure: &NetworkStructure) -> Result<DataSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::None)
        .from_reader(text.as_bytes());
    let header_err = |reason: String| Error::Dataset { line: 1, reason };
    let headers = reader
        .headers()
        .map_err(|e| header_err(e.to_string()))?
        .clone();
    let mut columns = Vec::with_capacity(headers.len());
    let mut seen = HashSet::new();
    for h in headers.iter() {
        let i = structure
            .index_of(h)
            .ok_or_else(|| header_err(format!("unknown variable `{h}`")))?;
        if !seen.insert(i) {
            return Err(header_err(format!("duplicate column `{h}`")));
        }
        columns.push(i);
    }
    let mut cases = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Dataset {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut case = DataCase::empty(structure.len());
        for (cell, &i) in record.iter().zip(&columns) {
            if cell == MISSING {
                continue;
            }
            let var = structure.variable(i);
            if cell.is_empty() {
                return Err(Error::Dataset {
                    line,
                    reason: format!("empty cell for `{}` (use `?` for missing)", var.name()),
                });
            }
            let s = var.state_index(cell).ok_or_else(|| Error::Dataset {
                line,
                reason: format!("unknown state `{cell}` for `{}`", var.name()),
            })?;
            case.set(i, Some(s));
        }
        cases.push(case);
    }
    Ok(DataSet::new(cases))
}

pub fn read_dataset(path: impl AsRef<Path>, structure: &NetworkStructure) -> Result<DataSet> {
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    load_dataset(&text, structure)
}

/// All variables in declared order, `?` for missing values.
pub fn dataset_to_string(structure: &NetworkStructure, cases: &[DataCase]) -> String {
    let mut out = String::new();
    let names: Vec<&str> = structure.variables().iter().map(|v| v.name()).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    for case in cases {
        let cells: Vec<&str> = (0..structure.len())
            .map(|i| match case.get(i) {
                Some(s) => structure.variable(i).states()[s].as_str(),
                None => MISSING,
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_dataset(
    structure: &NetworkStructure,
    cases: &[DataCase],
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(&path, dataset_to_string(structure, cases)).map_err(|e| Error::io(&path, e))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const TRACE_HEADER: &str = "iter,train_ll,test_ll,max_param_delta,l2_step,wall_ms";

pub fn trace_to_string(records: &[TraceRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iter,
            r.train_ll,
            opt(r.test_ll),
            r.max_param_delta,
            r.l2_step,
            opt(r.wall_ms)
        );
    }
    out
}

pub fn write_trace(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(&path, trace_to_string(records)).map_err(|e| Error::io(&path, e))
}

pub const ONLINE_TRACE_HEADER: &str = "t,case_ll,l2_step,skipped";

pub fn online_trace_to_string(records: &[OnlineTraceRecord]) -> String {
    let mut out = String::from(ONLINE_TRACE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.t,
            opt(r.case_ll),
            r.l2_step,
            r.skipped
        );
    }
    out
}

pub fn write_online_trace(records: &[OnlineTraceRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(&path, online_trace_to_string(records)).map_err(|e| Error::io(&path, e))
}
