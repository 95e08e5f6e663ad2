//! Contextual GP bandits with delayed feedback.
//!
//! Contexts are ids into a finite set `Z`; each round the environment fixes a
//! context and the learner picks a query from `Q`. The model lives on the joint
//! domain `Z x Q` (id `z * |Q| + q`) with a separable kernel, and selection is
//! the usual rule restricted to the current context's slice.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::env::{normalize_unit, PriorSampler};
use crate::error::{Error, Result};
use crate::kernel::{Domain, Kernel, ProductKernel};
use crate::policy::{argmax, select, Rule};
use crate::posterior::PosteriorState;
use crate::table;

/// Order in which contexts arrive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ContextOrder {
    Sequential,
    /// A permutation of `0..|Z|`.
    Given(Vec<usize>),
}

impl FromStr for ContextOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("sequential") {
            return Ok(ContextOrder::Sequential);
        }
        let ids = s
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad context id '{p}' in order")))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::Config("context order is empty".into()));
        }
        Ok(ContextOrder::Given(ids))
    }
}

/// Each context in `order` is held for `repeat_count` consecutive rounds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextSchedule {
    order: Vec<usize>,
    repeat_count: usize,
}

impl ContextSchedule {
    pub fn new(order: &ContextOrder, num_contexts: usize, repeat_count: usize) -> Result<Self> {
        if num_contexts == 0 {
            return Err(Error::invalid("context set is empty"));
        }
        if repeat_count == 0 {
            return Err(Error::invalid("repeat_count must be at least 1"));
        }
        let order = match order {
            ContextOrder::Sequential => (0..num_contexts).collect(),
            ContextOrder::Given(ids) => {
                let mut seen = vec![false; num_contexts];
                for &z in ids {
                    if z >= num_contexts {
                        return Err(Error::invalid(format!(
                            "context {z} out of range for {num_contexts} contexts"
                        )));
                    }
                    if std::mem::replace(&mut seen[z], true) {
                        return Err(Error::invalid(format!("context {z} repeated in order")));
                    }
                }
                if ids.len() != num_contexts {
                    return Err(Error::invalid("context order must be a permutation of every context"));
                }
                ids.clone()
            }
        };
        Ok(Self { order, repeat_count })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn repeat_count(&self) -> usize {
        self.repeat_count
    }

    /// `|order| * repeat_count`.
    pub fn rounds(&self) -> usize {
        self.order.len() * self.repeat_count
    }

    /// Context of round `t` (1-based). Past the end the schedule wraps around.
    pub fn context_at(&self, t: usize) -> usize {
        assert!(t >= 1, "rounds are numbered from 1");
        self.order[((t - 1) / self.repeat_count) % self.order.len()]
    }
}

/// Table `g(z, x)` over `Z x Q` with per-context optima.
#[derive(Clone, Debug)]
pub struct ContextualObjective {
    contexts: Arc<Domain>,
    queries: Arc<Domain>,
    joint: Arc<Domain>,
    values: Vec<f64>,
    optima: Vec<(usize, f64)>,
}

impl ContextualObjective {
    /// `values` is context-major: `values[z * |Q| + q] = g(z, q)`.
    pub fn new(contexts: Domain, queries: Domain, values: Vec<f64>) -> Result<Self> {
        let (nz, nq) = (contexts.len(), queries.len());
        if values.len() != nz * nq {
            return Err(Error::DimensionMismatch {
                expected: nz * nq,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("objective values must be finite"));
        }
        let joint = Domain::product(&contexts, &queries)?;
        let optima = values
            .chunks_exact(nq)
            .map(|row| {
                let q = argmax(row);
                (q, row[q])
            })
            .collect();
        Ok(Self {
            contexts: Arc::new(contexts),
            queries: Arc::new(queries),
            joint: Arc::new(joint),
            values,
            optima,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn context_domain(&self) -> &Arc<Domain> {
        &self.contexts
    }

    pub fn query_domain(&self) -> &Arc<Domain> {
        &self.queries
    }

    pub fn joint_domain(&self) -> &Arc<Domain> {
        &self.joint
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, z: usize, q: usize) -> f64 {
        self.values[self.joint_id(z, q)]
    }

    /// `(x*(z), g(z, x*(z)))`, lowest query id on ties.
    pub fn optimum(&self, z: usize) -> (usize, f64) {
        self.optima[z]
    }

    pub fn joint_id(&self, z: usize, q: usize) -> usize {
        z * self.num_queries() + q
    }

    /// Joint ids of `{(z, x) : x in Q}`.
    pub fn slice(&self, z: usize) -> Vec<usize> {
        let nq = self.num_queries();
        (z * nq..(z + 1) * nq).collect()
    }
}

/// `argmax` of the rule's acquisition over the slice of context `z`; returns the
/// query id in `Q`.
pub fn select_contextual<K: Kernel, R: Rng + ?Sized>(
    rule: Rule,
    all: &mut PosteriorState<K>,
    completed: Option<&mut PosteriorState<K>>,
    objective: &ContextualObjective,
    z: usize,
    nu: f64,
    rng: &mut R,
) -> Result<usize> {
    if z >= objective.num_contexts() {
        return Err(Error::invalid(format!("context {z} out of range")));
    }
    let slice = objective.slice(z);
    all.track_candidates(&slice);
    let mut completed = completed;
    if let Some(c) = completed.as_deref_mut() {
        c.track_candidates(&slice);
    }
    let id = select(rule, all, completed, &slice, nu, rng)?;
    Ok(id - slice[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextualRegret {
    pub instantaneous: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Per-round `g(z_t, x*(z_t)) - g(z_t, x_t)` and its running sum for a trace of
/// `(context, query)` pairs.
pub fn contextual_regret(objective: &ContextualObjective, trace: &[(usize, usize)]) -> Result<ContextualRegret> {
    let mut instantaneous = Vec::with_capacity(trace.len());
    let mut cumulative = Vec::with_capacity(trace.len());
    let mut total = 0.0;
    for &(z, q) in trace {
        if z >= objective.num_contexts() || q >= objective.num_queries() {
            return Err(Error::invalid(format!("round ({z}, {q}) outside the table")));
        }
        let p = objective.optimum(z).1 - objective.value(z, q);
        total += p;
        instantaneous.push(p);
        cumulative.push(total);
    }
    Ok(ContextualRegret {
        instantaneous,
        cumulative,
    })
}

/// Per-task benchmark table: `task_id, <dims...>, value`.
#[derive(Clone, Debug)]
pub struct ContextTable {
    pub task_ids: Vec<String>,
    pub dimension_names: Vec<String>,
    pub queries: Domain,
    /// Task-major, query order of the first task.
    pub values: Vec<f64>,
}

pub fn load_context_table(path: impl AsRef<Path>) -> Result<ContextTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_context_table(&text)
}

fn config_key(cfg: &[f64]) -> Vec<u64> {
    cfg.iter().map(|x| (x + 0.0).to_bits()).collect()
}

/// Every task must list exactly the configurations of the first task.
pub fn parse_context_table(text: &str) -> Result<ContextTable> {
    let mut rows = table::records(text);
    let (hline, header) = rows
        .next()
        .ok_or_else(|| Error::parse(1, "empty file: expected a header row"))?;
    if header.len() < 3 {
        return Err(Error::parse(hline, "header needs task_id, at least one dimension and a value"));
    }
    let ncols = header.len();
    let dimension_names: Vec<String> = header[1..ncols - 1].iter().map(|s| s.to_string()).collect();

    let mut task_index: HashMap<String, usize> = HashMap::new();
    let mut task_ids: Vec<String> = Vec::new();
    // per task: config key -> (value, line)
    let mut tasks: Vec<HashMap<Vec<u64>, (f64, usize)>> = Vec::new();
    let mut first_order: Vec<Vec<f64>> = Vec::new();
    let mut last_line = hline;
    for (line, fields) in rows {
        last_line = line;
        if fields.len() != ncols {
            return Err(Error::parse(
                line,
                format!("expected {ncols} fields, found {}", fields.len()),
            ));
        }
        let task = fields[0];
        if task.is_empty() {
            return Err(Error::parse(line, "empty task id"));
        }
        let nums = table::numeric_row(line, &fields[1..], ncols - 1)?;
        let (cfg, v) = nums.split_at(ncols - 2);
        let v = v[0];
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::parse(line, format!("value {v} outside [0, 1]")));
        }
        let ti = *task_index.entry(task.to_string()).or_insert_with(|| {
            task_ids.push(task.to_string());
            tasks.push(HashMap::new());
            tasks.len() - 1
        });
        if let Some((_, prev)) = tasks[ti].insert(config_key(cfg), (v, line)) {
            return Err(Error::parse(
                line,
                format!("duplicate configuration for task '{task}' (first seen on line {prev})"),
            ));
        }
        if ti == 0 {
            first_order.push(cfg.to_vec());
        }
    }
    if task_ids.is_empty() {
        return Err(Error::parse(hline, "no data rows"));
    }
    let nq = first_order.len();
    let mut values = Vec::with_capacity(task_ids.len() * nq);
    for (ti, task) in tasks.iter().enumerate() {
        if task.len() != nq {
            return Err(Error::parse(
                last_line,
                format!(
                    "task '{}' has {} configurations, expected {nq}",
                    task_ids[ti],
                    task.len()
                ),
            ));
        }
        for cfg in &first_order {
            let (v, _) = task.get(&config_key(cfg)).ok_or_else(|| {
                Error::parse(
                    last_line,
                    format!("task '{}' is missing configuration {cfg:?}", task_ids[ti]),
                )
            })?;
            values.push(*v);
        }
    }
    Ok(ContextTable {
        task_ids,
        dimension_names,
        queries: Domain::new(first_order)?,
        values,
    })
}

/// Meta-feature file: `task_id, f1, f2, ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaFeatures {
    pub task_ids: Vec<String>,
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetaFeatures {
    pub fn get(&self, task: &str) -> Option<&[f64]> {
        self.task_ids
            .iter()
            .position(|t| t == task)
            .map(|i| self.rows[i].as_slice())
    }
}

pub fn load_meta_features(path: impl AsRef<Path>) -> Result<MetaFeatures> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_meta_features(&text)
}

pub fn parse_meta_features(text: &str) -> Result<MetaFeatures> {
    let mut rows_iter = table::records(text);
    let (hline, header) = rows_iter
        .next()
        .ok_or_else(|| Error::parse(1, "empty file: expected a header row"))?;
    if header.len() < 2 {
        return Err(Error::parse(hline, "header needs task_id and at least one feature"));
    }
    let ncols = header.len();
    let names = header[1..].iter().map(|s| s.to_string()).collect();
    let mut task_ids: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, fields) in rows_iter {
        if fields.len() != ncols {
            return Err(Error::parse(
                line,
                format!("expected {ncols} fields, found {}", fields.len()),
            ));
        }
        if fields[0].is_empty() {
            return Err(Error::parse(line, "empty task id"));
        }
        if let Some(prev) = seen.insert(fields[0].to_string(), line) {
            return Err(Error::parse(
                line,
                format!("task '{}' repeated (first seen on line {prev})", fields[0]),
            ));
        }
        rows.push(table::numeric_row(line, &fields[1..], ncols - 1)?);
        task_ids.push(fields[0].to_string());
    }
    if rows.is_empty() {
        return Err(Error::parse(hline, "no data rows"));
    }
    Ok(MetaFeatures {
        task_ids,
        names,
        rows,
    })
}

/// Column means and standard deviations used to standardize contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// `feature,mean,std` rows.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("feature,mean,std\n");
        for (i, (m, s)) in self.means.iter().zip(&self.stds).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            out.push_str(&format!("{name},{m},{s}\n"));
        }
        out
    }
}

/// Keeps the first `keep` columns and maps each to zero mean and unit
/// (population) variance. Constant columns are only centered.
pub fn standardize(rows: &[Vec<f64>], keep: usize) -> Result<(Vec<Vec<f64>>, Standardization)> {
    let Some(first) = rows.first() else {
        return Err(Error::invalid("no rows to standardize"));
    };
    let k = keep.min(first.len());
    if k == 0 {
        return Err(Error::invalid("no feature columns to standardize"));
    }
    if rows.iter().any(|r| r.len() < k) {
        return Err(Error::invalid("ragged feature rows"));
    }
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let stds: Vec<f64> = (0..k)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - means[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let st = Standardization { means, stds };
    let out = rows.iter().map(|r| st.apply(&r[..k])).collect();
    Ok((out, st))
}

/// Contexts `0, 1, ..., n - 1` as standardized 1-D points.
pub fn index_contexts(n: usize) -> Result<(Domain, Standardization)> {
    let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
    let (pts, st) = standardize(&rows, 1)?;
    Ok((Domain::new(pts)?, st))
}

/// Joins a task table with optional meta-features (first `keep` columns,
/// standardized). Without meta-features the task index is the context.
pub fn objective_from_table(
    table: &ContextTable,
    meta: Option<&MetaFeatures>,
    keep: usize,
) -> Result<(ContextualObjective, Standardization)> {
    let (contexts, st) = match meta {
        Some(meta) => {
            let rows = table
                .task_ids
                .iter()
                .map(|t| {
                    meta.get(t)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::invalid(format!("no meta-features for task '{t}'")))
                })
                .collect::<Result<Vec<_>>>()?;
            let (pts, st) = standardize(&rows, keep)?;
            (Domain::new(pts)?, st)
        }
        None => index_contexts(table.task_ids.len())?,
    };
    let obj = ContextualObjective::new(contexts, table.queries.clone(), table.values.clone())?;
    Ok((obj, st))
}

/// Joint prior draw over `Z x Q` for a separable kernel (`L_z E L_q^T`),
/// normalized so the whole table spans `[0, 1]`.
pub fn synthetic_contextual(
    contexts: Domain,
    queries: Domain,
    kernel: &ProductKernel,
    seed: u64,
) -> Result<ContextualObjective> {
    let lz = PriorSampler::new(kernel.context_kernel(), &contexts)?;
    let lq = PriorSampler::new(kernel.query_kernel(), &queries)?;
    let (nz, nq) = (contexts.len(), queries.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..nz).map(|_| lq.draw(&mut rng)).collect();
    let mut values = vec![0.0; nz * nq];
    let mut column = vec![0.0; nz];
    for q in 0..nq {
        for (c, row) in column.iter_mut().zip(&rows) {
            *c = row[q];
        }
        for (z, v) in lz.apply(&column).into_iter().enumerate() {
            values[z * nq + q] = v;
        }
    }
    normalize_unit(&mut values);
    ContextualObjective::new(contexts, queries, values)
}

/// `n` context vectors of dimension `dim` with i.i.d. standard normal entries,
/// standardized per column.
pub fn random_contexts(n: usize, dim: usize, seed: u64) -> Result<(Domain, Standardization)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let (pts, st) = standardize(&rows, dim)?;
    Ok((Domain::new(pts)?, st))
}
