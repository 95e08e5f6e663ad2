//! Multi-seed, multi-rule experiments and their on-disk artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{default_window, Config, ObjectiveSpec, RunConfig, Window};
use super::log::{summarize, RegretLog, Summary};
use super::presets::preset;
use super::run::{run_single, stream_rng, Problem, RunSpec, Stream};
use crate::contextual::{
    index_contexts, load_context_table, load_meta_features, objective_from_table, random_contexts,
    synthetic_contextual, ContextSchedule, ContextualObjective, Standardization,
};
use crate::env::{load_tabular, PriorSampler, SyntheticObjective, TabularObjective};
use crate::error::{Error, Result};
use crate::kernel::{grid_domain, Domain, Kernel, ProductKernel, SqExpKernel};
use crate::ledger::{rho_m, DelayModel};
use crate::oracle::{coverage_test, dense_posterior, poisson_cdf, CoverageConfig};
use crate::policy::Rule;
use crate::posterior::{default_lambda, PosteriorState};

const STANDARDIZATION_FILE: &str = "context_standardization.csv";

enum Source {
    Synthetic {
        domain: Arc<Domain>,
        sampler: PriorSampler,
        kernel: SqExpKernel,
    },
    Tabular(TabularObjective),
    ContextualSynthetic {
        contexts: usize,
        features: usize,
        queries: Domain,
        lengthscale: f64,
        context_lengthscale: f64,
    },
    ContextualTabular {
        objective: ContextualObjective,
        names: Vec<String>,
        standardization: Standardization,
    },
}

/// Every point of the product grid on `[0, 1]^d` with `sizes[i]` points along axis `i`.
pub fn unit_grid(sizes: &[usize]) -> Result<Domain> {
    let axes = sizes
        .iter()
        .map(|&n| grid_domain(0.0, 1.0, n).map(|d| d.points().map(|p| p[0]).collect::<Vec<f64>>()))
        .collect::<Result<Vec<_>>>()?;
    let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &axes {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    Domain::new(pts)
}

/// A resolved configuration ready to produce per-seed problems.
pub struct Experiment {
    pub config: RunConfig,
    pub delay: DelayModel,
    pub window: Window,
    source: Source,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        let source = match &config.objective {
            ObjectiveSpec::Synthetic {
                grid_lo,
                grid_hi,
                grid_size,
                lengthscale,
            } => {
                let domain = Arc::new(grid_domain(*grid_lo, *grid_hi, *grid_size)?);
                let kernel = SqExpKernel::isotropic(1, *lengthscale, 1.0)?;
                let sampler = PriorSampler::new(&kernel, &domain)?;
                Source::Synthetic { domain, sampler, kernel }
            }
            ObjectiveSpec::Tabular { path } => Source::Tabular(load_tabular(path)?),
            ObjectiveSpec::ContextualSynthetic {
                contexts,
                context_features,
                query_grid,
                lengthscale,
                context_lengthscale,
            } => Source::ContextualSynthetic {
                contexts: *contexts,
                features: *context_features,
                queries: unit_grid(query_grid)?,
                lengthscale: *lengthscale,
                context_lengthscale: *context_lengthscale,
            },
            ObjectiveSpec::ContextualTabular {
                path,
                meta_path,
                context_features,
            } => {
                let table = load_context_table(path)?;
                let meta = meta_path.as_ref().map(load_meta_features).transpose()?;
                let keep = if meta.is_some() { (*context_features).max(1) } else { 1 };
                let (objective, standardization) = objective_from_table(&table, meta.as_ref(), keep)?;
                let names = match &meta {
                    Some(m) => m.names.iter().take(standardization.means.len()).cloned().collect(),
                    None => vec!["task_index".to_string()],
                };
                Source::ContextualTabular {
                    objective,
                    names,
                    standardization,
                }
            }
        };
        let delay = config.delay.resolve()?;
        delay.validate()?;
        if let DelayModel::InputDependent { means } = &delay {
            let expected = match &source {
                Source::Synthetic { domain, .. } => domain.len(),
                Source::Tabular(t) => crate::env::Objective::domain(t).len(),
                Source::ContextualSynthetic { queries, .. } => queries.len(),
                Source::ContextualTabular { objective, .. } => objective.num_queries(),
            };
            if means.len() != expected {
                return Err(Error::Config(format!(
                    "delay table has {} rows, the query set has {expected} points",
                    means.len()
                )));
            }
        }
        let window = config.window.unwrap_or_else(|| default_window(&delay));
        if matches!(window, Window::Iterations(_)) && !delay.is_iteration_based() {
            return Err(Error::Config("continuous delays need a time budget m".into()));
        }
        Ok(Self {
            config,
            delay,
            window,
            source,
        })
    }

    /// The objective instance for `seed` (shared by every rule).
    pub fn problem(&self, seed: u64) -> Result<Problem> {
        let mut objective_rng = stream_rng(seed, Stream::Objective);
        let objective_seed: u64 = objective_rng.random();
        match &self.source {
            Source::Synthetic { domain, sampler, kernel } => {
                let mut rng = ChaCha8Rng::seed_from_u64(objective_seed);
                let obj = SyntheticObjective::from_draw(domain.clone(), sampler.draw(&mut rng), kernel.clone(), objective_seed);
                Ok(Problem::plain(&obj))
            }
            Source::Tabular(t) => Ok(Problem::plain(t)),
            Source::ContextualSynthetic {
                contexts,
                features,
                queries,
                lengthscale,
                context_lengthscale,
            } => {
                let (ctx, _) = if *features == 0 {
                    index_contexts(*contexts)?
                } else {
                    let context_seed: u64 = objective_rng.random();
                    random_contexts(*contexts, *features, context_seed)?
                };
                let kernel = ProductKernel::new(
                    SqExpKernel::isotropic(ctx.dim(), *context_lengthscale, 1.0)?,
                    SqExpKernel::isotropic(queries.dim(), *lengthscale, 1.0)?,
                );
                let obj = synthetic_contextual(ctx, queries.clone(), &kernel, objective_seed)?;
                self.contextual_problem(&obj)
            }
            Source::ContextualTabular { objective, .. } => self.contextual_problem(objective),
        }
    }

    fn contextual_problem(&self, obj: &ContextualObjective) -> Result<Problem> {
        let schedule = ContextSchedule::new(
            &self.config.context.order,
            obj.num_contexts(),
            self.config.context.repeat_count,
        )?;
        Problem::contextual(obj, schedule)
    }

    pub fn horizon(&self, problem: &Problem) -> usize {
        self.config
            .horizon
            .or_else(|| problem.natural_horizon())
            .unwrap_or(150)
    }

    fn lengthscales(&self, dim: usize) -> Result<Vec<f64>> {
        let ls = &self.config.kernel.lengthscales;
        match ls.len() {
            1 => Ok(vec![ls[0]; dim]),
            n if n == dim => Ok(ls.clone()),
            n => Err(Error::Config(format!(
                "kernel.lengthscale has {n} values for a {dim}-dimensional query space"
            ))),
        }
    }

    fn spec<K: Kernel>(&self, rule: Rule, kernel: K, refit_grid: Vec<K>, horizon: usize) -> RunSpec<K> {
        RunSpec {
            rule,
            kernel,
            lambda: self.config.lambda.unwrap_or_else(|| default_lambda(horizon)),
            width: self.config.width.clone(),
            noise: self.config.noise,
            refit_every: self.config.refit_every,
            refit_grid,
            delay: self.delay.clone(),
            window: self.window,
            horizon,
            pathwise: self.config.pathwise,
        }
    }

    fn plain_kernels(&self, dim: usize) -> Result<(SqExpKernel, Vec<SqExpKernel>)> {
        let k = SqExpKernel::new(self.lengthscales(dim)?, self.config.kernel.variance)?;
        let mut grid = Vec::new();
        for &v in &self.config.refit_variances {
            for &l in &self.config.refit_lengthscales {
                grid.push(SqExpKernel::isotropic(dim, l, v)?);
            }
        }
        Ok((k, grid))
    }

    fn contextual_kernels(&self, problem: &Problem) -> Result<(ProductKernel, Vec<ProductKernel>)> {
        let (z, q) = crate::env::Objective::domain(problem)
            .factors()
            .ok_or_else(|| Error::invalid("contextual problem without a product domain"))?;
        let ctx = SqExpKernel::isotropic(z.dim(), self.config.kernel.context_lengthscale, 1.0)?;
        let query = SqExpKernel::new(self.lengthscales(q.dim())?, self.config.kernel.variance)?;
        let base = ProductKernel::new(ctx, query);
        let mut grid = Vec::new();
        for &v in &self.config.refit_variances {
            for &l in &self.config.refit_lengthscales {
                grid.push(base.with_query(SqExpKernel::isotropic(q.dim(), l, v)?));
            }
        }
        Ok((base, grid))
    }

    /// One rule on one seed.
    pub fn run_one(&self, problem: &Problem, rule: Rule, seed: u64) -> std::result::Result<RegretLog, super::run::RunFailure> {
        let horizon = self.horizon(problem);
        let wrap = |e: Error| super::run::RunFailure {
            partial: RegretLog::default(),
            error: Error::RunAborted {
                iteration: 0,
                source: Box::new(e),
            },
        };
        if problem.is_contextual() {
            let (k, grid) = self.contextual_kernels(problem).map_err(wrap)?;
            run_single(problem, &self.spec(rule, k, grid, horizon), seed)
        } else {
            let dim = crate::env::Objective::domain(problem).dim();
            let (k, grid) = self.plain_kernels(dim).map_err(wrap)?;
            run_single(problem, &self.spec(rule, k, grid, horizon), seed)
        }
    }

    /// Runs every rule on every seed, writing artifacts when an output
    /// directory is configured.
    pub fn run(&self) -> Result<ExperimentResult> {
        let out_dir = self.output_dir();
        if let Some(dir) = &out_dir {
            create_dir(dir)?;
            write(&dir.join("config.txt"), &self.config.source.to_text())?;
            if let Source::ContextualTabular {
                names, standardization, ..
            } = &self.source
            {
                write(&dir.join(STANDARDIZATION_FILE), &standardization.to_csv(names))?;
            }
        }
        let problems = self
            .config
            .seeds
            .iter()
            .map(|&s| self.problem(s).map(|p| (s, p)))
            .collect::<Result<Vec<_>>>()?;
        let mut runs = Vec::with_capacity(self.config.rules.len());
        for &rule in &self.config.rules {
            let mut logs = Vec::with_capacity(problems.len());
            for (seed, problem) in &problems {
                let result = self.run_one(problem, rule, *seed);
                let log = match result {
                    Ok(log) => log,
                    Err(failure) => {
                        if let Some(dir) = &out_dir {
                            let method_dir = dir.join(rule.name());
                            create_dir(&method_dir)?;
                            write(&method_dir.join(format!("seed{seed}.csv")), &failure.partial.to_csv())?;
                        }
                        return Err(failure.error);
                    }
                };
                if let Some(dir) = &out_dir {
                    let method_dir = dir.join(rule.name());
                    create_dir(&method_dir)?;
                    write(&method_dir.join(format!("seed{seed}.csv")), &log.to_csv())?;
                }
                logs.push((*seed, log));
            }
            runs.push((rule, logs));
        }
        let result = ExperimentResult::new(runs)?;
        if let Some(dir) = &out_dir {
            write(&dir.join("summary.csv"), &result.summary.to_csv())?;
            write(&dir.join("final.csv"), &result.summary.final_csv())?;
            write(&dir.join("runs.csv"), &result.runs_csv())?;
        }
        Ok(result)
    }

    pub fn output_dir(&self) -> Option<PathBuf> {
        self.config.output.as_ref().map(|o| o.join(&self.config.name))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    /// Logs per rule, in seed order.
    pub runs: Vec<(Rule, Vec<(u64, RegretLog)>)>,
    pub summary: Summary,
}

impl ExperimentResult {
    fn new(runs: Vec<(Rule, Vec<(u64, RegretLog)>)>) -> Result<Self> {
        let groups: Vec<(String, Vec<RegretLog>)> = runs
            .iter()
            .map(|(r, logs)| (r.name().to_string(), logs.iter().map(|(_, l)| l.clone()).collect()))
            .collect();
        let summary = summarize(&groups)?;
        Ok(Self { runs, summary })
    }

    pub fn logs(&self, rule: Rule) -> Option<&[(u64, RegretLog)]> {
        self.runs.iter().find(|(r, _)| *r == rule).map(|(_, l)| l.as_slice())
    }

    /// One row per run, including the first-conversion flag.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("method,seed,first_conversion,final_simple_regret,final_cum_regret,censored\n");
        for (rule, logs) in &self.runs {
            for (seed, log) in logs {
                let last = log.final_row().expect("runs are nonempty");
                let fc = log.first_conversion.map(|t| t.to_string()).unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    rule.name(),
                    seed,
                    fc,
                    last.simple_regret,
                    last.cum_regret,
                    last.censored
                );
            }
        }
        out
    }
}

/// Parses, resolves and runs a configuration.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentResult> {
    Experiment::new(config.clone())?.run()
}

/// Re-reads every `<method>/seed<k>.csv` under `dir` and aggregates them.
pub fn summarize_dir(dir: &Path) -> Result<Summary> {
    let mut groups: Vec<(String, Vec<RegretLog>)> = Vec::new();
    let mut methods: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    let rank = |p: &PathBuf| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        Rule::ALL.iter().position(|r| r.name() == name).unwrap_or(Rule::ALL.len())
    };
    methods.sort_by(|a, b| rank(a).cmp(&rank(b)).then_with(|| a.cmp(b)));
    for m in methods {
        let mut files: Vec<(u64, PathBuf)> = std::fs::read_dir(&m)
            .map_err(|e| Error::io(&m, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?;
                let k = name.strip_prefix("seed")?.strip_suffix(".csv")?.parse().ok()?;
                Some((k, p))
            })
            .collect();
        if files.is_empty() {
            continue;
        }
        files.sort();
        let logs = files
            .iter()
            .map(|(_, p)| {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                super::log::parse_log(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        let name = m.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        groups.push((name, logs));
    }
    if groups.is_empty() {
        return Err(Error::Config(format!("no seed logs under {}", dir.display())));
    }
    summarize(&groups)
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub value: String,
    pub result: ExperimentResult,
}

/// Runs `config` once per value of `param`. With `m` left on its default, the
/// window follows the swept delay mean (`m = 2 mu`).
pub fn sweep(config: &Config, param: &str, values: &[String]) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = RunConfig::from_config(config)?;
    let mut points = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = config.clone();
        cfg.set(param, v)?;
        let mut rc = RunConfig::from_config(&cfg)?;
        rc.name = format!("{}/sweep_{param}/{v}", base.name);
        let result = run_experiment(&rc)?;
        points.push(SweepPoint {
            value: v.clone(),
            result,
        });
    }
    if let Some(out) = &base.output {
        let dir = out.join(&base.name);
        create_dir(&dir)?;
        write(&dir.join(format!("sweep_{param}.csv")), &sweep_csv(param, &points))?;
    }
    Ok(points)
}

pub fn sweep_csv(param: &str, points: &[SweepPoint]) -> String {
    let mut out = format!("{param},method,runs,final_simple_mean,final_simple_stderr,final_cum_mean,final_cum_stderr\n");
    for p in points {
        for m in &p.result.summary.methods {
            let last = m.last();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.value, m.method, m.runs, last.simple_mean, last.simple_stderr, last.cum_mean, last.cum_stderr
            );
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Quick self-check of the numerical building blocks a preset relies on.
pub fn verify(preset_name: &str) -> Result<Vec<Check>> {
    let mut cfg = preset(preset_name)?;
    cfg.set("output", "-")?;
    let rc = RunConfig::from_config(&cfg)?;
    let exp = Experiment::new(rc)?;
    let mut checks = Vec::new();

    let m = match exp.window {
        Window::Iterations(m) => m as f64,
        Window::Time(m) => m,
    };
    let rho = rho_m(&exp.delay, m);
    let (pass, detail) = match &exp.delay {
        DelayModel::Poisson { mean } => {
            let o = poisson_cdf(*mean, m as u64);
            ((rho - o).abs() < 1e-12, format!("rho_m = {rho}, reference = {o}"))
        }
        _ => ((0.0..=1.0).contains(&rho), format!("rho_m = {rho}")),
    };
    checks.push(Check {
        name: "rho_m".into(),
        pass,
        detail,
    });

    let err = incremental_vs_dense(exp.config.kernel.lengthscales[0], 7)?;
    checks.push(Check {
        name: "posterior".into(),
        pass: err < 1e-8,
        detail: format!("max |incremental - dense| = {err:e}"),
    });

    let cov = coverage_test(&CoverageConfig::default(), 20)?;
    checks.push(Check {
        name: "coverage".into(),
        pass: cov.coverage >= 0.9,
        detail: format!("coverage {} over {} trials", cov.coverage, cov.trials),
    });

    let seed = exp.config.seeds[0];
    let problem = exp.problem(seed)?;
    let mut short = exp.config.clone();
    short.horizon = Some(exp.horizon(&problem).min(30));
    let short = Experiment::new(short)?;
    let rule = short.config.rules[0];
    let a = short.run_one(&problem, rule, seed)?.to_csv();
    let b = short.run_one(&short.problem(seed)?, rule, seed)?.to_csv();
    checks.push(Check {
        name: "determinism".into(),
        pass: a == b,
        detail: format!("{} seed {seed}, {} bytes", rule.name(), a.len()),
    });
    Ok(checks)
}

/// Largest mean/variance gap between the incremental posterior and a dense
/// re-solve along a random censor/reveal trajectory.
fn incremental_vs_dense(lengthscale: f64, seed: u64) -> Result<f64> {
    let domain = Arc::new(grid_domain(0.0, 1.0, 40)?);
    let kernel = SqExpKernel::isotropic(1, lengthscale.max(0.05), 1.0)?;
    let lambda = 1.05;
    let mut state = PosteriorState::new(domain.clone(), kernel.clone(), lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let id = rng.random_range(0..domain.len());
        state.append_query(id)?;
        if rng.random_bool(0.5) {
            let slot = rng.random_range(0..state.len());
            state.set_target(slot, rng.random_range(-1.0..1.0))?;
        }
        let pts: Vec<Vec<f64>> = state.queried().iter().map(|&i| domain.point(i).to_vec()).collect();
        for x in 0..domain.len() {
            let (m, v) = dense_posterior(&pts, state.targets(), &kernel, lambda, domain.point(x))?;
            let q = state.posterior_at_id(x);
            worst = worst.max((q.mean - m).abs()).max((q.variance - v).abs());
        }
    }
    Ok(worst)
}
