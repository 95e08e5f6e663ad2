//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! name = demo
//! objective.kind = synthetic
//! kernel.lengthscale = 0.02
//! ```
//!
//! Keys are dotted, unknown keys and repeated keys are errors, and every key can
//! be overridden from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::contextual::ContextOrder;
use crate::env::NoiseModel;
use crate::error::{Error, Result};
use crate::kernel::log_spaced;
use crate::ledger::{parse_delay_table, DelayModel};
use crate::policy::{batch_adapter, Rule, WidthMode, WidthSchedule};

/// Every accepted key.
pub const KNOWN_KEYS: &[&str] = &[
    "name",
    "objective.kind",
    "objective.grid_lo",
    "objective.grid_hi",
    "objective.grid_size",
    "objective.lengthscale",
    "objective.path",
    "objective.meta_path",
    "objective.contexts",
    "objective.context_features",
    "objective.query_grid",
    "objective.context_lengthscale",
    "noise.scale",
    "noise.bound",
    "kernel.lengthscale",
    "kernel.variance",
    "kernel.context_lengthscale",
    "gp.lambda",
    "gp.refit_lengthscales",
    "gp.refit_variances",
    "gp.pathwise",
    "refit_every",
    "policy.rules",
    "policy.beta_mode",
    "policy.beta",
    "policy.B_f",
    "policy.delta",
    "delay.model",
    "delay.mean",
    "delay.fixed",
    "delay.rate",
    "delay.table",
    "m",
    "batch.size",
    "horizon",
    "seeds",
    "output",
    "context.repeat_count",
    "context.order",
];

/// Raw key/value pairs in canonical (sorted) order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

fn check_key(key: &str) -> Result<()> {
    if KNOWN_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key '{key}'")))
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut lines_of: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, "expected 'key = value'"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::parse(line_no, "empty key"));
            }
            check_key(k).map_err(|e| Error::parse(line_no, e.to_string()))?;
            if let Some(prev) = lines_of.insert(k.to_string(), line_no) {
                return Err(Error::parse(
                    line_no,
                    format!("key '{k}' repeated (first set on line {prev})"),
                ));
            }
            cfg.entries.insert(k.to_string(), v.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        check_key(key)?;
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
            })
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        let v: f64 = self.or(key, default)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        p.parse::<T>()
                            .map_err(|_| Error::Config(format!("{key}: cannot parse '{p}'")))
                    })
                    .collect::<Result<Vec<T>>>()
            })
            .transpose()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveSpec {
    /// GP sample on a 1-D grid.
    Synthetic {
        grid_lo: f64,
        grid_hi: f64,
        grid_size: usize,
        lengthscale: f64,
    },
    Tabular {
        path: PathBuf,
    },
    /// GP sample over contexts x a query grid on `[0, 1]^d`.
    ContextualSynthetic {
        contexts: usize,
        /// `0` uses the standardized context index.
        context_features: usize,
        query_grid: Vec<usize>,
        lengthscale: f64,
        context_lengthscale: f64,
    },
    ContextualTabular {
        path: PathBuf,
        meta_path: Option<PathBuf>,
        context_features: usize,
    },
}

impl ObjectiveSpec {
    pub fn is_contextual(&self) -> bool {
        matches!(
            self,
            ObjectiveSpec::ContextualSynthetic { .. } | ObjectiveSpec::ContextualTabular { .. }
        )
    }
}

/// How long an observation is awaited.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Window {
    Iterations(u64),
    Time(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    /// One value (isotropic) or one per query dimension.
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub context_lengthscale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSpec {
    pub repeat_count: usize,
    pub order: ContextOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DelaySpec {
    Model(DelayModel),
    /// Per-point means loaded from a file when the run is built.
    Table(PathBuf),
}

/// Fully resolved experiment description.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub objective: ObjectiveSpec,
    pub kernel: KernelSpec,
    /// `None` resolves to `1 + 2 / T`.
    pub lambda: Option<f64>,
    pub refit_every: usize,
    pub refit_lengthscales: Vec<f64>,
    pub refit_variances: Vec<f64>,
    pub pathwise: bool,
    pub rules: Vec<Rule>,
    pub width: WidthSchedule,
    pub noise: NoiseModel,
    pub delay: DelaySpec,
    /// `None` resolves to `2 * mean` once the delay model is known.
    pub window: Option<Window>,
    /// `None` resolves to 150, or to the schedule length for contextual runs.
    pub horizon: Option<usize>,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    pub context: ContextSpec,
    /// Canonical source text, persisted next to the outputs.
    pub source: Config,
}

/// `a..b` (exclusive), a single seed, or a comma list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let t = text.trim();
    let bad = || Error::Config(format!("seeds: cannot parse '{text}'"));
    let seeds: Vec<u64> = if let Some((a, b)) = t.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..b).collect()
    } else {
        t.split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(Error::Config("seeds: empty seed list".into()));
    }
    if seeds.len() > 100_000 {
        return Err(Error::Config("seeds: too many seeds".into()));
    }
    Ok(seeds)
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 {
        Ok(v)
    } else {
        Err(Error::Config(format!("{key} must be positive")))
    }
}

fn objective_from(cfg: &Config) -> Result<ObjectiveSpec> {
    let kind = cfg
        .get("objective.kind")
        .ok_or_else(|| Error::Config("objective.kind is required".into()))?;
    let path = |key: &str| -> Result<PathBuf> {
        cfg.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("{key} is required for objective.kind = {kind}")))
    };
    Ok(match kind {
        "synthetic" => {
            let grid_size: usize = cfg.or("objective.grid_size", 1000)?;
            if grid_size < 2 {
                return Err(Error::Config("objective.grid_size must be at least 2".into()));
            }
            ObjectiveSpec::Synthetic {
                grid_lo: cfg.f64_or("objective.grid_lo", 0.0)?,
                grid_hi: cfg.f64_or("objective.grid_hi", 1.0)?,
                grid_size,
                lengthscale: positive("objective.lengthscale", cfg.f64_or("objective.lengthscale", 0.02)?)?,
            }
        }
        "tabular" => ObjectiveSpec::Tabular {
            path: path("objective.path")?,
        },
        "contextual-synthetic" => {
            let query_grid = cfg.list::<usize>("objective.query_grid")?.unwrap_or(vec![16, 18]);
            if query_grid.is_empty() || query_grid.iter().any(|&n| n < 2) {
                return Err(Error::Config("objective.query_grid sizes must be at least 2".into()));
            }
            let contexts: usize = cfg.or("objective.contexts", 50)?;
            if contexts == 0 {
                return Err(Error::Config("objective.contexts must be positive".into()));
            }
            ObjectiveSpec::ContextualSynthetic {
                contexts,
                context_features: cfg.or("objective.context_features", 6)?,
                query_grid,
                lengthscale: positive("objective.lengthscale", cfg.f64_or("objective.lengthscale", 0.2)?)?,
                context_lengthscale: positive(
                    "objective.context_lengthscale",
                    cfg.f64_or("objective.context_lengthscale", 1.0)?,
                )?,
            }
        }
        "contextual-tabular" => ObjectiveSpec::ContextualTabular {
            path: path("objective.path")?,
            meta_path: cfg.get("objective.meta_path").map(PathBuf::from),
            context_features: cfg.or("objective.context_features", 6)?,
        },
        other => return Err(Error::Config(format!("unknown objective.kind '{other}'"))),
    })
}

fn delay_from(cfg: &Config) -> Result<(DelaySpec, Option<Window>)> {
    let explicit_m: Option<f64> = cfg.parsed("m")?;
    if let Some(b) = cfg.parsed::<u64>("batch.size")? {
        if cfg.get("delay.model").is_some() {
            return Err(Error::Config("batch.size and delay.model are mutually exclusive".into()));
        }
        let (model, m) = batch_adapter(b)?;
        if explicit_m.is_some_and(|x| x != m as f64) {
            return Err(Error::Config(format!("batch.size {b} fixes m = {m}")));
        }
        return Ok((DelaySpec::Model(model), Some(Window::Iterations(m))));
    }
    let has_table = cfg.get("delay.table").is_some();
    let model = cfg
        .get("delay.model")
        .unwrap_or(if has_table { "input" } else { "poisson" });
    if has_table && model != "input" {
        return Err(Error::Config(format!("delay.table needs delay.model = input, not {model}")));
    }
    let spec = match model {
        "poisson" => {
            let mean = cfg.f64_or("delay.mean", 10.0)?;
            if mean < 0.0 {
                return Err(Error::Config("delay.mean must be nonnegative".into()));
            }
            DelaySpec::Model(DelayModel::Poisson { mean })
        }
        "fixed" => DelaySpec::Model(DelayModel::FixedIterations {
            delay: cfg.or("delay.fixed", 10)?,
        }),
        "exponential" => DelaySpec::Model(DelayModel::ContinuousExponential {
            rate: positive("delay.rate", cfg.f64_or("delay.rate", 0.1)?)?,
        }),
        "input" => DelaySpec::Table(
            cfg.get("delay.table")
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config("delay.table is required for delay.model = input".into()))?,
        ),
        other => return Err(Error::Config(format!("unknown delay.model '{other}'"))),
    };
    let time_mode = matches!(spec, DelaySpec::Model(DelayModel::ContinuousExponential { .. }));
    let window = match explicit_m {
        None => None,
        Some(m) if time_mode => {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::Config("m must be positive".into()));
            }
            Some(Window::Time(m))
        }
        Some(m) => {
            if m < 1.0 || m.fract() != 0.0 || m > 1e9 {
                return Err(Error::Config("m must be a positive integer".into()));
            }
            Some(Window::Iterations(m as u64))
        }
    };
    Ok((spec, window))
}

/// `2 * mean`, rounded up; the delay itself for fixed delays. Never below 1.
pub fn default_window(model: &DelayModel) -> Window {
    match model {
        DelayModel::FixedIterations { delay } => Window::Iterations((*delay).max(1)),
        DelayModel::ContinuousExponential { rate } => Window::Time(2.0 / rate),
        other => Window::Iterations(((2.0 * other.mean()).ceil() as u64).max(1)),
    }
}

impl DelaySpec {
    /// Loads table-backed models.
    pub fn resolve(&self) -> Result<DelayModel> {
        match self {
            DelaySpec::Model(m) => Ok(m.clone()),
            DelaySpec::Table(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Ok(DelayModel::InputDependent {
                    means: parse_delay_table(&text)?,
                })
            }
        }
    }
}

impl RunConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let objective = objective_from(cfg)?;
        let (delay, window) = delay_from(cfg)?;
        let lengthscales = cfg.list::<f64>("kernel.lengthscale")?.unwrap_or(vec![0.1]);
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("kernel.lengthscale must be positive".into()));
        }
        let kernel = KernelSpec {
            lengthscales,
            variance: positive("kernel.variance", cfg.f64_or("kernel.variance", 1.0)?)?,
            context_lengthscale: positive(
                "kernel.context_lengthscale",
                cfg.f64_or("kernel.context_lengthscale", 1.0)?,
            )?,
        };
        let lambda: Option<f64> = cfg.parsed("gp.lambda")?;
        if let Some(l) = lambda {
            if !(l >= crate::posterior::LAMBDA_FLOOR) || !l.is_finite() {
                return Err(Error::Config(format!("gp.lambda must be at least {:e}", crate::posterior::LAMBDA_FLOOR)));
            }
        }
        let refit_lengthscales = cfg
            .list::<f64>("gp.refit_lengthscales")?
            .unwrap_or_else(|| log_spaced(0.01, 1.0, 7));
        let refit_variances = cfg.list::<f64>("gp.refit_variances")?.unwrap_or(vec![1.0]);
        if refit_lengthscales.is_empty()
            || refit_variances.is_empty()
            || refit_lengthscales.iter().chain(&refit_variances).any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return Err(Error::Config("refit grids must be nonempty and positive".into()));
        }
        let rules = match cfg.get("policy.rules") {
            None => Rule::ALL.to_vec(),
            Some(v) => {
                let rules = v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<Rule>>>()?;
                if rules.is_empty() {
                    return Err(Error::Config("policy.rules is empty".into()));
                }
                let mut seen = rules.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != rules.len() {
                    return Err(Error::Config("policy.rules lists a rule twice".into()));
                }
                rules
            }
        };
        let noise = NoiseModel {
            scale: cfg.f64_or("noise.scale", 0.05)?,
            bound: cfg.f64_or("noise.bound", 1.0)?,
        };
        if noise.scale < 0.0 || !(noise.bound > 0.0) {
            return Err(Error::Config("noise.scale must be >= 0 and noise.bound > 0".into()));
        }
        let width = WidthSchedule {
            mode: match cfg.get("policy.beta_mode").unwrap_or("constant") {
                "constant" => WidthMode::Constant,
                "theoretical" => WidthMode::Theoretical,
                other => return Err(Error::Config(format!("unknown policy.beta_mode '{other}'"))),
            },
            constant: cfg.f64_or("policy.beta", 1.0)?,
            rkhs_bound: cfg.f64_or("policy.B_f", 1.0)?,
            obs_bound: noise.bound,
            noise_scale: noise.scale,
            delta: cfg.f64_or("policy.delta", 0.1)?,
        };
        width.validate()?;
        let horizon: Option<usize> = cfg.parsed("horizon")?;
        if horizon == Some(0) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        let output = match cfg.get("output") {
            None => Some(PathBuf::from("results")),
            Some("-") | Some("none") => None,
            Some(p) => Some(PathBuf::from(p)),
        };
        let repeat_count: usize = cfg.or("context.repeat_count", 30)?;
        if repeat_count == 0 {
            return Err(Error::Config("context.repeat_count must be positive".into()));
        }
        let order: ContextOrder = cfg.get("context.order").unwrap_or("sequential").parse()?;
        let pathwise = match cfg.get("gp.pathwise").unwrap_or("true") {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => return Err(Error::Config(format!("gp.pathwise: cannot parse '{other}'"))),
        };
        Ok(RunConfig {
            name: cfg.get("name").unwrap_or("run").to_string(),
            objective,
            kernel,
            lambda,
            refit_every: cfg.or("refit_every", 10)?,
            refit_lengthscales,
            refit_variances,
            pathwise,
            rules,
            width,
            noise,
            delay,
            window,
            horizon,
            seeds: parse_seeds(cfg.get("seeds").unwrap_or("0..10"))?,
            output,
            context: ContextSpec { repeat_count, order },
            source: cfg.clone(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_config(&Config::parse(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_roundtrip() {
        let text = "# demo\nname = x\nobjective.kind = synthetic\n\nkernel.lengthscale = 0.02, 0.03\nseeds = 2..5\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        let rc = RunConfig::from_config(&cfg).unwrap();
        assert_eq!(rc.kernel.lengthscales, vec![0.02, 0.03]);
        assert_eq!(rc.seeds, vec![2, 3, 4]);
        assert_eq!(rc.rules, Rule::ALL.to_vec());
        assert_eq!(rc.refit_every, 10);
        assert!(rc.window.is_none());
    }

    #[test]
    fn rejections_name_the_line() {
        match Config::parse("name = a\nbogus = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match Config::parse("name = a\n\nname = b\n") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("line 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Config::parse("just text\n").is_err());
        assert!(RunConfig::parse("name = a\n").is_err());
        assert!(RunConfig::parse("objective.kind = nope\n").is_err());
        assert!(RunConfig::parse("objective.kind = synthetic\nhorizon = 0\n").is_err());
        assert!(RunConfig::parse("objective.kind = synthetic\npolicy.rules = ucb-sdf,ucb-sdf\n").is_err());
        assert!(RunConfig::parse("objective.kind = synthetic\nm = 2.5\n").is_err());
        assert!(RunConfig::parse("objective.kind = synthetic\nbatch.size = 3\ndelay.model = poisson\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = Config::parse("objective.kind = synthetic\n").unwrap();
        cfg.apply_override("delay.mean=3").unwrap();
        cfg.apply_override("m = 7").unwrap();
        assert!(cfg.apply_override("nokey").is_err());
        assert!(cfg.apply_override("zzz=1").is_err());
        let rc = RunConfig::from_config(&cfg).unwrap();
        assert_eq!(rc.delay, DelaySpec::Model(DelayModel::Poisson { mean: 3.0 }));
        assert_eq!(rc.window, Some(Window::Iterations(7)));
    }

    #[test]
    fn window_defaults() {
        assert_eq!(default_window(&DelayModel::Poisson { mean: 10.0 }), Window::Iterations(20));
        assert_eq!(default_window(&DelayModel::Poisson { mean: 0.0 }), Window::Iterations(1));
        assert_eq!(default_window(&DelayModel::FixedIterations { delay: 10 }), Window::Iterations(10));
        assert_eq!(
            default_window(&DelayModel::ContinuousExponential { rate: 0.5 }),
            Window::Time(4.0)
        );
        let rc = RunConfig::parse("objective.kind = synthetic\nbatch.size = 11\n").unwrap();
        assert_eq!(rc.delay, DelaySpec::Model(DelayModel::FixedIterations { delay: 10 }));
        assert_eq!(rc.window, Some(Window::Iterations(10)));
    }

    #[test]
    fn seeds_forms() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("1, 4").unwrap(), vec![1, 4]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
