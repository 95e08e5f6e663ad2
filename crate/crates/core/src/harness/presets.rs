//! Named experiment configurations.

use super::config::Config;
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 5] = [
    "synthetic-stochastic",
    "synthetic-fixed",
    "batch",
    "contextual-multitask",
    "contextual-nonstationary",
];

const SYNTHETIC: &str = "\
objective.kind = synthetic
objective.grid_size = 1000
objective.lengthscale = 0.02
kernel.lengthscale = 0.02
gp.refit_lengthscales = 0.005,0.01,0.02,0.04,0.08
horizon = 150
seeds = 0..10
policy.beta_mode = constant
policy.beta = 1
refit_every = 10
";

const CONTEXTUAL: &str = "\
objective.kind = contextual-synthetic
objective.query_grid = 16,18
objective.lengthscale = 0.2
objective.context_lengthscale = 1
kernel.lengthscale = 0.2
kernel.context_lengthscale = 1
delay.model = poisson
delay.mean = 3
m = 6
context.repeat_count = 30
context.order = sequential
seeds = 0..10
policy.beta_mode = constant
policy.beta = 1
refit_every = 0
";

fn body(name: &str) -> Option<String> {
    Some(match name {
        "synthetic-stochastic" => format!("{SYNTHETIC}delay.model = poisson\ndelay.mean = 10\n"),
        "synthetic-fixed" => format!("{SYNTHETIC}delay.model = fixed\ndelay.fixed = 10\nm = 10\n"),
        "batch" => format!("{SYNTHETIC}batch.size = 11\n"),
        "contextual-multitask" => {
            format!("{CONTEXTUAL}objective.contexts = 50\nobjective.context_features = 6\nhorizon = 1500\n")
        }
        "contextual-nonstationary" => {
            format!("{CONTEXTUAL}objective.contexts = 20\nobjective.context_features = 0\nhorizon = 600\n")
        }
        _ => return None,
    })
}

/// The configuration behind a preset name.
pub fn preset(name: &str) -> Result<Config> {
    let text = body(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset '{name}' (expected one of: {})",
            PRESET_NAMES.join(", ")
        ))
    })?;
    let mut cfg = Config::parse(&text)?;
    cfg.set("name", name)?;
    Ok(cfg)
}
