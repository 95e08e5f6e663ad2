//! Query-selection rules and confidence widths.
//!
//! The delay-aware rules (`UcbSdf`, `TsSdf`) read the censored posterior and
//! widen their confidence by `B_y` times the summed posterior standard
//! deviations of the pending queries. The baselines either ignore pending
//! queries entirely or hallucinate them: mean from the completed-only
//! posterior, variance from the posterior over every issued query.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::ledger::DelayModel;
use crate::posterior::{PosteriorQuery, PosteriorState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    UcbSdf,
    TsSdf,
    UcbIgnore,
    AsyTs,
    BucbHallucinate,
    BtsHallucinate,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::UcbSdf,
        Rule::UcbIgnore,
        Rule::BucbHallucinate,
        Rule::TsSdf,
        Rule::AsyTs,
        Rule::BtsHallucinate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::UcbSdf => "ucb-sdf",
            Rule::TsSdf => "ts-sdf",
            Rule::UcbIgnore => "ucb-ignore",
            Rule::AsyTs => "asy-ts",
            Rule::BucbHallucinate => "bucb",
            Rule::BtsHallucinate => "bts",
        }
    }

    /// Reads the censored posterior and pays the pending-width term.
    pub fn is_delay_aware(self) -> bool {
        matches!(self, Rule::UcbSdf | Rule::TsSdf)
    }

    pub fn is_thompson(self) -> bool {
        matches!(self, Rule::TsSdf | Rule::AsyTs | Rule::BtsHallucinate)
    }

    pub fn is_hallucinating(self) -> bool {
        matches!(self, Rule::BucbHallucinate | Rule::BtsHallucinate)
    }

    /// Needs a posterior over completed queries only.
    pub fn needs_completed_state(self) -> bool {
        !self.is_delay_aware()
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "ucb-sdf" | "gp-ucb-sdf" => Rule::UcbSdf,
            "ts-sdf" | "gp-ts-sdf" => Rule::TsSdf,
            "ucb-ignore" | "gp-ucb" => Rule::UcbIgnore,
            "asy-ts" => Rule::AsyTs,
            "bucb" | "gp-bucb" | "bucb-hallucinate" => Rule::BucbHallucinate,
            "bts" | "gp-bts" | "bts-hallucinate" => Rule::BtsHallucinate,
            _ => return Err(Error::Config(format!("unknown policy rule '{s}'"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WidthMode {
    Theoretical,
    Constant,
}

/// Base confidence width `beta_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct WidthSchedule {
    pub mode: WidthMode,
    pub constant: f64,
    /// RKHS norm bound `B_f`.
    pub rkhs_bound: f64,
    /// Observation bound `B_y`.
    pub obs_bound: f64,
    /// Sub-Gaussian noise scale `R`.
    pub noise_scale: f64,
    pub delta: f64,
}

impl Default for WidthSchedule {
    fn default() -> Self {
        Self {
            mode: WidthMode::Constant,
            constant: 1.0,
            rkhs_bound: 1.0,
            obs_bound: 1.0,
            noise_scale: 0.05,
            delta: 0.1,
        }
    }
}

impl WidthSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("policy.delta must lie in (0, 1)".into()));
        }
        if self.obs_bound < 0.0 || self.rkhs_bound < 0.0 || self.noise_scale < 0.0 || self.constant < 0.0 {
            return Err(Error::Config("width parameters must be nonnegative".into()));
        }
        Ok(())
    }

    /// `beta_t` given the realized information gain of the first `t - 1` queries.
    pub fn beta(&self, info_gain: f64) -> f64 {
        match self.mode {
            WidthMode::Constant => self.constant,
            WidthMode::Theoretical => {
                self.rkhs_bound
                    + (self.noise_scale + self.obs_bound)
                        * (2.0 * (info_gain + 1.0 + (2.0 / self.delta).ln())).sqrt()
            }
        }
    }

    /// `nu_t = B_y * sum_pending sigma + beta_t`.
    pub fn nu(&self, info_gain: f64, pending_width: f64) -> f64 {
        pending_width + self.beta(info_gain)
    }
}

/// `B_y` times the summed posterior standard deviations at the pending slots.
pub fn pending_width<K: Kernel>(state: &PosteriorState<K>, pending_slots: &[usize], obs_bound: f64) -> f64 {
    let sum: f64 = pending_slots
        .iter()
        .map(|&s| state.posterior_at_slot(s).std)
        .sum();
    obs_bound * sum
}

/// Lowest index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn ucb_scores(post: &[PosteriorQuery], nu: f64) -> Vec<f64> {
    post.iter().map(|q| q.mean + nu * q.std).collect()
}

/// `argmax_x mu(x) + nu * sigma(x)` over `candidates`; returns the chosen id.
pub fn select_ucb_sdf<K: Kernel>(state: &PosteriorState<K>, candidates: &[usize], nu: f64) -> Result<usize> {
    check_candidates(candidates)?;
    if !(nu >= 0.0) {
        return Err(Error::invalid("nu must be nonnegative"));
    }
    let post = state.posterior_over(candidates);
    Ok(candidates[argmax(&ucb_scores(&post, nu))])
}

/// Draws `f ~ N(mu, nu^2 Sigma)` over `candidates` and returns its argmax.
pub fn select_ts_sdf<K: Kernel, R: Rng + ?Sized>(
    state: &mut PosteriorState<K>,
    candidates: &[usize],
    nu: f64,
    rng: &mut R,
) -> Result<usize> {
    check_candidates(candidates)?;
    let draw = state.sample_function(candidates, nu, rng)?;
    Ok(candidates[argmax(&draw)])
}

/// Baseline selection.
///
/// `UcbIgnore`/`AsyTs` read `completed` only. The hallucinating rules take the
/// mean from `completed` and the covariance from `all`, which equals the
/// posterior obtained by filling pending targets with the completed-only mean.
pub fn select_baseline<K: Kernel, R: Rng + ?Sized>(
    rule: Rule,
    completed: &mut PosteriorState<K>,
    all: &mut PosteriorState<K>,
    candidates: &[usize],
    nu: f64,
    rng: &mut R,
) -> Result<usize> {
    check_candidates(candidates)?;
    match rule {
        Rule::UcbIgnore => select_ucb_sdf(completed, candidates, nu),
        Rule::AsyTs => select_ts_sdf(completed, candidates, nu, rng),
        Rule::BucbHallucinate => {
            let post = hallucinated_posterior(completed, all, candidates);
            Ok(candidates[argmax(&ucb_scores(&post, nu))])
        }
        Rule::BtsHallucinate => {
            if !(nu > 0.0) {
                return Err(Error::invalid("sampling scale must be positive"));
            }
            let centered = all.sample_centered(candidates, rng)?;
            let mean = completed.posterior_over(candidates);
            let draw: Vec<f64> = mean
                .iter()
                .zip(centered)
                .map(|(q, c)| q.mean + nu * c)
                .collect();
            Ok(candidates[argmax(&draw)])
        }
        Rule::UcbSdf | Rule::TsSdf => Err(Error::invalid(format!("{rule} is not a baseline"))),
    }
}

/// Applies any rule. The baselines need the completed-only posterior.
pub fn select<K: Kernel, R: Rng + ?Sized>(
    rule: Rule,
    all: &mut PosteriorState<K>,
    completed: Option<&mut PosteriorState<K>>,
    candidates: &[usize],
    nu: f64,
    rng: &mut R,
) -> Result<usize> {
    match rule {
        Rule::UcbSdf => select_ucb_sdf(all, candidates, nu),
        Rule::TsSdf => select_ts_sdf(all, candidates, nu, rng),
        _ => {
            let completed = completed
                .ok_or_else(|| Error::invalid(format!("{rule} needs the completed-only posterior")))?;
            select_baseline(rule, completed, all, candidates, nu, rng)
        }
    }
}

/// Mean from `completed`, variance from `all`.
pub fn hallucinated_posterior<K: Kernel>(
    completed: &PosteriorState<K>,
    all: &PosteriorState<K>,
    candidates: &[usize],
) -> Vec<PosteriorQuery> {
    let mean = completed.posterior_over(candidates);
    let var = all.posterior_over(candidates);
    mean.iter()
        .zip(var)
        .map(|(m, v)| PosteriorQuery {
            mean: m.mean,
            ..v
        })
        .collect()
}

fn check_candidates(candidates: &[usize]) -> Result<()> {
    if candidates.is_empty() {
        Err(Error::invalid("candidate set is empty"))
    } else {
        Ok(())
    }
}

/// Batch BO as a delayed-feedback problem: batch size `B_x` becomes a fixed delay
/// of `B_x - 1` iterations with `m = B_x - 1`, so every observation converts.
pub fn batch_adapter(batch_size: u64) -> Result<(DelayModel, u64)> {
    if batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    let d = batch_size - 1;
    Ok((DelayModel::FixedIterations { delay: d }, d))
}
