//! The optimization loop for a single (rule, seed) pair.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Window;
use super::log::{LogRow, RegretLog};
use crate::contextual::{ContextSchedule, ContextualObjective};
use crate::env::{observe, NoiseModel, Objective};
use crate::error::{Error, Result};
use crate::kernel::{Domain, Kernel};
use crate::ledger::{sample_delay, DelayModel, Ledger, PendingEntry, Reveal};
use crate::policy::{pending_width, select, Rule, WidthSchedule};
use crate::posterior::PosteriorState;

/// Independent random streams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Objective = 0,
    Noise = 1,
    Delays = 2,
    Sampling = 3,
    Contexts = 4,
}

pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug)]
struct ContextPlan {
    schedule: ContextSchedule,
    num_queries: usize,
    optima: Vec<f64>,
    slices: Vec<Vec<usize>>,
}

/// What the learner optimizes: a finite domain of values, optionally split into
/// context slices visited on a schedule.
#[derive(Clone, Debug)]
pub struct Problem {
    domain: Arc<Domain>,
    values: Vec<f64>,
    all_ids: Vec<usize>,
    global_opt: f64,
    plan: Option<ContextPlan>,
}

impl Problem {
    pub fn plain<O: Objective + ?Sized>(objective: &O) -> Self {
        let values = objective.values().to_vec();
        Self {
            domain: objective.domain().clone(),
            all_ids: (0..values.len()).collect(),
            global_opt: objective.optimum().1,
            values,
            plan: None,
        }
    }

    pub fn contextual(objective: &ContextualObjective, schedule: ContextSchedule) -> Result<Self> {
        let nz = objective.num_contexts();
        if let Some(&z) = schedule.order().iter().find(|&&z| z >= nz) {
            return Err(Error::invalid(format!("schedule visits context {z} of {nz}")));
        }
        let values = objective.values().to_vec();
        Ok(Self {
            domain: objective.joint_domain().clone(),
            all_ids: (0..values.len()).collect(),
            global_opt: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            values,
            plan: Some(ContextPlan {
                schedule,
                num_queries: objective.num_queries(),
                optima: (0..nz).map(|z| objective.optimum(z).1).collect(),
                slices: (0..nz).map(|z| objective.slice(z)).collect(),
            }),
        })
    }

    pub fn is_contextual(&self) -> bool {
        self.plan.is_some()
    }

    /// Schedule length for contextual problems.
    pub fn natural_horizon(&self) -> Option<usize> {
        self.plan.as_ref().map(|p| p.schedule.rounds())
    }

    /// Number of regret groups (contexts, or one).
    pub fn groups(&self) -> usize {
        self.plan.as_ref().map_or(1, |p| p.optima.len())
    }

    pub fn group_of_point(&self, id: usize) -> usize {
        self.plan.as_ref().map_or(0, |p| id / p.num_queries)
    }

    pub fn group_at(&self, t: usize) -> usize {
        self.plan.as_ref().map_or(0, |p| p.schedule.context_at(t))
    }

    pub fn candidates_at(&self, t: usize) -> &[usize] {
        match &self.plan {
            None => &self.all_ids,
            Some(p) => &p.slices[p.schedule.context_at(t)],
        }
    }

    pub fn optimum_of_group(&self, group: usize) -> f64 {
        self.plan.as_ref().map_or(self.global_opt, |p| p.optima[group])
    }

    /// Id used by input-dependent delay tables: the query id in contextual
    /// problems, the point id otherwise.
    pub fn delay_key(&self, id: usize) -> usize {
        self.plan.as_ref().map_or(id, |p| id % p.num_queries)
    }
}

impl Objective for Problem {
    fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Everything needed to run one rule on one problem.
#[derive(Clone, Debug)]
pub struct RunSpec<K: Kernel> {
    pub rule: Rule,
    pub kernel: K,
    pub lambda: f64,
    pub width: WidthSchedule,
    pub noise: NoiseModel,
    /// `0` disables refits.
    pub refit_every: usize,
    pub refit_grid: Vec<K>,
    pub delay: DelayModel,
    pub window: Window,
    pub horizon: usize,
    pub pathwise: bool,
}

/// A run that stopped early; `partial` holds every completed iteration.
#[derive(Debug)]
pub struct RunFailure {
    pub partial: RegretLog,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} iterations logged)", self.error, self.partial.len())
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.error
    }
}

enum Clock {
    Iter(Ledger),
    Time(Ledger),
}

impl Clock {
    fn ledger(&self) -> &Ledger {
        match self {
            Clock::Iter(l) | Clock::Time(l) => l,
        }
    }

    fn advance(&mut self, now: usize) -> Vec<Reveal> {
        match self {
            Clock::Iter(l) => l.advance(now as u64),
            Clock::Time(l) => l.advance_time(now as f64),
        }
    }

    fn enqueue(&mut self, e: PendingEntry) -> Result<()> {
        match self {
            Clock::Iter(l) | Clock::Time(l) => l.enqueue(e),
        }
    }
}

struct Loop<'a, K: Kernel> {
    problem: &'a Problem,
    spec: &'a RunSpec<K>,
    all: PosteriorState<K>,
    completed: Option<PosteriorState<K>>,
    ledger: Clock,
    best_converted: Vec<Option<f64>>,
    log: RegretLog,
    cum: f64,
}

impl<K: Kernel> Loop<'_, K> {
    fn reveal(&mut self, reveals: Vec<Reveal>, t: usize) -> Result<()> {
        for r in reveals {
            self.all.set_target(r.slot, r.observation)?;
            if let Some(c) = self.completed.as_mut() {
                let slot = c.append_query(r.point)?;
                c.set_target(slot, r.observation)?;
            }
            let g = self.problem.group_of_point(r.point);
            let f = self.problem.value(r.point);
            let best = self.best_converted[g].get_or_insert(f);
            *best = best.max(f);
            self.log.first_conversion.get_or_insert(t);
        }
        Ok(())
    }

    fn refit(&mut self) -> Result<()> {
        let grid = &self.spec.refit_grid;
        match self.completed.as_mut() {
            None => {
                if !self.all.is_empty() {
                    self.all.refit_hyperparameters(grid)?;
                }
            }
            Some(c) => {
                if !c.is_empty() {
                    let out = c.refit_hyperparameters(grid)?;
                    self.all.set_kernel(out.kernel)?;
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, t: usize, noise_rng: &mut ChaCha8Rng, delay_rng: &mut ChaCha8Rng, sample_rng: &mut ChaCha8Rng) -> Result<()> {
        let spec = self.spec;
        let reveals = self.ledger.advance(t - 1);
        self.reveal(reveals, t)?;
        if spec.refit_every > 0 && t.is_multiple_of(spec.refit_every) {
            self.refit()?;
        }
        let candidates = self.problem.candidates_at(t);
        self.all.track_candidates(candidates);
        if let Some(c) = self.completed.as_mut() {
            c.track_candidates(candidates);
        }

        let ledger = self.ledger.ledger();
        let pending = ledger.pending_len();
        let censored = ledger.censored_forever();
        let info_gain = self.all.realized_info_gain();
        let nu = match spec.rule {
            Rule::UcbSdf | Rule::TsSdf => {
                let w = pending_width(&self.all, &ledger.pending_slots(), spec.width.obs_bound);
                spec.width.nu(info_gain, w)
            }
            Rule::UcbIgnore | Rule::AsyTs => {
                let c = self.completed.as_ref().expect("baseline keeps a completed posterior");
                spec.width.nu(c.realized_info_gain(), 0.0)
            }
            Rule::BucbHallucinate | Rule::BtsHallucinate => spec.width.nu(info_gain, 0.0),
        };
        let id = select(spec.rule, &mut self.all, self.completed.as_mut(), candidates, nu, sample_rng)?;

        let slot = self.all.append_query(id)?;
        let y = observe(self.problem, id, &spec.noise, noise_rng);
        let d = sample_delay(&spec.delay, self.problem.delay_key(id), delay_rng);
        self.ledger.enqueue(PendingEntry {
            slot,
            point: id,
            issued: t as f64,
            delay: d,
            observation: y,
        })?;

        let g = self.problem.group_at(t);
        let opt = self.problem.optimum_of_group(g);
        let inst = opt - self.problem.value(id);
        self.cum += inst;
        self.log.rows.push(LogRow {
            t,
            point_id: id,
            inst_regret: inst,
            cum_regret: self.cum,
            simple_regret: opt - self.best_converted[g].unwrap_or(0.0),
            pending,
            censored,
            nu_t: nu,
            info_gain,
        });
        Ok(())
    }
}

/// Runs `spec.rule` for `spec.horizon` iterations with streams derived from `seed`.
///
/// Each iteration reveals due observations, refits on schedule, computes
/// `nu_t`, selects, then issues the query with a fresh observation and delay.
pub fn run_single<K: Kernel>(problem: &Problem, spec: &RunSpec<K>, seed: u64) -> std::result::Result<RegretLog, RunFailure> {
    let fail = |partial: RegretLog, iteration: usize, e: Error| RunFailure {
        partial,
        error: Error::RunAborted {
            iteration,
            source: Box::new(e),
        },
    };
    let setup = || -> Result<(PosteriorState<K>, Option<PosteriorState<K>>, Clock)> {
        if spec.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        spec.delay.validate()?;
        spec.width.validate()?;
        let mut all = PosteriorState::new(problem.domain().clone(), spec.kernel.clone(), spec.lambda)?;
        all.set_pathwise_sampling(spec.pathwise);
        let completed = if spec.rule.needs_completed_state() {
            let mut c = PosteriorState::new(problem.domain().clone(), spec.kernel.clone(), spec.lambda)?;
            c.set_pathwise_sampling(spec.pathwise);
            Some(c)
        } else {
            None
        };
        let ledger = match spec.window {
            Window::Iterations(m) => {
                if !spec.delay.is_iteration_based() {
                    return Err(Error::invalid("continuous delays need a time window"));
                }
                Clock::Iter(Ledger::iterations(m)?)
            }
            Window::Time(m) => Clock::Time(Ledger::time(m)?),
        };
        Ok((all, completed, ledger))
    };
    let (all, completed, ledger) = setup().map_err(|e| fail(RegretLog::default(), 0, e))?;

    let mut state = Loop {
        problem,
        spec,
        all,
        completed,
        ledger,
        best_converted: vec![None; problem.groups()],
        log: RegretLog {
            rows: Vec::with_capacity(spec.horizon),
            first_conversion: None,
        },
        cum: 0.0,
    };
    let mut noise_rng = stream_rng(seed, Stream::Noise);
    let mut delay_rng = stream_rng(seed, Stream::Delays);
    let mut sample_rng = stream_rng(seed, Stream::Sampling);
    for t in 1..=spec.horizon {
        if let Err(e) = state.step(t, &mut noise_rng, &mut delay_rng, &mut sample_rng) {
            return Err(fail(state.log, t, e));
        }
    }
    Ok(state.log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_synthetic;
    use crate::kernel::{grid_domain, SqExpKernel};

    fn problem(n: usize, seed: u64) -> Problem {
        let k = SqExpKernel::isotropic(1, 0.1, 1.0).unwrap();
        let obj = sample_synthetic(&k, Arc::new(grid_domain(0.0, 1.0, n).unwrap()), seed).unwrap();
        Problem::plain(&obj)
    }

    fn spec(rule: Rule, delay: DelayModel, m: u64, horizon: usize) -> RunSpec<SqExpKernel> {
        let k = SqExpKernel::isotropic(1, 0.1, 1.0).unwrap();
        RunSpec {
            rule,
            kernel: k.clone(),
            lambda: 1.0 + 2.0 / horizon as f64,
            width: WidthSchedule::default(),
            noise: NoiseModel::default(),
            refit_every: 5,
            refit_grid: vec![k.clone(), k.with_params(0.3, 1.0).unwrap()],
            delay,
            window: Window::Iterations(m),
            horizon,
            pathwise: true,
        }
    }

    #[test]
    fn single_iteration() {
        let p = problem(30, 1);
        let log = run_single(&p, &spec(Rule::UcbSdf, DelayModel::Poisson { mean: 2.0 }, 4, 1), 0).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.rows[0].cum_regret, log.rows[0].inst_regret);
        assert_eq!(log.rows[0].simple_regret, 1.0);
        assert_eq!(log.rows[0].pending, 0);
    }

    #[test]
    fn regret_invariants_hold_for_every_rule() {
        let p = problem(40, 2);
        for rule in Rule::ALL {
            let log = run_single(&p, &spec(rule, DelayModel::Poisson { mean: 3.0 }, 6, 40), 5).unwrap();
            let mut best_any = f64::NEG_INFINITY;
            for w in log.rows.windows(2) {
                assert!(w[1].cum_regret >= w[0].cum_regret);
                if log.first_conversion.is_some_and(|fc| w[0].t >= fc) {
                    assert!(w[1].simple_regret <= w[0].simple_regret);
                }
            }
            for r in &log.rows {
                best_any = best_any.max(p.value(r.point_id));
                assert!(r.simple_regret >= 1.0 - best_any - 1e-15);
                assert!(r.pending <= 6);
                assert!(r.nu_t >= 1.0);
            }
        }
    }

    #[test]
    fn zero_delay_makes_sdf_and_ignore_identical() {
        let p = problem(50, 3);
        let a = run_single(&p, &spec(Rule::UcbSdf, DelayModel::FixedIterations { delay: 0 }, 1, 30), 9).unwrap();
        let b = run_single(&p, &spec(Rule::UcbIgnore, DelayModel::FixedIterations { delay: 0 }, 1, 30), 9).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn bad_spec_fails_at_iteration_zero() {
        let p = problem(10, 0);
        let mut s = spec(Rule::UcbSdf, DelayModel::Poisson { mean: 1.0 }, 2, 5);
        s.lambda = 0.0;
        let err = run_single(&p, &s, 0).unwrap_err();
        assert!(matches!(err.error, Error::RunAborted { iteration: 0, .. }));
        assert!(err.partial.is_empty());
    }

    #[test]
    fn streams_are_independent() {
        use rand::Rng;
        let a: u64 = stream_rng(1, Stream::Noise).random();
        let b: u64 = stream_rng(1, Stream::Delays).random();
        let c: u64 = stream_rng(1, Stream::Noise).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
