//! Pending-query bookkeeping under stochastic delays.
//!
//! A query issued at `s` with delay `d_s` contributes its raw observation at
//! clock `c` iff `d_s <= min(m, c - s)`. Entries that can no longer satisfy the
//! indicator (age `>= m` and still unrevealed) are evicted as permanently
//! censored, oldest first. The same rules apply with real-valued clocks in
//! time mode.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use statrs::distribution::{DiscreteCDF, Poisson as PoissonCdf};

use crate::error::{Error, Result};
use crate::table;

#[derive(Clone, Debug, PartialEq)]
pub enum DelayModel {
    /// Integer delays from a Poisson distribution with the given mean.
    Poisson { mean: f64 },
    /// Every delay equals `delay` iterations.
    FixedIterations { delay: u64 },
    /// Poisson delays whose mean depends on the queried point id.
    InputDependent { means: Vec<f64> },
    /// Real-valued delays for time mode.
    ContinuousExponential { rate: f64 },
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            DelayModel::Poisson { mean } => mean.is_finite() && *mean >= 0.0,
            DelayModel::FixedIterations { .. } => true,
            DelayModel::InputDependent { means } => {
                !means.is_empty() && means.iter().all(|m| m.is_finite() && *m >= 0.0)
            }
            DelayModel::ContinuousExponential { rate } => rate.is_finite() && *rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid delay model {self:?}")))
        }
    }

    /// Whether delays count iterations (integers) rather than time.
    pub fn is_iteration_based(&self) -> bool {
        !matches!(self, DelayModel::ContinuousExponential { .. })
    }

    /// Mean delay, used for the `m = 2 * mean` default.
    pub fn mean(&self) -> f64 {
        match self {
            DelayModel::Poisson { mean } => *mean,
            DelayModel::FixedIterations { delay } => *delay as f64,
            DelayModel::InputDependent { means } => means.iter().sum::<f64>() / means.len() as f64,
            DelayModel::ContinuousExponential { rate } => 1.0 / rate,
        }
    }
}

/// Parses per-point Poisson means: header `point_id,mean`, then one row for
/// every id `0..n` in any order.
pub fn parse_delay_table(text: &str) -> Result<Vec<f64>> {
    let mut rows = table::records(text);
    let (hline, header) = rows
        .next()
        .ok_or_else(|| Error::parse(1, "empty file: expected a header row"))?;
    if header.len() != 2 {
        return Err(Error::parse(hline, "header must be point_id,mean"));
    }
    let mut entries: Vec<Option<(f64, usize)>> = Vec::new();
    for (line, fields) in rows {
        if fields.len() != 2 {
            return Err(Error::parse(line, format!("expected 2 fields, found {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(line, format!("'{}' is not a point id", fields[0])))?;
        let mean = table::parse_f64(line, fields[1])?;
        if mean < 0.0 {
            return Err(Error::parse(line, "delay mean must be nonnegative"));
        }
        if id > 10_000_000 {
            return Err(Error::parse(line, "point id too large"));
        }
        if id >= entries.len() {
            entries.resize(id + 1, None);
        }
        if let Some((_, prev)) = entries[id].replace((mean, line)) {
            return Err(Error::parse(line, format!("point {id} repeated (first seen on line {prev})")));
        }
    }
    if entries.is_empty() {
        return Err(Error::parse(hline, "no data rows"));
    }
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| e.map(|(m, _)| m).ok_or_else(|| Error::parse(hline, format!("no mean for point {i}"))))
        .collect()
}

fn poisson_draw<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("validated mean").sample(rng)
}

/// Draws the delay for a query at domain point `point`.
pub fn sample_delay<R: Rng + ?Sized>(model: &DelayModel, point: usize, rng: &mut R) -> f64 {
    match model {
        DelayModel::Poisson { mean } => poisson_draw(*mean, rng),
        DelayModel::FixedIterations { delay } => *delay as f64,
        DelayModel::InputDependent { means } => poisson_draw(means[point % means.len()], rng),
        DelayModel::ContinuousExponential { rate } => Exp::new(*rate).expect("validated rate").sample(rng),
    }
}

fn poisson_cdf(mean: f64, m: f64) -> f64 {
    if m < 0.0 {
        return 0.0;
    }
    if mean <= 0.0 {
        return 1.0;
    }
    if m.is_infinite() {
        return 1.0;
    }
    PoissonCdf::new(mean).expect("validated mean").cdf(m.floor() as u64)
}

/// `P(d <= m)`; the minimum over points for input-dependent delays.
pub fn rho_m(model: &DelayModel, m: f64) -> f64 {
    match model {
        DelayModel::Poisson { mean } => poisson_cdf(*mean, m),
        DelayModel::FixedIterations { delay } => {
            if (*delay as f64) <= m {
                1.0
            } else {
                0.0
            }
        }
        DelayModel::InputDependent { means } => means
            .iter()
            .map(|&mu| poisson_cdf(mu, m))
            .fold(1.0, f64::min),
        DelayModel::ContinuousExponential { rate } => {
            if m < 0.0 {
                0.0
            } else {
                1.0 - (-rate * m).exp()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    Iterations,
    Time,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendingEntry {
    /// Posterior slot holding this query's (censored) target.
    pub slot: usize,
    pub point: usize,
    /// Issue iteration (iteration mode) or start time (time mode).
    pub issued: f64,
    pub delay: f64,
    /// Held back until the entry is revealed.
    pub observation: f64,
}

impl PendingEntry {
    /// The censoring indicator `1{d <= min(m, clock - issued)}`.
    pub fn observable_at(&self, clock: f64, window: f64) -> bool {
        self.delay <= window.min(clock - self.issued)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reveal {
    pub slot: usize,
    pub point: usize,
    pub observation: f64,
}

#[derive(Clone, Debug)]
pub struct Ledger {
    mode: ClockMode,
    window: f64,
    pending: VecDeque<PendingEntry>,
    issued: usize,
    revealed: usize,
    censored_forever: usize,
    clock: f64,
}

impl Ledger {
    /// Iteration-mode ledger with capacity `m`.
    pub fn iterations(m: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("ledger capacity m must be at least 1"));
        }
        Ok(Self::with_mode(ClockMode::Iterations, m as f64))
    }

    /// Time-mode ledger waiting at most `m` time units per query.
    pub fn time(m: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::invalid("time budget m must be positive"));
        }
        Ok(Self::with_mode(ClockMode::Time, m))
    }

    fn with_mode(mode: ClockMode, window: f64) -> Self {
        Self {
            mode,
            window,
            pending: VecDeque::new(),
            issued: 0,
            revealed: 0,
            censored_forever: 0,
            clock: f64::NEG_INFINITY,
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn pending(&self) -> impl ExactSizeIterator<Item = &PendingEntry> {
        self.pending.iter()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_slots(&self) -> Vec<usize> {
        self.pending.iter().map(|e| e.slot).collect()
    }

    pub fn issued(&self) -> usize {
        self.issued
    }

    pub fn revealed(&self) -> usize {
        self.revealed
    }

    pub fn censored_forever(&self) -> usize {
        self.censored_forever
    }

    /// Records a newly issued query.
    pub fn enqueue(&mut self, entry: PendingEntry) -> Result<()> {
        if !(entry.delay >= 0.0) || !entry.delay.is_finite() {
            return Err(Error::invalid("delay must be a nonnegative finite number"));
        }
        if self.mode == ClockMode::Iterations && entry.delay.fract() != 0.0 {
            return Err(Error::invalid("iteration-mode delays must be integers"));
        }
        self.issued += 1;
        self.pending.push_back(entry);
        Ok(())
    }

    /// Reveals every entry whose indicator holds at iteration `current`, then
    /// evicts entries that can no longer be revealed. Afterwards at most `m`
    /// entries remain pending in iteration mode.
    pub fn advance(&mut self, current: u64) -> Vec<Reveal> {
        debug_assert_eq!(self.mode, ClockMode::Iterations);
        self.step(current as f64)
    }

    /// Time-mode counterpart of [`Ledger::advance`].
    pub fn advance_time(&mut self, now: f64) -> Vec<Reveal> {
        debug_assert_eq!(self.mode, ClockMode::Time);
        self.step(now)
    }

    fn step(&mut self, clock: f64) -> Vec<Reveal> {
        debug_assert!(clock >= self.clock, "ledger clock moved backwards");
        self.clock = clock;
        let window = self.window;
        let mut reveals = Vec::new();
        let mut kept = VecDeque::with_capacity(self.pending.len());
        for e in self.pending.drain(..) {
            if e.observable_at(clock, window) {
                reveals.push(Reveal {
                    slot: e.slot,
                    point: e.point,
                    observation: e.observation,
                });
            } else if clock - e.issued >= window {
                self.censored_forever += 1;
            } else {
                kept.push_back(e);
            }
        }
        if self.mode == ClockMode::Iterations {
            // more than one issue per tick can overfill the buffer
            while kept.len() > window as usize {
                kept.pop_front();
                self.censored_forever += 1;
            }
        }
        self.pending = kept;
        self.revealed += reveals.len();
        reveals
    }
}
