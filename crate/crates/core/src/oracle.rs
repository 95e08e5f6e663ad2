//! Brute-force references used by the test suites and the `verify` command.
//!
//! Nothing here touches the incremental posterior machinery: dense solves go
//! through `nalgebra`, Poisson probabilities are summed term by term, and the
//! coverage experiment only uses the public posterior API as the system under
//! test.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{grid_domain, Kernel, SqExpKernel};
use crate::ledger::{rho_m, sample_delay, DelayModel, Ledger, PendingEntry};
use crate::policy::{pending_width, select_ucb_sdf, WidthMode, WidthSchedule};
use crate::posterior::{default_lambda, PosteriorState};

fn dense_system<K: Kernel>(points: &[Vec<f64>], kernel: &K, lambda: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        kernel.eval(&points[i], &points[j]) + if i == j { lambda } else { 0.0 }
    })
}

/// Posterior `(mean, variance)` at `x` by a from-scratch LU solve.
pub fn dense_posterior<K: Kernel>(
    points: &[Vec<f64>],
    targets: &[f64],
    kernel: &K,
    lambda: f64,
    x: &[f64],
) -> Result<(f64, f64)> {
    if points.len() != targets.len() {
        return Err(Error::invalid("points and targets differ in length"));
    }
    if points.is_empty() {
        return Ok((0.0, kernel.eval(x, x)));
    }
    let a = dense_system(points, kernel, lambda);
    let kx = DVector::from_iterator(points.len(), points.iter().map(|p| kernel.eval(p, x)));
    let y = DVector::from_column_slice(targets);
    let lu = a.lu();
    let w = lu
        .solve(&kx)
        .ok_or_else(|| Error::numerical("singular system in dense posterior"))?;
    Ok((w.dot(&y), kernel.eval(x, x) - w.dot(&kx)))
}

/// Gaussian log marginal likelihood with a dense Cholesky.
pub fn dense_log_marginal_likelihood<K: Kernel>(
    points: &[Vec<f64>],
    targets: &[f64],
    kernel: &K,
    lambda: f64,
) -> Result<f64> {
    let n = points.len();
    let chol = dense_system(points, kernel, lambda)
        .cholesky()
        .ok_or_else(|| Error::numerical("kernel matrix not positive definite"))?;
    let y = DVector::from_column_slice(targets);
    let alpha = chol.solve(&y);
    let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
    Ok(-0.5 * y.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

fn poisson_log_pmf(mean: f64, k: u64, ln_fact: f64) -> f64 {
    -mean + k as f64 * mean.ln() - ln_fact
}

/// `sum_{k=0}^{m} e^{-mu} mu^k / k!`, terms summed smallest first.
pub fn poisson_cdf(mean: f64, m: u64) -> f64 {
    if mean <= 0.0 {
        return 1.0;
    }
    let mut terms = Vec::with_capacity(m as usize + 1);
    let mut ln_fact = 0.0;
    for k in 0..=m {
        if k > 0 {
            ln_fact += (k as f64).ln();
        }
        terms.push(poisson_log_pmf(mean, k, ln_fact).exp());
    }
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().min(1.0)
}

/// `1 - P(d > m)` with the upper tail summed until it is negligible.
pub fn poisson_cdf_via_tail(mean: f64, m: u64) -> f64 {
    if mean <= 0.0 {
        return 1.0;
    }
    let mut ln_fact: f64 = (1..=m).map(|k| (k as f64).ln()).sum();
    let mut tail = Vec::new();
    let mut k = m + 1;
    loop {
        ln_fact += (k as f64).ln();
        let term = poisson_log_pmf(mean, k, ln_fact).exp();
        tail.push(term);
        if k as f64 > mean && term < 1e-20 {
            break;
        }
        k += 1;
    }
    tail.sort_by(f64::total_cmp);
    1.0 - tail.iter().sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SublinearityVerdict {
    pub pass: bool,
    /// Mean of `R_t / t` over the second quarter of the horizon.
    pub second_quarter: f64,
    /// Mean of `R_t / t` over the final quarter.
    pub final_quarter: f64,
}

/// Empirical sub-linearity proxy for a cumulative regret series indexed from
/// `t = 1`: passes iff the average of `R_t / t` over the final quarter is below
/// its average over the second quarter.
pub fn sublinearity_check(cumulative: &[f64]) -> Result<SublinearityVerdict> {
    let n = cumulative.len();
    if n < 40 {
        return Err(Error::invalid("sub-linearity check needs at least 40 iterations"));
    }
    let ratio = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        range.map(|i| cumulative[i] / (i + 1) as f64).sum::<f64>() / len
    };
    let q = n / 4;
    let second_quarter = ratio(q..2 * q);
    let final_quarter = ratio(n - q..n);
    Ok(SublinearityVerdict {
        pass: final_quarter < second_quarter,
        second_quarter,
        final_quarter,
    })
}

/// Whether `|mu - rho f| > nu sigma`.
pub fn ellipsoid_violated(mean: f64, rho: f64, f: f64, nu: f64, std: f64) -> bool {
    (mean - rho * f).abs() > nu * std
}

/// Small instance for the confidence-ellipsoid coverage experiment.
#[derive(Clone, Debug)]
pub struct CoverageConfig {
    pub grid_size: usize,
    pub horizon: usize,
    pub delay: DelayModel,
    pub m: u64,
    pub delta: f64,
    pub lengthscale: f64,
    /// Noise standard deviation `R`.
    pub noise: f64,
    pub obs_bound: f64,
    pub rkhs_bound: f64,
    /// Multiplier on the generated function (`0` gives `f = 0`).
    pub f_scale: f64,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            grid_size: 30,
            horizon: 40,
            delay: DelayModel::Poisson { mean: 3.0 },
            m: 6,
            delta: 0.1,
            lengthscale: 0.2,
            noise: 0.1,
            obs_bound: 1.5,
            rkhs_bound: 1.0,
            f_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    pub trials: usize,
    pub checked: usize,
    pub violations: usize,
    /// `1 - violations / checked`.
    pub coverage: f64,
    /// Fraction of trials without a single violation.
    pub clean_trials: f64,
    pub rho: f64,
}

/// Runs independent GP-UCB-SDF trajectories with the theoretical width and
/// counts `(t, x)` pairs where the confidence ellipsoid misses `rho_m f(x)`.
pub fn coverage_test(config: &CoverageConfig, trials: usize) -> Result<CoverageReport> {
    config.delay.validate()?;
    let domain = Arc::new(grid_domain(0.0, 1.0, config.grid_size)?);
    let kernel = SqExpKernel::isotropic(1, config.lengthscale, 1.0)?;
    let lambda = default_lambda(config.horizon);
    let rho = rho_m(&config.delay, config.m as f64);
    let width = WidthSchedule {
        mode: WidthMode::Theoretical,
        constant: 1.0,
        rkhs_bound: config.rkhs_bound * config.f_scale.abs(),
        obs_bound: config.obs_bound,
        noise_scale: config.noise,
        delta: config.delta,
    };
    let ids: Vec<usize> = (0..domain.len()).collect();
    let mut checked = 0;
    let mut violations = 0;
    let mut clean = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(trial as u64));
        let f = rkhs_function(&kernel, &domain, config.rkhs_bound * config.f_scale, &mut rng);
        let mut state = PosteriorState::new(domain.clone(), kernel.clone(), lambda)?;
        state.track_candidates(&ids);
        let mut ledger = Ledger::iterations(config.m)?;
        let mut trial_violations = 0;
        for t in 1..=config.horizon {
            for r in ledger.advance(t as u64 - 1) {
                state.set_target(r.slot, r.observation)?;
            }
            let pw = pending_width(&state, &ledger.pending_slots(), config.obs_bound);
            let nu = width.nu(state.realized_info_gain(), pw);
            for (q, &fx) in state.posterior_over(&ids).iter().zip(&f) {
                checked += 1;
                if ellipsoid_violated(q.mean, rho, fx, nu, q.std) {
                    trial_violations += 1;
                }
            }
            let x = select_ucb_sdf(&state, &ids, nu)?;
            let slot = state.append_query(x)?;
            let e: f64 = rng.sample(StandardNormal);
            let y = (f[x] + config.noise * e).clamp(-config.obs_bound, config.obs_bound);
            let d = sample_delay(&config.delay, x, &mut rng);
            ledger.enqueue(PendingEntry {
                slot,
                point: x,
                issued: t as f64,
                delay: d,
                observation: y,
            })?;
        }
        violations += trial_violations;
        if trial_violations == 0 {
            clean += 1;
        }
    }
    Ok(CoverageReport {
        trials,
        checked,
        violations,
        coverage: if checked == 0 {
            1.0
        } else {
            1.0 - violations as f64 / checked as f64
        },
        clean_trials: if trials == 0 {
            1.0
        } else {
            clean as f64 / trials as f64
        },
        rho,
    })
}

/// Nonnegative member of the RKHS with norm exactly `norm`: a positive
/// combination of three kernel sections.
fn rkhs_function<R: Rng>(kernel: &SqExpKernel, domain: &crate::kernel::Domain, norm: f64, rng: &mut R) -> Vec<f64> {
    let centers: Vec<usize> = (0..3).map(|_| rng.random_range(0..domain.len())).collect();
    let coef: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
    let mut sq = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            sq += coef[i] * coef[j] * kernel.eval(domain.point(centers[i]), domain.point(centers[j]));
        }
    }
    let scale = if sq > 0.0 { norm / sq.sqrt() } else { 0.0 };
    domain
        .points()
        .map(|x| {
            scale
                * centers
                    .iter()
                    .zip(&coef)
                    .map(|(&c, a)| a * kernel.eval(domain.point(c), x))
                    .sum::<f64>()
        })
        .collect()
}
