//! Monte Carlo cross-check: the population dynamics sampled as a
//! continuous-time Markov jump process (Gillespie).
//!
//! Every trajectory owns a ChaCha8 stream keyed by `(master_seed, domain,
//! stream, index)`, so counts do not depend on scheduling or thread count.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::RateMatrix;
use crate::heat::{Direction, HeatDistribution, HeatSupport};
use crate::model::{gibbs_populations, ModelSpec};
use crate::propagator::StochasticMatrix;
use crate::report::VerificationReport;

/// Gate on the largest `|z|`.
pub const MAX_Z: f64 = 5.0;
/// Gate on the fraction of entries with `|z| > 3`.
pub const MAX_FRACTION_BEYOND_3SIGMA: f64 = 0.01;
/// Smallest accepted `n_traj`.
pub const MIN_TRAJECTORIES: u64 = 1_000;

const DOMAIN_CONDITIONAL: u64 = 0x636f_6e64;
const DOMAIN_HEAT: u64 = 0x6865_6174;

/// Deterministic per-trajectory generator.
pub fn trajectory_rng(master_seed: u64, domain: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&stream.to_le_bytes());
    key[24..].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Escape rates and cumulative jump tables of a [`RateMatrix`].
#[derive(Debug, Clone)]
pub struct JumpChain {
    escape: Vec<f64>,
    /// `targets[m]` lists `(n, cumulative rate)` for every `n != m` with a positive rate.
    targets: Vec<Vec<(usize, f64)>>,
}

impl JumpChain {
    pub fn new(rates: &RateMatrix) -> Self {
        let d = rates.dimension();
        let mut escape = Vec::with_capacity(d);
        let mut targets = Vec::with_capacity(d);
        for m in 0..d {
            let mut acc = 0.0;
            let mut row = Vec::new();
            for n in 0..d {
                let r = rates.rate(n, m);
                if n != m && r > 0.0 {
                    acc += r;
                    row.push((n, acc));
                }
            }
            escape.push(acc);
            targets.push(row);
        }
        JumpChain { escape, targets }
    }

    pub fn dimension(&self) -> usize {
        self.escape.len()
    }

    /// State occupied at `tau` after starting in `m0`.
    pub fn sample_path<R: Rng + ?Sized>(&self, m0: usize, tau: f64, rng: &mut R) -> usize {
        let mut state = m0;
        let mut t = 0.0;
        loop {
            let rate = self.escape[state];
            if rate <= 0.0 {
                return state;
            }
            let wait: f64 = Exp1.sample(rng);
            t += wait / rate;
            if t >= tau {
                return state;
            }
            let u = rng.random::<f64>() * rate;
            let row = &self.targets[state];
            state = row.iter().find(|(_, c)| u < *c).unwrap_or(&row[row.len() - 1]).0;
        }
    }
}

/// One Gillespie path; builds the jump tables on every call, so prefer
/// [`JumpChain::sample_path`] in loops.
pub fn sample_path<R: Rng + ?Sized>(rates: &RateMatrix, m0: usize, tau: f64, rng: &mut R) -> usize {
    JumpChain::new(rates).sample_path(m0, tau, rng)
}

/// Endpoint counts of `n_traj` paths launched from each state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub n_traj: u64,
    pub master_seed: u64,
    pub tau: f64,
    /// `counts[n][m]`: paths started in `m` that ended in `n`.
    pub counts: Vec<Vec<u64>>,
}

/// Empirical `p(n, tau | m, 0)` with binomial standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalConditional {
    pub batch: TrajectoryBatch,
    pub probs: DMatrix<f64>,
    pub std_err: DMatrix<f64>,
}

fn check_inputs(tau: f64, n_traj: u64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter { name: "tau", reason: format!("must be >= 0, got {tau}") });
    }
    if n_traj < MIN_TRAJECTORIES {
        return Err(Error::InvalidParameter {
            name: "n_traj",
            reason: format!("need at least {MIN_TRAJECTORIES}, got {n_traj}"),
        });
    }
    Ok(())
}

fn binomial_se(p: f64, n: f64) -> f64 {
    (p * (1.0 - p) / n).sqrt()
}

fn add_counts(mut a: Vec<u64>, b: Vec<u64>) -> Vec<u64> {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    a
}

/// Launches `n_traj` paths from every state. Runs on the current rayon pool.
pub fn empirical_conditional(rates: &RateMatrix, tau: f64, n_traj: u64, master_seed: u64) -> Result<EmpiricalConditional> {
    check_inputs(tau, n_traj)?;
    let chain = JumpChain::new(rates);
    let d = chain.dimension();
    let mut counts = vec![vec![0u64; d]; d];
    for m in 0..d {
        let ends = (0..n_traj)
            .into_par_iter()
            .fold(
                || vec![0u64; d],
                |mut acc, i| {
                    let mut rng = trajectory_rng(master_seed, DOMAIN_CONDITIONAL, m as u64, i);
                    acc[chain.sample_path(m, tau, &mut rng)] += 1;
                    acc
                },
            )
            .reduce(|| vec![0u64; d], add_counts);
        for (n, c) in ends.into_iter().enumerate() {
            counts[n][m] = c;
        }
    }
    let total = n_traj as f64;
    let probs = DMatrix::from_fn(d, d, |n, m| counts[n][m] as f64 / total);
    let std_err = probs.map(|p| binomial_se(p, total));
    Ok(EmpiricalConditional {
        batch: TrajectoryBatch { n_traj, master_seed, tau, counts },
        probs,
        std_err,
    })
}

/// Empirical heat distribution with per-bin counts and standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalHeat {
    pub distribution: HeatDistribution,
    pub counts: Vec<u64>,
    pub std_err: Vec<f64>,
    pub n_traj: u64,
    pub master_seed: u64,
}

fn sample_index(cumulative: &[f64], u: f64) -> usize {
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

/// Initial states drawn from the system's thermal populations; heat recorded
/// as `E0[final] - E0[initial]` (endpoint bookkeeping).
pub fn empirical_heat_distribution(
    spec: &ModelSpec,
    rates: &RateMatrix,
    support: &HeatSupport,
    tau: f64,
    n_traj: u64,
    master_seed: u64,
) -> Result<EmpiricalHeat> {
    check_inputs(tau, n_traj)?;
    let chain = JumpChain::new(rates);
    let d = chain.dimension();
    if spec.dimension() != d {
        return Err(Error::DimensionMismatch { expected: spec.dimension(), actual: d });
    }
    let init = gibbs_populations(spec.bare_energies(), spec.beta_s());
    let cumulative: Vec<f64> = init
        .probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let bins = support.len();
    let counts = (0..n_traj)
        .into_par_iter()
        .fold(
            || vec![0u64; bins],
            |mut acc, i| {
                let mut rng = trajectory_rng(master_seed, DOMAIN_HEAT, 0, i);
                let m = sample_index(&cumulative, rng.random::<f64>() * cumulative[d - 1]);
                let n = chain.sample_path(m, tau, &mut rng);
                acc[support.bin_of(m, n)] += 1;
                acc
            },
        )
        .reduce(|| vec![0u64; bins], add_counts);
    let total = n_traj as f64;
    let mass: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let std_err = mass.iter().map(|&p| binomial_se(p, total)).collect();
    Ok(EmpiricalHeat {
        distribution: HeatDistribution { support: support.clone(), mass, tau, direction: Direction::Absorb },
        counts,
        std_err,
        n_traj,
        master_seed,
    })
}

/// Per-entry z-scores of empirical frequencies against exact probabilities,
/// with `sigma = sqrt(p (1 - p) / N)` from the exact value. Passes if
/// `max |z| < 5` and under 1% of entries exceed `|z| = 3`.
pub fn oracle_compare(labels: &[String], exact: &[f64], empirical: &[f64], samples: &[u64]) -> Result<VerificationReport> {
    if exact.len() != empirical.len() || exact.len() != samples.len() || exact.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels, {} exact, {} empirical, {} sample sizes",
            labels.len(),
            exact.len(),
            empirical.len(),
            samples.len()
        )));
    }
    let mut report = VerificationReport::new("oracle", None, MAX_Z);
    let mut beyond3 = 0usize;
    for i in 0..exact.len() {
        let sigma = binomial_se(exact[i], samples[i] as f64);
        let diff = empirical[i] - exact[i];
        let z = if diff == 0.0 {
            0.0
        } else if sigma > 0.0 {
            diff / sigma
        } else {
            f64::INFINITY.copysign(diff)
        };
        if z.abs() > 3.0 {
            beyond3 += 1;
        }
        report.record_with(labels[i].clone(), empirical[i], exact[i], z, MAX_Z, z.abs() < MAX_Z);
    }
    let fraction = if exact.is_empty() { 0.0 } else { beyond3 as f64 / exact.len() as f64 };
    report.record_with(
        "fraction |z| > 3",
        fraction,
        0.0,
        fraction,
        MAX_FRACTION_BEYOND_3SIGMA,
        fraction < MAX_FRACTION_BEYOND_3SIGMA,
    );
    Ok(report)
}

/// Conditional probabilities against an exact propagator.
pub fn compare_conditional(exact: &StochasticMatrix, empirical: &EmpiricalConditional) -> Result<VerificationReport> {
    let d = exact.dimension();
    if empirical.probs.nrows() != d || empirical.probs.ncols() != d {
        return Err(Error::ShapeMismatch(format!("exact is {d}x{d}, empirical is {}x{}", empirical.probs.nrows(), empirical.probs.ncols())));
    }
    if exact.tau() != empirical.batch.tau {
        return Err(Error::ShapeMismatch(format!("tau {} vs {}", exact.tau(), empirical.batch.tau)));
    }
    let mut labels = Vec::with_capacity(d * d);
    let mut ex = Vec::with_capacity(d * d);
    let mut em = Vec::with_capacity(d * d);
    for m in 0..d {
        for n in 0..d {
            labels.push(format!("p({n}|{m})"));
            ex.push(exact.prob(n, m));
            em.push(empirical.probs[(n, m)]);
        }
    }
    let mut report = oracle_compare(&labels, &ex, &em, &vec![empirical.batch.n_traj; d * d])?;
    report.check = "oracle_conditional".into();
    report.tau = Some(exact.tau());
    Ok(report)
}

/// Heat masses against an exact forward distribution.
pub fn compare_heat(exact: &HeatDistribution, empirical: &EmpiricalHeat) -> Result<VerificationReport> {
    let emp = &empirical.distribution;
    if exact.support.values() != emp.support.values() {
        return Err(Error::ShapeMismatch("heat supports differ".into()));
    }
    if exact.tau != emp.tau {
        return Err(Error::ShapeMismatch(format!("tau {} vs {}", exact.tau, emp.tau)));
    }
    let labels: Vec<String> = exact.support.values().iter().map(|q| format!("Q={q:.17e}")).collect();
    let mut report = oracle_compare(&labels, &exact.mass, &emp.mass, &vec![empirical.n_traj; labels.len()])?;
    report.check = "oracle_heat".into();
    report.tau = Some(exact.tau);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::jump_rates;
    use crate::heat::heat_support;
    use crate::model::CouplingMatrix;

    fn two_level() -> ModelSpec {
        ModelSpec::new(vec![0.0, 1.0], None, 2.0, 1.0, CouplingMatrix::uniform(2, 1.0)).unwrap()
    }

    #[test]
    fn frozen_chain_never_moves() {
        let rates = RateMatrix::from_matrix(DMatrix::zeros(3, 3));
        let mut rng = trajectory_rng(1, 0, 0, 0);
        for m0 in 0..3 {
            assert_eq!(sample_path(&rates, m0, 100.0, &mut rng), m0);
        }
    }

    #[test]
    fn zero_time_never_moves() {
        let rates = jump_rates(&two_level());
        let chain = JumpChain::new(&rates);
        for i in 0..100 {
            let mut rng = trajectory_rng(7, 0, 0, i);
            assert_eq!(chain.sample_path(1, 0.0, &mut rng), 1);
        }
    }

    #[test]
    fn two_level_transition_fraction() {
        let rates = jump_rates(&two_level());
        let chain = JumpChain::new(&rates);
        let n = 100_000u64;
        let hits = (0..n)
            .filter(|&i| chain.sample_path(0, 1.0, &mut trajectory_rng(2024, 1, 0, i)) == 1)
            .count();
        let frac = hits as f64 / n as f64;
        let exact = 0.2407437;
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((frac - exact).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn counts_are_reproducible() {
        let rates = jump_rates(&two_level());
        let a = empirical_conditional(&rates, 0.7, 2_000, 99).unwrap();
        let b = empirical_conditional(&rates, 0.7, 2_000, 99).unwrap();
        assert_eq!(a.batch, b.batch);
        let c = empirical_conditional(&rates, 0.7, 2_000, 100).unwrap();
        assert_ne!(a.batch.counts, c.batch.counts);
        for m in 0..2 {
            assert_eq!(a.batch.counts[0][m] + a.batch.counts[1][m], 2_000);
        }
    }

    #[test]
    fn rejects_small_batches() {
        let rates = jump_rates(&two_level());
        assert!(empirical_conditional(&rates, 1.0, 10, 0).is_err());
    }

    #[test]
    fn zero_time_heat_is_zero() {
        let spec = two_level();
        let support = heat_support(&spec, None).unwrap();
        let emp = empirical_heat_distribution(&spec, &jump_rates(&spec), &support, 0.0, 5_000, 3).unwrap();
        assert_eq!(emp.counts, vec![0, 5_000, 0]);
    }

    #[test]
    fn self_comparison_has_zero_z() {
        let labels: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let p = [0.2, 0.5, 0.3];
        let report = oracle_compare(&labels, &p, &p, &[1000; 3]).unwrap();
        assert!(report.pass);
        assert!(report.records.iter().all(|r| r.residual == 0.0));
    }

    #[test]
    fn certain_outcome_mismatch_is_infinite_z() {
        let labels = vec!["a".to_string()];
        let report = oracle_compare(&labels, &[1.0], &[0.99], &[1000]).unwrap();
        assert!(!report.pass);
        assert!(report.records[0].residual.is_infinite());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let labels = vec!["a".to_string()];
        assert!(matches!(oracle_compare(&labels, &[0.5, 0.5], &[0.5], &[10]), Err(Error::ShapeMismatch(_))));
    }
}
