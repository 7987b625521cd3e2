//! Two-point heat statistics and the fluctuation-relation checks.
//!
//! Sign convention: `Q = E^(0)_n - E^(0)_m` is the heat ABSORBED by the
//! system when it starts in `m` and is found in `n` at time `tau`. Heat is
//! always measured with the bare energies.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{gibbs_populations, ModelSpec};
use crate::propagator::{evolve_populations, StochasticMatrix};

pub use crate::report::{CheckRecord, SkippedItem, VerificationReport};

/// Header line documenting the sign convention in every emitted table.
pub const SIGN_CONVENTION: &str = "Q = E0[final] - E0[initial] is heat absorbed by the system from the bath";

/// Default log-residual tolerance of the FR and detailed-balance checks.
pub const DEFAULT_LOG_TOL: f64 = 1e-9;
/// Slack allowed on the tail bound and the mean-heat sign.
pub const BOUND_SLACK: f64 = 1e-12;
/// Tolerance of the first-law residual.
pub const FIRST_LAW_TOL: f64 = 1e-12;

const UNDERFLOW_FLOOR: f64 = 1e-300;

/// Distinct heat values with the ordered state pairs producing each.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatSupport {
    values: Vec<f64>,
    pairs: Vec<Vec<(usize, usize)>>,
    tol: f64,
    dim: usize,
    /// `bins[m * dim + n]` is the bin of the pair `m -> n`.
    bins: Vec<usize>,
}

impl HeatSupport {
    /// Ascending heat values, symmetric about zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Pairs `(m, n)` (start, end) contributing to bin `i`.
    pub fn pairs(&self, i: usize) -> &[(usize, usize)] {
        &self.pairs[i]
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_index(&self) -> usize {
        self.values.len() / 2
    }

    /// Index of `-Q` given the index of `Q`.
    pub fn mirror(&self, i: usize) -> usize {
        self.values.len() - 1 - i
    }

    /// Bin of the transition `from -> to`.
    pub fn bin_of(&self, from: usize, to: usize) -> usize {
        self.bins[from * self.dim + to]
    }

    /// Bin whose value lies within `tol` of `q`.
    pub fn index_of(&self, q: f64) -> Option<usize> {
        self.values.iter().position(|v| (v - q).abs() <= self.tol)
    }
}

pub fn default_support_tol(spec: &ModelSpec) -> f64 {
    let span = spec.energy_span();
    if span > 0.0 {
        1e-9 * span
    } else {
        1e-12
    }
}

/// Bins all `D^2` energy gaps. Gaps closer than `tol` (single linkage) share
/// a bin whose value is the mean of its members; positive bins are mirrored
/// to negative ones so the support is exactly symmetric.
pub fn heat_support(spec: &ModelSpec, tol: Option<f64>) -> Result<HeatSupport> {
    let tol = tol.unwrap_or_else(|| default_support_tol(spec));
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParameter { name: "tol", reason: format!("must be > 0, got {tol}") });
    }
    let e = spec.bare_energies();
    let d = e.len();
    let mut gaps: Vec<(f64, usize, usize)> = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for m in 0..d {
        for n in m + 1..d {
            gaps.push((e[n] - e[m], m, n));
        }
    }
    gaps.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut zero_pairs: Vec<(usize, usize)> = (0..d).map(|m| (m, m)).collect();
    let mut clusters: Vec<Vec<(f64, usize, usize)>> = Vec::new();
    let mut last = 0.0;
    for &(g, m, n) in &gaps {
        let step = g - last;
        if step > tol && step <= 10.0 * tol {
            return Err(Error::AmbiguousBinning(format!(
                "gaps {last} and {g} differ by {step:e}, between tol={tol:e} and 10*tol"
            )));
        }
        if step <= tol {
            match clusters.last_mut() {
                Some(c) => c.push((g, m, n)),
                None => {
                    zero_pairs.push((m, n));
                    zero_pairs.push((n, m));
                }
            }
        } else {
            clusters.push(vec![(g, m, n)]);
        }
        last = g;
    }
    zero_pairs.sort_unstable();

    let positive: Vec<(f64, Vec<(usize, usize)>)> = clusters
        .into_iter()
        .map(|c| {
            let mean = c.iter().map(|x| x.0).sum::<f64>() / c.len() as f64;
            let mut pairs: Vec<(usize, usize)> = c.iter().map(|x| (x.1, x.2)).collect();
            pairs.sort_unstable();
            (mean, pairs)
        })
        .collect();

    let mut values = Vec::with_capacity(2 * positive.len() + 1);
    let mut pairs = Vec::with_capacity(2 * positive.len() + 1);
    for (v, p) in positive.iter().rev() {
        values.push(-v);
        pairs.push(p.iter().map(|&(m, n)| (n, m)).collect());
    }
    values.push(0.0);
    pairs.push(zero_pairs);
    for (v, p) in positive {
        values.push(v);
        pairs.push(p);
    }

    let mut bins = vec![0; d * d];
    for (i, bin) in pairs.iter().enumerate() {
        for &(m, n) in bin {
            bins[m * d + n] = i;
        }
    }
    Ok(HeatSupport { values, pairs, tol, dim: d, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `P(+Q)`: probability that the system absorbs `Q`.
    Absorb,
    /// `P(-Q)`: probability that the system releases `Q`.
    Release,
}

/// Probability mass over a [`HeatSupport`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeatDistribution {
    pub support: HeatSupport,
    pub mass: Vec<f64>,
    pub tau: f64,
    pub direction: Direction,
}

impl HeatDistribution {
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `sum_Q Q mass(Q)`.
    pub fn mean(&self) -> f64 {
        self.support.values().iter().zip(&self.mass).map(|(q, p)| q * p).sum()
    }

    pub fn mass_at(&self, q: f64) -> Option<f64> {
        self.support.index_of(q).map(|i| self.mass[i])
    }
}

fn check_dims(spec: &ModelSpec, p: &StochasticMatrix, support: &HeatSupport) -> Result<()> {
    let d = spec.dimension();
    for actual in [p.dimension(), support.dim] {
        if actual != d {
            return Err(Error::DimensionMismatch { expected: d, actual });
        }
    }
    Ok(())
}

/// `P(+Q, tau) = sum_{(m,n) in pairs(Q)} p_m p(n, tau | m, 0)`, `p_m` thermal at `beta_S`.
pub fn forward_distribution(spec: &ModelSpec, p: &StochasticMatrix, support: &HeatSupport) -> Result<HeatDistribution> {
    check_dims(spec, p, support)?;
    let init = gibbs_populations(spec.bare_energies(), spec.beta_s());
    let w = init.probs();
    let mass = (0..support.len())
        .map(|i| support.pairs(i).iter().map(|&(m, n)| w[m] * p.prob(n, m)).sum())
        .collect();
    Ok(HeatDistribution { support: support.clone(), mass, tau: p.tau(), direction: Direction::Absorb })
}

/// `P(-Q, tau) = sum_{(m,n) in pairs(Q)} p_n p(m, tau | n, 0)`.
pub fn reverse_distribution(spec: &ModelSpec, p: &StochasticMatrix, support: &HeatSupport) -> Result<HeatDistribution> {
    check_dims(spec, p, support)?;
    let init = gibbs_populations(spec.bare_energies(), spec.beta_s());
    let w = init.probs();
    let mass = (0..support.len())
        .map(|i| support.pairs(i).iter().map(|&(m, n)| w[n] * p.prob(m, n)).sum())
        .collect();
    Ok(HeatDistribution { support: support.clone(), mass, tau: p.tau(), direction: Direction::Release })
}

fn log_pair(report: &mut VerificationReport, label: String, lhs: f64, rhs: f64, expected: f64) {
    if lhs == 0.0 || rhs == 0.0 {
        report.skip(label, format!("zero mass: {lhs:e} vs {rhs:e}"));
    } else if lhs < UNDERFLOW_FLOOR || rhs < UNDERFLOW_FLOOR || !lhs.is_finite() || !rhs.is_finite() {
        report.skip(label, format!("degenerate comparison: {lhs:e} vs {rhs:e}"));
    } else {
        let measured = lhs.ln() - rhs.ln();
        report.record(label, measured, expected, measured - expected);
    }
}

/// Fluctuation relation, pairwise and aggregated:
/// `log[p_m P_nm] - log[p_n P_mn] = Q dbeta` for every ordered pair, and
/// `log P(+Q) - log P(-Q) = Q dbeta` for every nonzero support point.
pub fn fr_check(spec: &ModelSpec, p: &StochasticMatrix, support: &HeatSupport, tol: f64) -> Result<VerificationReport> {
    let forward = forward_distribution(spec, p, support)?;
    let e = spec.bare_energies();
    let dbeta = spec.delta_beta();
    let init = gibbs_populations(e, spec.beta_s());
    let w = init.probs();
    let d = spec.dimension();
    let mut report = VerificationReport::new("fr", Some(p.tau()), tol);
    for m in 0..d {
        for n in 0..d {
            if m == n {
                continue;
            }
            let q = e[n] - e[m];
            log_pair(&mut report, format!("pair ({m},{n})"), w[m] * p.prob(n, m), w[n] * p.prob(m, n), q * dbeta);
        }
    }
    for (i, &q) in support.values().iter().enumerate() {
        if i == support.zero_index() {
            continue;
        }
        let j = support.mirror(i);
        log_pair(&mut report, format!("Q={q:.17e}"), forward.mass[i], forward.mass[j], q * dbeta);
    }
    Ok(report)
}

/// `log P_nm - log P_mn + beta_B (E_n - E_m) = 0` for all `m != n`.
pub fn detailed_balance_check(p: &StochasticMatrix, spec: &ModelSpec, tol: f64) -> Result<VerificationReport> {
    let d = spec.dimension();
    if p.dimension() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: p.dimension() });
    }
    let e = spec.bare_energies();
    let beta = spec.beta_b();
    let mut report = VerificationReport::new("db", Some(p.tau()), tol);
    for m in 0..d {
        for n in 0..d {
            if m != n {
                log_pair(&mut report, format!("({n},{m})"), p.prob(n, m), p.prob(m, n), -beta * (e[n] - e[m]));
            }
        }
    }
    Ok(report)
}

/// Cumulative tail `sum_{Q <= q} P(Q) <= exp(q dbeta)` for `q <= 0`, valid
/// for a system no hotter than the bath (`dbeta >= 0`). Without a grid, every
/// support point `<= 0` is tested.
pub fn tail_bound_check(forward: &HeatDistribution, spec: &ModelSpec, q_grid: Option<&[f64]>) -> Result<VerificationReport> {
    let dbeta = spec.delta_beta();
    if dbeta < 0.0 {
        return Err(Error::InapplicableRegime("requires beta_S >= beta_B".into()));
    }
    let support = &forward.support;
    let default_grid: Vec<f64>;
    let grid = match q_grid {
        Some(g) => g,
        None => {
            default_grid = support.values()[..=support.zero_index()].to_vec();
            &default_grid
        }
    };
    if let Some(q) = grid.iter().find(|q| q.is_nan() || **q > 0.0) {
        return Err(Error::InvalidParameter { name: "q_grid", reason: format!("q must be <= 0, got {q}") });
    }
    let mut report = VerificationReport::new("tail", Some(forward.tau), BOUND_SLACK);
    for &q in grid {
        let cumulative: f64 = support
            .values()
            .iter()
            .zip(&forward.mass)
            .take_while(|(v, _)| **v <= q + support.tol())
            .map(|(_, p)| p)
            .sum();
        let bound = (q * dbeta).exp();
        let excess = cumulative - bound;
        report.record_with(format!("q={q:.17e}"), cumulative, bound, excess, BOUND_SLACK, excess <= BOUND_SLACK);
    }
    Ok(report)
}

/// Mean heat against the independently computed change of the mean bare
/// energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstLaw {
    pub mean_heat: f64,
    pub energy_change: f64,
    pub residual: f64,
}

pub fn mean_heat(forward: &HeatDistribution) -> f64 {
    forward.mean()
}

/// `<Q>` compared with `Tr[H0 rho(tau)] - Tr[H0 rho(0)]`, the latter from
/// evolving the initial thermal populations.
pub fn first_law(forward: &HeatDistribution, spec: &ModelSpec, p: &StochasticMatrix) -> Result<FirstLaw> {
    let e = spec.bare_energies();
    let v0 = gibbs_populations(e, spec.beta_s());
    let vt = evolve_populations(p, &v0)?;
    let energy_change = vt.mean_energy(e) - v0.mean_energy(e);
    let mean_heat = forward.mean();
    Ok(FirstLaw { mean_heat, energy_change, residual: mean_heat - energy_change })
}

/// First-law residual within [`FIRST_LAW_TOL`], plus `<Q> >= -1e-12` when
/// `dbeta >= 0`.
pub fn first_law_check(forward: &HeatDistribution, spec: &ModelSpec, p: &StochasticMatrix) -> Result<VerificationReport> {
    let fl = first_law(forward, spec, p)?;
    let mut report = VerificationReport::new("firstlaw", Some(p.tau()), FIRST_LAW_TOL);
    report.record("energy balance", fl.mean_heat, fl.energy_change, fl.residual);
    if spec.delta_beta() >= 0.0 {
        report.record_with("mean heat sign", fl.mean_heat, 0.0, fl.mean_heat.min(0.0), BOUND_SLACK, fl.mean_heat >= -BOUND_SLACK);
    }
    Ok(report)
}
