//! The population propagator `exp(-tau A)`, population and density-matrix
//! evolution, and the weighted-symmetry checks on powers of `A`.
//!
//! Two independent routes to the matrix exponential are provided:
//! [`Propagation`] goes through the symmetric eigendecomposition and is the
//! one used everywhere; [`taylor_exp`] is a scaled Taylor series with
//! repeated squaring that serves as a cross-check.

use nalgebra::{Complex, DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{decay_rates, Eigensystem, Generator};
use crate::model::{ModelSpec, PopulationVector};
use crate::report::VerificationReport;

/// Negative entries above this are round-off and get clamped to zero.
pub const CLAMP_THRESHOLD: f64 = 1e-12;
/// Column-sum deviation beyond which a propagator is rejected.
pub const COLUMN_SUM_LIMIT: f64 = 1e-8;
/// Default evaluation times in units of `1 / ||A||_inf`.
pub const DEFAULT_TAU_GRID: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];
/// Number of Taylor terms used by [`taylor_exp`].
pub const TAYLOR_TERMS: usize = 40;

const UNDERFLOW_FLOOR: f64 = 1e-300;

/// `P(tau) = exp(-tau A)` with `P[(n, m)] = p(n, tau | m, 0)`; columns sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    entries: DMatrix<f64>,
    tau: f64,
}

impl StochasticMatrix {
    /// Identity at `tau = 0`.
    pub fn identity(dim: usize) -> Self {
        StochasticMatrix { entries: DMatrix::identity(dim, dim), tau: 0.0 }
    }

    /// Wraps a matrix without clamping or checks.
    pub fn from_entries(entries: DMatrix<f64>, tau: f64) -> Self {
        StochasticMatrix { entries, tau }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dimension(&self) -> usize {
        self.entries.nrows()
    }

    /// `p(to, tau | from, 0)`.
    pub fn prob(&self, to: usize, from: usize) -> f64 {
        self.entries[(to, from)]
    }

    pub fn column_sum_residual(&self) -> f64 {
        self.entries.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.min()
    }
}

fn default_grid_scale(gen: &Generator) -> f64 {
    let norm = gen.norm_inf();
    if norm > 0.0 {
        1.0 / norm
    } else {
        1.0
    }
}

/// [`DEFAULT_TAU_GRID`] scaled by `1 / ||A||_inf`.
pub fn default_tau_grid(gen: &Generator) -> Vec<f64> {
    let scale = default_grid_scale(gen);
    DEFAULT_TAU_GRID.iter().map(|t| t * scale).collect()
}

/// Reusable eigendecomposition route to `exp(-tau A)`.
#[derive(Debug, Clone)]
pub struct Propagation {
    eig: Eigensystem,
}

impl Propagation {
    pub fn new(gen: &Generator, spec: &ModelSpec) -> Result<Self> {
        Ok(Propagation { eig: Eigensystem::new(gen, spec)? })
    }

    pub fn eigensystem(&self) -> &Eigensystem {
        &self.eig
    }

    /// `B^{-1} U exp(-tau Λ) U^T B`, clamped and checked for stochasticity.
    pub fn at(&self, tau: f64) -> Result<StochasticMatrix> {
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter { name: "tau", reason: format!("must be >= 0, got {tau}") });
        }
        let d = self.eig.values.len();
        if tau == 0.0 {
            return Ok(StochasticMatrix::identity(d));
        }
        let u = &self.eig.vectors;
        let b = &self.eig.weights;
        let decay: Vec<f64> = self.eig.values.iter().map(|l| (-tau * l).exp()).collect();
        // Explicit loops keep the inner product bitwise symmetric in (n, m).
        let mut s = DMatrix::zeros(d, d);
        for n in 0..d {
            for m in 0..=n {
                let v: f64 = (0..d).map(|k| u[(n, k)] * decay[k] * u[(m, k)]).sum();
                s[(n, m)] = v;
                s[(m, n)] = v;
            }
        }
        let mut p = DMatrix::from_fn(d, d, |n, m| s[(n, m)] * b[m] / b[n]);
        clamp_columns(&mut p)?;
        Ok(StochasticMatrix { entries: p, tau })
    }

    /// Propagators on a grid of times, evaluated in parallel, returned in grid order.
    pub fn on_grid(&self, taus: &[f64]) -> Result<Vec<StochasticMatrix>> {
        taus.par_iter().map(|&t| self.at(t)).collect()
    }
}

fn clamp_columns(p: &mut DMatrix<f64>) -> Result<()> {
    let d = p.nrows();
    for m in 0..d {
        let mut clamped = false;
        for n in 0..d {
            let x = p[(n, m)];
            if x < -CLAMP_THRESHOLD || !x.is_finite() {
                return Err(Error::NotStochastic(format!("entry ({n}, {m}) = {x:e}")));
            }
            if x < 0.0 {
                p[(n, m)] = 0.0;
                clamped = true;
            }
        }
        let sum: f64 = p.column(m).sum();
        if (sum - 1.0).abs() > COLUMN_SUM_LIMIT {
            return Err(Error::NotStochastic(format!("column {m} sums to {sum}")));
        }
        if clamped {
            p.column_mut(m).scale_mut(1.0 / sum);
        }
    }
    Ok(())
}

/// `exp(-tau A)` through the symmetric eigendecomposition.
pub fn propagator(gen: &Generator, spec: &ModelSpec, tau: f64) -> Result<StochasticMatrix> {
    Propagation::new(gen, spec)?.at(tau)
}

/// `exp(-tau M)` by a [`TAYLOR_TERMS`]-term Taylor series on `-tau M / 2^k`
/// with `||tau M / 2^k||_inf <= 1/2`, followed by `k` squarings.
pub fn taylor_exp(matrix: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let d = matrix.nrows();
    let x = matrix * (-tau);
    let norm = x.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scaled_norm = norm;
    while scaled_norm > 0.5 {
        scaled_norm /= 2.0;
        squarings += 1;
    }
    let x = x / 2f64.powi(squarings);
    let mut term = DMatrix::identity(d, d);
    let mut sum = DMatrix::identity(d, d);
    for j in 1..TAYLOR_TERMS {
        term = &term * &x / j as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// The Taylor-series propagator, unclamped.
pub fn taylor_propagator(gen: &Generator, tau: f64) -> StochasticMatrix {
    StochasticMatrix::from_entries(taylor_exp(gen.a_matrix(), tau), tau)
}

/// `v(tau) = P(tau) v(0)`.
pub fn evolve_populations(p: &StochasticMatrix, v0: &PopulationVector) -> Result<PopulationVector> {
    let d = p.dimension();
    if v0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: v0.len() });
    }
    let v: Vec<f64> = (0..d)
        .map(|n| (0..d).map(|m| p.prob(n, m) * v0.probs()[m]).sum())
        .collect();
    Ok(PopulationVector::from_raw(v))
}

pub type Complex64 = Complex<f64>;

/// Hermitian, unit-trace, positive semidefinite `D x D` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(DMatrix<Complex64>);

impl DensityMatrix {
    pub const HERMITICITY_TOL: f64 = 1e-12;
    pub const TRACE_TOL: f64 = 1e-12;
    pub const EIGENVALUE_FLOOR: f64 = -1e-10;

    pub fn new(entries: DMatrix<Complex64>) -> Result<Self> {
        let rho = DensityMatrix(entries);
        rho.validate()?;
        Ok(rho)
    }

    /// Diagonal state with the given populations.
    pub fn diagonal(populations: &PopulationVector) -> Self {
        let d = populations.len();
        DensityMatrix(DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                Complex64::new(populations.probs()[i], 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.0;
        if !m.is_square() {
            return Err(Error::InvalidDensity(format!("not square: {}x{}", m.nrows(), m.ncols())));
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidDensity("non-finite entry".into()));
        }
        let herm = (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > Self::HERMITICITY_TOL {
            return Err(Error::InvalidDensity(format!("not Hermitian (residual {herm:e})")));
        }
        let trace = m.trace();
        if (trace.re - 1.0).abs() > Self::TRACE_TOL || trace.im.abs() > Self::TRACE_TOL {
            return Err(Error::InvalidDensity(format!("trace is {trace}")));
        }
        let hermitian_part = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
        let lowest = SymmetricEigen::new(hermitian_part).eigenvalues.min();
        if lowest < Self::EIGENVALUE_FLOOR {
            return Err(Error::InvalidDensity(format!("negative eigenvalue {lowest:e}")));
        }
        Ok(())
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.nrows()
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dimension()).map(|i| self.0[(i, i)].re).collect()
    }

    /// Largest modulus among off-diagonal entries.
    pub fn max_coherence(&self) -> f64 {
        let d = self.dimension();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    worst = worst.max(self.0[(i, j)].norm());
                }
            }
        }
        worst
    }
}

/// Populations evolve under `P(tau)`; each coherence evolves independently as
/// `rho_mn(tau) = exp(-(i omega_mn + gamma_mn) tau) rho_mn(0)`.
pub fn evolve_density(rho0: &DensityMatrix, spec: &ModelSpec, gen: &Generator, tau: f64) -> Result<DensityMatrix> {
    rho0.validate()?;
    let d = gen.dimension();
    if rho0.dimension() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: rho0.dimension() });
    }
    let p = propagator(gen, spec, tau)?;
    let table = decay_rates(gen.rate_matrix(), spec);
    let v0 = rho0.populations();
    let rho = &rho0.0;
    let out = DMatrix::from_fn(d, d, |m, n| {
        if m == n {
            let pop: f64 = (0..d).map(|k| p.prob(m, k) * v0[k]).sum();
            Complex64::new(pop, 0.0)
        } else {
            let phase = Complex64::new(-table.gamma[(m, n)] * tau, -table.omega[(m, n)] * tau);
            phase.exp() * rho[(m, n)]
        }
    });
    Ok(DensityMatrix(out))
}

/// Weighted symmetry of generator powers: `M^(s)_nm = (A^s)_nm exp(beta_B (E_n - E_m) / 2)`
/// must be symmetric for every `s <= s_max` (relative tolerance 1e-10).
///
/// When `tau` is given, also checks `P_nm / P_mn = exp(-beta_B (E_n - E_m))`
/// on the Taylor-series propagator (log residual tolerance 1e-9).
pub fn power_symmetry_check(gen: &Generator, spec: &ModelSpec, s_max: usize, tau: Option<f64>) -> VerificationReport {
    const POWER_TOL: f64 = 1e-10;
    const RATIO_TOL: f64 = 1e-9;
    let d = gen.dimension();
    let e = spec.bare_energies();
    let beta = spec.beta_b();
    let a = gen.a_matrix();
    let mut report = VerificationReport::new("power_symmetry", tau, POWER_TOL);

    let mut power = DMatrix::identity(d, d);
    for s in 1..=s_max {
        power = &power * a;
        let weighted = DMatrix::from_fn(d, d, |n, m| power[(n, m)] * (beta * (e[n] - e[m]) / 2.0).exp());
        let scale = weighted.abs().max();
        let asym = (&weighted - weighted.transpose()).abs().max();
        let rel = if scale > 0.0 { asym / scale } else { 0.0 };
        report.record_with(format!("s={s}"), asym, 0.0, rel, POWER_TOL, rel < POWER_TOL);
    }

    if let Some(tau) = tau {
        let p = taylor_exp(a, tau);
        for n in 0..d {
            for m in 0..d {
                if m == n {
                    continue;
                }
                let (fwd, bwd) = (p[(n, m)], p[(m, n)]);
                let label = format!("taylor ({n},{m})");
                if fwd < UNDERFLOW_FLOOR || bwd < UNDERFLOW_FLOOR {
                    report.skip(label, format!("entry below {UNDERFLOW_FLOOR:e}: {fwd:e}, {bwd:e}"));
                    continue;
                }
                let expected = -beta * (e[n] - e[m]);
                let measured = fwd.ln() - bwd.ln();
                let residual = measured - expected;
                report.record_with(label, measured, expected, residual, RATIO_TOL, residual.abs() < RATIO_TOL);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::generator_for;
    use crate::model::{gibbs_populations, random_model, CouplingMatrix, RandomModelOptions};

    fn two_level() -> ModelSpec {
        ModelSpec::new(vec![0.0, 1.0], None, 2.0, 1.0, CouplingMatrix::uniform(2, 1.0)).unwrap()
    }

    /// `P = Π + exp(-λ τ)(I - Π)` with `Π_nm = π_n`.
    fn two_level_closed_form(tau: f64) -> DMatrix<f64> {
        let pi = [1.0 / (1.0 + (-1.0f64).exp()), (-1.0f64).exp() / (1.0 + (-1.0f64).exp())];
        let lambda = 2.0 * 0.5f64.cosh();
        // 1 - exp(-λτ) without cancellation at small τ
        let relaxed = -(-lambda * tau).exp_m1();
        DMatrix::from_fn(2, 2, |n, m| if n == m { 1.0 - (1.0 - pi[n]) * relaxed } else { pi[n] * relaxed })
    }

    #[test]
    fn identity_at_zero_time() {
        let spec = random_model(5, 1, &RandomModelOptions::default());
        let p = propagator(&generator_for(&spec), &spec, 0.0).unwrap();
        assert_eq!(p.entries(), &DMatrix::identity(5, 5));
    }

    #[test]
    fn two_level_closed_form_values() {
        let spec = two_level();
        let p = propagator(&generator_for(&spec), &spec, 1.0).unwrap();
        let exact = two_level_closed_form(1.0);
        assert!((p.entries() - &exact).abs().max() < 1e-14);
        assert!((p.prob(1, 0) - 0.2407437).abs() < 1e-7);
        assert!((p.prob(0, 1) - 0.6544092).abs() < 1e-7);
        assert!((p.prob(0, 0) - 0.7592563).abs() < 1e-7);
        assert!((p.prob(1, 1) - 0.3455908).abs() < 1e-7);
    }

    #[test]
    fn long_time_limit_is_bath_gibbs() {
        for seed in 0..10 {
            let spec = random_model(6, seed, &RandomModelOptions::default());
            let g = generator_for(&spec);
            let p = propagator(&g, &spec, 1e6 / g.norm_inf()).unwrap();
            let gibbs = gibbs_populations(spec.bare_energies(), spec.beta_b());
            for m in 0..6 {
                for n in 0..6 {
                    assert!((p.prob(n, m) - gibbs.probs()[n]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn rejects_negative_tau() {
        let spec = two_level();
        assert!(propagator(&generator_for(&spec), &spec, -1.0).is_err());
    }

    #[test]
    fn clamping_handles_round_off_and_rejects_real_negatives() {
        let mut p = DMatrix::from_row_slice(2, 2, &[1.0 + 5e-13, 0.3, -5e-13, 0.7]);
        clamp_columns(&mut p).unwrap();
        assert_eq!(p[(1, 0)], 0.0);
        assert!((p.column(0).sum() - 1.0).abs() < 1e-15);
        let mut bad = DMatrix::from_row_slice(2, 2, &[1.001, 0.3, -0.001, 0.7]);
        assert!(matches!(clamp_columns(&mut bad), Err(Error::NotStochastic(_))));
        let mut leaky = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, 0.0, 0.7]);
        assert!(matches!(clamp_columns(&mut leaky), Err(Error::NotStochastic(_))));
    }

    #[test]
    fn frozen_dynamics_without_coupling() {
        let g = crate::generator::build_generator(&crate::generator::RateMatrix::from_matrix(DMatrix::zeros(3, 3)));
        let p = taylor_exp(g.a_matrix(), 5.0);
        assert_eq!(p, DMatrix::identity(3, 3));
    }

    #[test]
    fn taylor_matches_closed_form() {
        let spec = two_level();
        let g = generator_for(&spec);
        for tau in [1e-8, 0.1, 1.0, 10.0] {
            let p = taylor_exp(g.a_matrix(), tau);
            let exact = two_level_closed_form(tau);
            for i in 0..2 {
                for j in 0..2 {
                    assert!(((p[(i, j)] - exact[(i, j)]) / exact[(i, j)]).abs() < 1e-12, "tau {tau}");
                }
            }
        }
    }

    #[test]
    fn stationary_populations_do_not_move() {
        let spec = random_model(5, 8, &RandomModelOptions::default());
        let g = generator_for(&spec);
        let gibbs = gibbs_populations(spec.bare_energies(), spec.beta_b());
        for tau in [0.0, 0.3, 2.0, 50.0] {
            let v = evolve_populations(&propagator(&g, &spec, tau).unwrap(), &gibbs).unwrap();
            for (a, b) in v.probs().iter().zip(gibbs.probs()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_level_population_from_ground_state() {
        let spec = two_level();
        let p = propagator(&generator_for(&spec), &spec, 1.0).unwrap();
        let v = evolve_populations(&p, &PopulationVector::basis(2, 0)).unwrap();
        assert!((v.probs()[0] - 0.7592563).abs() < 1e-7);
        assert!((v.probs()[1] - 0.2407437).abs() < 1e-7);
    }

    #[test]
    fn zero_time_population_is_exact() {
        let v0 = PopulationVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let v = evolve_populations(&StochasticMatrix::identity(3), &v0).unwrap();
        assert_eq!(v, v0);
        assert!(matches!(
            evolve_populations(&StochasticMatrix::identity(2), &v0),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    fn two_level_coherent(c: f64) -> DensityMatrix {
        DensityMatrix::new(DMatrix::from_row_slice(
            2,
            2,
            &[Complex64::new(0.6, 0.0), Complex64::new(c, 0.0), Complex64::new(c, 0.0), Complex64::new(0.4, 0.0)],
        ))
        .unwrap()
    }

    #[test]
    fn two_level_coherence_decay() {
        let spec = two_level();
        let g = generator_for(&spec);
        let rho = evolve_density(&two_level_coherent(0.3), &spec, &g, 1.0).unwrap();
        let modulus = rho.entries()[(0, 1)].norm();
        assert!((modulus - 0.3 * (-0.5f64.cosh()).exp()).abs() < 1e-15);
        assert!((modulus - 0.0971403).abs() < 1e-7);
        // omega_01 = -1: phase advances by +tau
        assert!((rho.entries()[(0, 1)].arg() - 1.0).abs() < 1e-14);
        rho.validate().unwrap();
    }

    #[test]
    fn diagonal_state_stays_diagonal() {
        let spec = random_model(4, 2, &RandomModelOptions::default());
        let g = generator_for(&spec);
        let rho0 = DensityMatrix::diagonal(&gibbs_populations(spec.bare_energies(), spec.beta_s()));
        for tau in [0.1, 1.0, 10.0] {
            let rho = evolve_density(&rho0, &spec, &g, tau).unwrap();
            assert_eq!(rho.max_coherence(), 0.0);
        }
    }

    #[test]
    fn zero_time_density_is_exact() {
        let spec = two_level();
        let rho0 = two_level_coherent(0.2);
        assert_eq!(evolve_density(&rho0, &spec, &generator_for(&spec), 0.0).unwrap(), rho0);
    }

    #[test]
    fn invalid_density_rejected() {
        let bad_trace = DMatrix::from_element(2, 2, Complex64::new(0.0, 0.0));
        assert!(DensityMatrix::new(bad_trace).is_err());
        let non_herm = DMatrix::from_row_slice(
            2,
            2,
            &[Complex64::new(0.5, 0.0), Complex64::new(0.1, 0.1), Complex64::new(0.1, 0.1), Complex64::new(0.5, 0.0)],
        );
        assert!(DensityMatrix::new(non_herm).is_err());
        let negative = DMatrix::from_row_slice(
            2,
            2,
            &[Complex64::new(0.5, 0.0), Complex64::new(0.9, 0.0), Complex64::new(0.9, 0.0), Complex64::new(0.5, 0.0)],
        );
        assert!(DensityMatrix::new(negative).is_err());
    }

    #[test]
    fn first_power_symmetry_is_exact_coupling() {
        let spec = random_model(5, 4, &RandomModelOptions::default());
        let report = power_symmetry_check(&generator_for(&spec), &spec, 1, None);
        assert!(report.pass);
        assert_eq!(report.records.len(), 1);
    }

    #[test]
    fn two_level_power_symmetry() {
        let spec = two_level();
        let report = power_symmetry_check(&generator_for(&spec), &spec, 10, None);
        assert!(report.pass);
        assert!(report.records.iter().all(|r| r.residual < 1e-12), "{report:?}");
    }

    #[test]
    fn random_six_level_taylor_ratio() {
        let spec = random_model(6, 42, &RandomModelOptions::default());
        let report = power_symmetry_check(&generator_for(&spec), &spec, 10, Some(0.7));
        assert!(report.pass, "{:?}", report.worst());
        assert_eq!(report.records.len(), 10 + 30);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn grid_evaluation_is_ordered() {
        let spec = random_model(4, 3, &RandomModelOptions::default());
        let g = generator_for(&spec);
        let prop = Propagation::new(&g, &spec).unwrap();
        let grid = default_tau_grid(&g);
        let all = prop.on_grid(&grid).unwrap();
        for (p, t) in all.iter().zip(&grid) {
            assert_eq!(p, &prop.at(*t).unwrap());
        }
    }
}
