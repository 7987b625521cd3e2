//! Jump rates, the population generator `A`, dephasing rates, and the
//! detailed-balance symmetrization used for every spectral computation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{gibbs_populations, ModelSpec, OVERFLOW_GUARD};

/// Relative threshold on eigenvalues treated as zero, in units of `||A||_inf`.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-10;

/// Transition rates `R[(m, n)] = |l_mn|^2`: the rate INTO `m` FROM `n`.
/// The diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix(DMatrix<f64>);

impl RateMatrix {
    /// Wraps raw rates, zeroing the diagonal.
    pub fn from_matrix(mut rates: DMatrix<f64>) -> Self {
        for i in 0..rates.nrows().min(rates.ncols()) {
            rates[(i, i)] = 0.0;
        }
        RateMatrix(rates)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.nrows()
    }

    /// Rate of the jump `from -> to`.
    pub fn rate(&self, to: usize, from: usize) -> f64 {
        self.0[(to, from)]
    }

    /// Total escape rate out of `from`.
    pub fn escape_rate(&self, from: usize) -> f64 {
        (0..self.dimension()).filter(|&j| j != from).map(|j| self.0[(j, from)]).sum()
    }
}

/// `R_mn = C_mn exp(-beta_B (E^(0)_m - E^(0)_n) / 2)`.
pub fn jump_rates(spec: &ModelSpec) -> RateMatrix {
    let e = spec.bare_energies();
    let beta = spec.beta_b();
    let c = spec.coupling().matrix();
    let d = spec.dimension();
    RateMatrix::from_matrix(DMatrix::from_fn(d, d, |m, n| {
        if m == n {
            0.0
        } else {
            c[(m, n)] * (-beta * (e[m] - e[n]) / 2.0).exp()
        }
    }))
}

/// Population generator: `d|v>/dt = -A |v>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    a: DMatrix<f64>,
    rates: RateMatrix,
}

impl Generator {
    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rate_matrix(&self) -> &RateMatrix {
        &self.rates
    }

    pub fn dimension(&self) -> usize {
        self.a.nrows()
    }

    /// `||A||_inf`, the maximum absolute row sum; the natural rate scale.
    pub fn norm_inf(&self) -> f64 {
        self.a.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Largest `|sum_m A_mn|` over columns.
    pub fn column_sum_residual(&self) -> f64 {
        self.a.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max)
    }
}

/// `A_mm = sum_{j != m} R_jm`, `A_mn = -R_mn` for `m != n`.
pub fn build_generator(rates: &RateMatrix) -> Generator {
    let d = rates.dimension();
    let a = DMatrix::from_fn(d, d, |m, n| if m == n { rates.escape_rate(m) } else { -rates.rate(m, n) });
    Generator { a, rates: rates.clone() }
}

/// Convenience: `build_generator(&jump_rates(spec))`.
pub fn generator_for(spec: &ModelSpec) -> Generator {
    build_generator(&jump_rates(spec))
}

/// Coherence decay rates `gamma_mn` and Bohr frequencies `omega_mn = E_m - E_n`
/// of the effective Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct DephasingTable {
    pub gamma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

/// `gamma_mn = (1/2) sum_j (R_jm + R_jn)` off the diagonal, zero on it.
pub fn decay_rates(rates: &RateMatrix, spec: &ModelSpec) -> DephasingTable {
    let d = rates.dimension();
    let escape: Vec<f64> = (0..d).map(|m| rates.escape_rate(m)).collect();
    let e = spec.effective_energies();
    DephasingTable {
        gamma: DMatrix::from_fn(d, d, |m, n| if m == n { 0.0 } else { 0.5 * (escape[m] + escape[n]) }),
        omega: DMatrix::from_fn(d, d, |m, n| e[m] - e[n]),
    }
}

/// `B A B^{-1}` with `B = diag(exp(beta_B E^(0)_m / 2))`; symmetric when the
/// rates satisfy detailed balance, with off-diagonal entries `-C_mn`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricForm {
    pub sym: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl SymmetricForm {
    /// `max |S - S^T|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.sym - self.sym.transpose()).abs().max()
    }

    /// Asymmetry relative to `max |S|`.
    pub fn relative_asymmetry(&self) -> f64 {
        let scale = self.sym.abs().max();
        if scale == 0.0 {
            0.0
        } else {
            self.asymmetry() / scale
        }
    }
}

pub fn symmetrize(gen: &Generator, spec: &ModelSpec) -> Result<SymmetricForm> {
    let e = spec.bare_energies();
    let beta = spec.beta_b();
    let exponent = beta.abs() * spec.energy_span();
    if exponent > OVERFLOW_GUARD {
        return Err(Error::OverflowGuard(format!("beta_B * (E_max - E_min) = {exponent}")));
    }
    let d = gen.dimension();
    if e.len() != d {
        return Err(Error::DimensionMismatch { expected: d, actual: e.len() });
    }
    let a = gen.a_matrix();
    // b_m A_mn / b_n evaluated as one exponential of the energy difference.
    let sym = DMatrix::from_fn(d, d, |m, n| a[(m, n)] * (beta * (e[m] - e[n]) / 2.0).exp());
    let weights = DVector::from_iterator(d, e.iter().map(|em| (beta * em / 2.0).exp()));
    Ok(SymmetricForm { sym, weights })
}

/// Eigensystem of `A` obtained from its symmetric form: `A = B^{-1} U diag(λ) U^T B`.
#[derive(Debug, Clone)]
pub struct Eigensystem {
    /// Ascending eigenvalues.
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors of the symmetric form, column `k` paired with `values[k]`.
    pub vectors: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl Eigensystem {
    pub fn new(gen: &Generator, spec: &ModelSpec) -> Result<Self> {
        let form = symmetrize(gen, spec)?;
        // Round-off asymmetry is removed before the symmetric solver sees it.
        let sym = (&form.sym + form.sym.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let d = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = DVector::from_iterator(d, order.iter().map(|&k| eig.eigenvalues[k]));
        let vectors = DMatrix::from_fn(d, d, |i, k| eig.eigenvectors[(i, order[k])]);
        Ok(Eigensystem { values, vectors, weights: form.weights })
    }

    /// Stationary populations from the lowest eigenvector mapped back through
    /// `B^{-1}`, sign-fixed and normalized to sum 1.
    pub fn stationary(&self) -> Vec<f64> {
        let d = self.values.len();
        let raw: Vec<f64> = (0..d).map(|m| self.vectors[(m, 0)] / self.weights[m]).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }
}

/// One named pass/fail item of a [`SpectralReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralCheck {
    pub name: &'static str,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    /// Eigenvalues of `A`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Normalized zero-mode eigenvector.
    pub stationary: Vec<f64>,
    /// `max |S - S^T|` of the symmetric form.
    pub asymmetry: f64,
    pub checks: Vec<SpectralCheck>,
    pub pass: bool,
}

impl SpectralReport {
    pub fn spectral_gap(&self) -> f64 {
        self.eigenvalues.get(1).copied().unwrap_or(0.0)
    }

    pub fn check(&self, name: &str) -> Option<&SpectralCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Eigenvalues of `A` via the symmetric form, with checks for a real,
/// nonnegative spectrum, a simple zero mode, and a bath-Gibbs stationary state.
pub fn spectral_report(gen: &Generator, spec: &ModelSpec) -> Result<SpectralReport> {
    let eig = Eigensystem::new(gen, spec)?;
    let asymmetry = symmetrize(gen, spec)?.asymmetry();
    let norm = gen.norm_inf();
    let zero_tol = ZERO_EIGENVALUE_TOL * norm;
    let values: Vec<f64> = eig.values.iter().copied().collect();
    let stationary = eig.stationary();

    let mut checks = Vec::new();
    let mut push = |name, pass, measured, threshold, fail: String| {
        checks.push(SpectralCheck {
            name,
            pass,
            measured,
            threshold,
            message: if pass { "ok".into() } else { fail },
        })
    };

    let sym_scale = symmetrize(gen, spec)?.sym.abs().max();
    push(
        "symmetric form",
        asymmetry <= 1e-12 * sym_scale,
        asymmetry,
        1e-12 * sym_scale,
        "symmetrized generator is not symmetric".into(),
    );
    let lowest = values[0];
    push(
        "zero eigenvalue",
        lowest.abs() <= zero_tol,
        lowest,
        zero_tol,
        format!("lowest eigenvalue {lowest:e} is not zero"),
    );
    let most_negative = values.iter().copied().fold(f64::INFINITY, f64::min);
    push(
        "nonnegative spectrum",
        most_negative >= -zero_tol,
        most_negative,
        -zero_tol,
        format!("negative eigenvalue {most_negative:e}"),
    );
    let gap = values.get(1).copied().unwrap_or(0.0);
    push(
        "spectral gap",
        gap > zero_tol,
        gap,
        zero_tol,
        "degenerate stationary state".into(),
    );
    let gibbs = gibbs_populations(spec.bare_energies(), spec.beta_b());
    let deviation = stationary
        .iter()
        .zip(gibbs.probs())
        .map(|(s, g)| (s - g).abs())
        .fold(0.0, f64::max);
    push(
        "gibbs stationary state",
        deviation <= 1e-10,
        deviation,
        1e-10,
        "stationary eigenvector differs from the bath Gibbs state".into(),
    );

    let pass = checks.iter().all(|c| c.pass);
    Ok(SpectralReport { eigenvalues: values, stationary, asymmetry, checks, pass })
}
