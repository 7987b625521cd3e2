//! Physical model: spectrum, temperatures and couplings, plus thermal
//! population vectors.
//!
//! Units: k_B = 1 and ħ = 1, so energies and inverse temperatures are plain
//! reals. State indices are zero-based throughout the crate.

use std::collections::VecDeque;

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ModelError};

/// Largest allowed `beta * (E_max - E_min)` before Boltzmann factors leave
/// the double-precision exponent range.
pub const OVERFLOW_GUARD: f64 = 300.0;

/// Tolerance on the normalization of a [`PopulationVector`].
pub const POPULATION_SUM_TOL: f64 = 1e-12;

/// Symmetric, nonnegative coupling constants `C_mn` between eigenstates.
///
/// The diagonal carries no meaning and is forced to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix(DMatrix<f64>);

impl CouplingMatrix {
    /// Wraps `entries`, zeroing the diagonal. No invariant is checked here;
    /// see [`validate_model`].
    pub fn new(mut entries: DMatrix<f64>) -> Self {
        let n = entries.nrows().min(entries.ncols());
        for i in 0..n {
            entries[(i, i)] = 0.0;
        }
        CouplingMatrix(entries)
    }

    pub fn uniform(dim: usize, value: f64) -> Self {
        Self::new(DMatrix::from_element(dim, dim, value))
    }

    /// Entries drawn uniformly from `[low, high)` and symmetrized as
    /// `(X + X^T) / 2`.
    pub fn random(dim: usize, seed: u64, low: f64, high: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(dim, dim, |_, _| {
            if high > low {
                rng.random_range(low..high)
            } else {
                low
            }
        });
        Self::new((&x + x.transpose()) * 0.5)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        Self::new(DMatrix::from_fn(nrows, ncols, |i, j| {
            rows[i].get(j).copied().unwrap_or(f64::NAN)
        }))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.0[(m, n)]
    }

    /// `max |C_mn - C_nm|`.
    pub fn asymmetry(&self) -> f64 {
        let c = &self.0;
        let mut worst: f64 = 0.0;
        for m in 0..c.nrows() {
            for n in 0..c.ncols().min(c.nrows()) {
                worst = worst.max((c[(m, n)] - c[(n, m)]).abs());
            }
        }
        worst
    }

    /// Whether the graph with an edge wherever `C_mn > 0` (m < n) spans all
    /// states.
    pub fn is_connected(&self) -> bool {
        self.components() == 1
    }

    /// Number of connected components of the coupling graph.
    #[allow(clippy::needless_range_loop)]
    pub fn components(&self) -> usize {
        let d = self.0.nrows();
        let mut seen = vec![false; d];
        let mut count = 0;
        for start in 0..d {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(m) = queue.pop_front() {
                for n in 0..d {
                    let (lo, hi) = (m.min(n), m.max(n));
                    if !seen[n] && m != n && self.0[(lo, hi)] > 0.0 {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        count
    }
}

/// A thermalizing model: bare spectrum `E^(0)`, effective spectrum `E`,
/// system and bath inverse temperatures, and couplings.
///
/// Energies are stored shifted so that `min(bare) = 0`; the same constant is
/// subtracted from the effective energies. Every observable in the crate
/// depends only on energy differences.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    bare: Vec<f64>,
    effective: Vec<f64>,
    beta_s: f64,
    beta_b: f64,
    coupling: CouplingMatrix,
    shift: f64,
}

impl ModelSpec {
    /// Builds and validates a model. Returns the first failed invariant.
    pub fn new(
        bare: Vec<f64>,
        effective: Option<Vec<f64>>,
        beta_s: f64,
        beta_b: f64,
        coupling: CouplingMatrix,
    ) -> Result<Self, ModelError> {
        let spec = Self::new_unchecked(bare, effective, beta_s, beta_b, coupling);
        validate_model(&spec).into_result()?;
        Ok(spec)
    }

    /// Builds a model without checking invariants (the energy shift is still
    /// applied). Use [`validate_model`] to inspect what is wrong with it.
    pub fn new_unchecked(
        bare: Vec<f64>,
        effective: Option<Vec<f64>>,
        beta_s: f64,
        beta_b: f64,
        coupling: CouplingMatrix,
    ) -> Self {
        let shift = bare
            .iter()
            .copied()
            .filter(|e| e.is_finite())
            .fold(f64::INFINITY, f64::min);
        let shift = if shift.is_finite() { shift } else { 0.0 };
        let effective = effective.unwrap_or_else(|| bare.clone());
        ModelSpec {
            bare: bare.iter().map(|e| e - shift).collect(),
            effective: effective.iter().map(|e| e - shift).collect(),
            beta_s,
            beta_b,
            coupling,
            shift,
        }
    }

    pub fn dimension(&self) -> usize {
        self.bare.len()
    }

    /// Bare energies `E^(0)_m`, shifted so the ground state sits at zero.
    pub fn bare_energies(&self) -> &[f64] {
        &self.bare
    }

    /// Effective energies `E_m` (same shift as the bare ones).
    pub fn effective_energies(&self) -> &[f64] {
        &self.effective
    }

    pub fn beta_s(&self) -> f64 {
        self.beta_s
    }

    pub fn beta_b(&self) -> f64 {
        self.beta_b
    }

    /// `beta_S - beta_B`; positive for a cold system in a hot bath.
    pub fn delta_beta(&self) -> f64 {
        self.beta_s - self.beta_b
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        &self.coupling
    }

    /// Constant subtracted from the input energies at construction.
    pub fn energy_shift(&self) -> f64 {
        self.shift
    }

    pub fn energy_span(&self) -> f64 {
        let max = self.bare.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.bare.iter().copied().fold(f64::INFINITY, f64::min);
        if self.bare.is_empty() {
            0.0
        } else {
            max - min
        }
    }

    /// Same model with different inverse temperatures.
    pub fn with_temperatures(&self, beta_s: f64, beta_b: f64) -> Self {
        ModelSpec { beta_s, beta_b, ..self.clone() }
    }
}

/// Probability distribution over the energy eigenstates.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationVector(Vec<f64>);

impl PopulationVector {
    pub fn new(probs: Vec<f64>) -> crate::Result<Self> {
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| p.is_nan() || **p < 0.0) {
            return Err(Error::InvalidPopulation(format!("entry {i} is {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > POPULATION_SUM_TOL {
            return Err(Error::InvalidPopulation(format!("entries sum to {sum}")));
        }
        Ok(PopulationVector(probs))
    }

    /// Point mass on state `m`.
    pub fn basis(dim: usize, m: usize) -> Self {
        let mut probs = vec![0.0; dim];
        probs[m] = 1.0;
        PopulationVector(probs)
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        PopulationVector(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `sum_m p_m E_m`.
    pub fn mean_energy(&self, energies: &[f64]) -> f64 {
        self.0.iter().zip(energies).map(|(p, e)| p * e).sum()
    }
}

/// Boltzmann weights `e^{-beta E_m} / Z`, evaluated relative to the lowest
/// energy so no exponent is positive.
///
/// Panics if `beta` is not a positive finite number.
pub fn gibbs_populations(energies: &[f64], beta: f64) -> PopulationVector {
    assert!(beta > 0.0 && beta.is_finite(), "gibbs_populations: beta must be positive, got {beta}");
    let e_min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = energies.iter().map(|e| (-beta * (e - e_min)).exp()).collect();
    let z: f64 = weights.iter().sum();
    PopulationVector(weights.into_iter().map(|w| w / z).collect())
}

/// One invariant checked by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub name: &'static str,
    /// Config field the check concerns.
    pub field: &'static str,
    pub pass: bool,
    /// Measured violation, where one is meaningful.
    pub residual: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ValidationCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&ValidationCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// The first failure as an error.
    pub fn into_result(self) -> Result<(), ModelError> {
        match self.checks.into_iter().find(|c| !c.pass) {
            Some(c) => Err(ModelError::invalid(c.field, c.message)),
            None => Ok(()),
        }
    }
}

struct Checks(Vec<ValidationCheck>);

impl Checks {
    fn push(&mut self, name: &'static str, field: &'static str, ok: bool, residual: Option<f64>, fail_msg: impl Into<String>) {
        self.0.push(ValidationCheck {
            name,
            field,
            pass: ok,
            residual,
            message: if ok { "ok".to_string() } else { fail_msg.into() },
        });
    }
}

/// Checks every model invariant and reports each with its measured residual.
/// Checks that cannot be evaluated because of an earlier shape failure are
/// reported as failed.
pub fn validate_model(spec: &ModelSpec) -> ValidationReport {
    let mut checks = Checks(Vec::new());
    let d = spec.dimension();

    checks.push("dimension", "dimension", d >= 2, None, format!("dimension must be at least 2, got {d}"));

    let finite = spec.bare.iter().all(|e| e.is_finite());
    checks.push("energies finite", "energies", finite, None, "energies must be finite");

    let min_gap = spec
        .bare
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let increasing = finite && spec.bare.windows(2).all(|w| w[1] > w[0]);
    let degenerate = spec.bare.windows(2).any(|w| w[1] == w[0]);
    checks.push(
        "spectrum nondegenerate",
        "energies",
        increasing,
        min_gap.is_finite().then_some(min_gap),
        if degenerate { "degenerate spectrum" } else { "energies must be strictly increasing" },
    );

    let eff_ok = spec.effective.len() == d && spec.effective.iter().all(|e| e.is_finite());
    checks.push(
        "effective energies",
        "effective_energies",
        eff_ok,
        None,
        format!("expected {d} finite effective energies, got {}", spec.effective.len()),
    );

    let bs_ok = spec.beta_s > 0.0 && spec.beta_s.is_finite();
    checks.push("beta_S positive", "beta_S", bs_ok, None, format!("non-positive temperature: beta_S = {}", spec.beta_s));
    let bb_ok = spec.beta_b > 0.0 && spec.beta_b.is_finite();
    checks.push("beta_B positive", "beta_B", bb_ok, None, format!("non-positive temperature: beta_B = {}", spec.beta_b));

    let span = spec.energy_span();
    let exponent = spec.beta_s.abs().max(spec.beta_b.abs()) * span;
    checks.push(
        "overflow guard",
        if spec.beta_s.abs() >= spec.beta_b.abs() { "beta_S" } else { "beta_B" },
        exponent <= OVERFLOW_GUARD,
        Some(exponent),
        format!("beta * (E_max - E_min) = {exponent} exceeds {OVERFLOW_GUARD}"),
    );

    let c = spec.coupling.matrix();
    let shape_ok = c.nrows() == d && c.ncols() == d;
    checks.push(
        "coupling shape",
        "coupling",
        shape_ok,
        None,
        format!("coupling must be {d}x{d}, got {}x{}", c.nrows(), c.ncols()),
    );
    if !shape_ok {
        for name in ["coupling symmetry", "coupling nonnegative", "coupling connectivity"] {
            checks.push(name, "coupling", false, None, "not evaluated: coupling has the wrong shape");
        }
        return ValidationReport { checks: checks.0 };
    }

    let asym = spec.coupling.asymmetry();
    checks.push("coupling symmetry", "coupling", asym == 0.0, Some(asym), "coupling asymmetry");

    let min_off = (0..d)
        .flat_map(|m| (0..d).filter(move |&n| n != m).map(move |n| (m, n)))
        .map(|(m, n)| c[(m, n)])
        .fold(f64::INFINITY, f64::min);
    let nonneg = min_off >= 0.0 && c.iter().all(|x| x.is_finite());
    checks.push("coupling nonnegative", "coupling", nonneg, Some(min_off), "negative or non-finite coupling");

    let components = spec.coupling.components();
    checks.push(
        "coupling connectivity",
        "coupling",
        components == 1,
        Some(components as f64),
        "coupling graph disconnected",
    );

    ValidationReport { checks: checks.0 }
}

/// Coupling section of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CouplingConfig {
    /// Row-major `dimension x dimension` matrix.
    Explicit { matrix: Vec<Vec<f64>> },
    Uniform { value: f64 },
    Random { seed: u64, low: f64, high: f64 },
}

/// The config document accepted by [`load_model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dimension: usize,
    pub energies: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_energies: Option<Vec<f64>>,
    #[serde(rename = "beta_S")]
    pub beta_s: f64,
    #[serde(rename = "beta_B")]
    pub beta_b: f64,
    pub coupling: CouplingConfig,
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    /// Builds the model without enforcing invariants. Config-level errors
    /// (sizes, coupling parameters) are still rejected.
    pub fn to_spec_unchecked(&self) -> Result<ModelSpec, ModelError> {
        let d = self.dimension;
        if self.energies.len() != d {
            return Err(ModelError::invalid(
                "energies",
                format!("expected {d} energies, got {}", self.energies.len()),
            ));
        }
        if let Some(eff) = &self.effective_energies {
            if eff.len() != d {
                return Err(ModelError::invalid(
                    "effective_energies",
                    format!("expected {d} effective energies, got {}", eff.len()),
                ));
            }
        }
        let coupling = match &self.coupling {
            CouplingConfig::Explicit { matrix } => {
                if matrix.len() != d || matrix.iter().any(|row| row.len() != d) {
                    return Err(ModelError::invalid("coupling", format!("matrix must be {d}x{d}")));
                }
                if (0..d).any(|i| matrix[i][i] != 0.0) {
                    warn!("coupling diagonal entries are ignored");
                }
                CouplingMatrix::from_rows(matrix)
            }
            CouplingConfig::Uniform { value } => {
                if !(*value > 0.0 && value.is_finite()) {
                    return Err(ModelError::invalid("coupling", format!("uniform value must be > 0, got {value}")));
                }
                CouplingMatrix::uniform(d, *value)
            }
            CouplingConfig::Random { seed, low, high } => {
                if !(*low > 0.0 && high >= low && high.is_finite()) {
                    return Err(ModelError::invalid(
                        "coupling",
                        format!("random coupling requires 0 < low <= high, got low={low}, high={high}"),
                    ));
                }
                CouplingMatrix::random(d, *seed, *low, *high)
            }
        };
        Ok(ModelSpec::new_unchecked(
            self.energies.clone(),
            self.effective_energies.clone(),
            self.beta_s,
            self.beta_b,
            coupling,
        ))
    }

    pub fn to_spec(&self) -> Result<ModelSpec, ModelError> {
        let spec = self.to_spec_unchecked()?;
        validate_model(&spec).into_result()?;
        Ok(spec)
    }
}

/// Parses a JSON config and returns a validated, energy-shifted model.
pub fn load_model(config_text: &str) -> Result<ModelSpec, ModelError> {
    ModelConfig::parse(config_text)?.to_spec()
}

/// Parameter ranges for [`random_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomModelOptions {
    /// Bare energies are drawn from `[0, energy_span]` and sorted.
    pub energy_span: f64,
    pub beta_range: (f64, f64),
    pub coupling_range: (f64, f64),
}

impl Default for RandomModelOptions {
    fn default() -> Self {
        RandomModelOptions { energy_span: 2.0, beta_range: (0.2, 3.0), coupling_range: (0.1, 1.0) }
    }
}

/// Random connected model used by the ensemble sweeps; a pure function of
/// `(dim, seed, opts)`.
pub fn random_model_config(dim: usize, seed: u64, opts: &RandomModelOptions) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6174_666c_7578);
    let mut energies: Vec<f64> = loop {
        let mut e: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * opts.energy_span).collect();
        e.sort_by(f64::total_cmp);
        if e.windows(2).all(|w| w[1] - w[0] > 1e-6 * opts.energy_span) {
            break e;
        }
    };
    let e0 = energies[0];
    energies.iter_mut().for_each(|e| *e -= e0);
    let (lo, hi) = opts.beta_range;
    let beta_s = rng.random_range(lo..=hi);
    let beta_b = rng.random_range(lo..=hi);
    ModelConfig {
        dimension: dim,
        energies,
        effective_energies: None,
        beta_s,
        beta_b,
        coupling: CouplingConfig::Random {
            seed: rng.random(),
            low: opts.coupling_range.0,
            high: opts.coupling_range.1,
        },
    }
}

pub fn random_model(dim: usize, seed: u64, opts: &RandomModelOptions) -> ModelSpec {
    random_model_config(dim, seed, opts)
        .to_spec()
        .expect("random model parameters satisfy every invariant")
}
