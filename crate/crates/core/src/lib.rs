//! Heat-exchange statistics for a finite quantum system thermalized by a
//! Lindblad bath.
//!
//! The crate builds the thermalizing generator from a spectrum, bath
//! temperature and couplings ([`generator`]), propagates populations and
//! coherences ([`propagator`]), computes exact two-point heat distributions
//! and checks the heat fluctuation relation, the detailed-balance identity
//! of the propagator and the cold-system tail bound ([`heat`]), and
//! cross-checks everything against Gillespie sampling ([`trajectory`]).

pub mod cli;
pub mod error;
pub mod generator;
pub mod heat;
pub mod model;
pub mod propagator;
pub mod report;
pub mod trajectory;

pub use error::{Error, ModelError, Result};
pub use generator::{build_generator, decay_rates, generator_for, jump_rates, spectral_report, symmetrize, Generator, RateMatrix};
pub use heat::{heat_support, HeatDistribution, HeatSupport};
pub use model::{gibbs_populations, load_model, validate_model, ModelSpec, PopulationVector};
pub use propagator::{propagator, Propagation, StochasticMatrix};
pub use report::VerificationReport;
