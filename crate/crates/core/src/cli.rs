//! Command-line front end.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 for usage,
//! config or I/O errors. Data goes to files in `--out-dir`; stdout carries a
//! short human-readable summary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::generator::{decay_rates, generator_for, spectral_report, Generator, SpectralReport};
use crate::heat::{
    detailed_balance_check, first_law_check, forward_distribution, fr_check, heat_support, reverse_distribution,
    tail_bound_check, HeatSupport, DEFAULT_LOG_TOL, SIGN_CONVENTION,
};
use crate::model::{
    gibbs_populations, random_model_config, validate_model, ModelConfig, ModelSpec, PopulationVector,
    RandomModelOptions,
};
use crate::propagator::{
    default_tau_grid, evolve_density, evolve_populations, power_symmetry_check, taylor_propagator, Complex64,
    DensityMatrix, Propagation, StochasticMatrix,
};
use crate::report::VerificationReport;
use crate::trajectory::{compare_conditional, compare_heat, empirical_conditional, empirical_heat_distribution};

pub const SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "HEATFLUX_THREADS";

const CONFIG_SCHEMA: &str = r#"config schema (JSON):
  {
    "dimension": <int >= 2>,
    "energies": [<float>, ...],            strictly increasing, length = dimension
    "effective_energies": [<float>, ...],  optional, defaults to energies
    "beta_S": <float > 0>,
    "beta_B": <float > 0>,
    "coupling": {"type": "explicit", "matrix": [[...], ...]}
              | {"type": "uniform", "value": <float > 0>}
              | {"type": "random", "seed": <uint64>, "low": <float > 0>, "high": <float>}
  }"#;

#[derive(Debug, Parser)]
#[command(name = "heatflux", version, about = "Heat statistics and fluctuation-relation checks for thermalizing Lindblad dynamics")]
struct Cli {
    /// Model config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving the emitted files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Check every model invariant.
    Validate,
    /// Write A, R, gamma and omega as CSV.
    Dump,
    /// Evolve populations or a density matrix to time tau.
    Evolve(EvolveArgs),
    /// Exact forward/reverse heat distribution at time tau.
    Heatdist(HeatdistArgs),
    /// Run verification checks over a tau grid.
    Verify(VerifyArgs),
    /// Gillespie sampling of conditional probabilities and heat.
    Sample(SampleArgs),
    /// Randomized property sweep over generated models.
    Ensemble(EnsembleArgs),
}

#[derive(Debug, Args, Serialize)]
struct EvolveArgs {
    #[arg(long)]
    tau: f64,
    /// `thermal` (Gibbs state at beta_S) or a JSON file with
    /// `{"populations": [...]}` or `{"density": {"re": [[...]], "im": [[...]]}}`.
    #[arg(long, default_value = "thermal")]
    initial: String,
}

#[derive(Debug, Args, Serialize)]
struct HeatdistArgs {
    #[arg(long)]
    tau: f64,
    /// Heat binning tolerance; defaults to 1e-9 * (E_max - E_min).
    #[arg(long)]
    bin_tol: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    #[arg(long, value_delimiter = ',', default_value = "fr,db,tail,spectral,powersym,firstlaw")]
    checks: Vec<String>,
    /// Absolute evaluation times; defaults to {0.1, 0.5, 1, 2, 5} / ||A||_inf.
    #[arg(long, value_delimiter = ',')]
    tau_grid: Option<Vec<f64>>,
    /// Log-residual tolerance for fr and db.
    #[arg(long, default_value_t = DEFAULT_LOG_TOL)]
    tol: f64,
    /// Highest generator power checked by powersym.
    #[arg(long, default_value_t = 10)]
    s_max: usize,
}

#[derive(Debug, Args, Serialize)]
struct SampleArgs {
    #[arg(long)]
    trajectories: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    tau: f64,
    /// Compare against the exact results and gate the exit code on the z-scores.
    #[arg(long)]
    compare: bool,
}

#[derive(Debug, Args, Serialize)]
struct EnsembleArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long, default_value_t = DEFAULT_LOG_TOL)]
    tol: f64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Model(m) => CliError::Config(m.to_string()),
            Error::InapplicableRegime(_) | Error::InvalidParameter { .. } => CliError::Usage(e.to_string()),
            other => CliError::CheckFailed(other.to_string()),
        }
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return 2;
            }
        },
        Err(_) => None,
    };
    let result = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::Io(e.to_string())),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Config(msg) => eprintln!("error: {msg}\n\n{CONFIG_SCHEMA}"),
                CliError::Io(msg) => eprintln!("error: {msg}"),
                CliError::CheckFailed(msg) => eprintln!("FAIL: {msg}"),
            }
            e.exit_code()
        }
    }
}

/// Collects emitted files and writes the run manifest.
struct Session {
    out_dir: PathBuf,
    hash: String,
    subcommand: &'static str,
    config: Option<ModelConfig>,
    command: Value,
    seeds: Vec<u64>,
    tolerances: Value,
    outputs: Vec<String>,
    started: u64,
}

#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub command: Value,
    pub config: Option<ModelConfig>,
    pub seeds: Vec<u64>,
    pub tolerances: Value,
    pub manifest_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub header_hash: String,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Session {
    fn new(cli: &Cli, config: Option<ModelConfig>) -> Result<Self, CliError> {
        let command = serde_json::to_value(&cli.command).map_err(|e| CliError::Io(e.to_string()))?;
        let subcommand = match cli.command {
            Command::Validate => "validate",
            Command::Dump => "dump",
            Command::Evolve(_) => "evolve",
            Command::Heatdist(_) => "heatdist",
            Command::Verify(_) => "verify",
            Command::Sample(_) => "sample",
            Command::Ensemble(_) => "ensemble",
        };
        let identity = json!({
            "tool": "heatflux",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
        });
        let hash = hex::encode(Sha256::digest(identity.to_string().as_bytes()));
        fs::create_dir_all(&cli.out_dir)?;
        Ok(Session {
            out_dir: cli.out_dir.clone(),
            hash,
            subcommand,
            config,
            command,
            seeds: Vec::new(),
            tolerances: json!({}),
            outputs: Vec::new(),
            started: unix_now(),
        })
    }

    fn header(&self, extra: &[String]) -> String {
        let mut h = String::new();
        let _ = writeln!(h, "# heatflux {} {}", env!("CARGO_PKG_VERSION"), self.subcommand);
        let _ = writeln!(h, "# manifest: {}", self.hash);
        for line in extra {
            let _ = writeln!(h, "# {line}");
        }
        h
    }

    fn write_csv(&mut self, name: &str, extra_header: &[String], body: &str) -> Result<(), CliError> {
        let text = format!("{}{}", self.header(extra_header), body);
        self.write_file(name, &text)
    }

    fn write_json(&mut self, name: &str, mut value: Value) -> Result<(), CliError> {
        if let Value::Object(map) = &mut value {
            map.insert("schema_version".into(), json!(SCHEMA_VERSION));
            map.insert("manifest_hash".into(), json!(self.hash));
        }
        let text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Io(e.to_string()))? + "\n";
        self.write_file(name, &text)
    }

    fn write_file(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        write_atomic(&self.out_dir.join(name), text)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            tool: "heatflux".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand.into(),
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            tolerances: self.tolerances,
            manifest_hash: self.hash.clone(),
            started_unix: self.started,
            finished_unix: unix_now(),
            outputs: self
                .outputs
                .into_iter()
                .map(|file| ManifestEntry { file, header_hash: self.hash.clone() })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))? + "\n";
        write_atomic(&self.out_dir.join("run_manifest.json"), &text)
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

/// 17 significant digits, round-trip exact.
fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::from("row");
    for j in 0..m.ncols() {
        let _ = write!(out, ",{j}");
    }
    out.push('\n');
    for i in 0..m.nrows() {
        let _ = write!(out, "{i}");
        for j in 0..m.ncols() {
            let _ = write!(out, ",{}", num(m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn read_config(cli: &Cli) -> Result<ModelConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("--config <FILE> is required\n\n{CONFIG_SCHEMA}")))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    ModelConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))
}

fn load_spec(cli: &Cli) -> Result<(ModelConfig, ModelSpec), CliError> {
    let config = read_config(cli)?;
    let spec = config.to_spec().map_err(|e| CliError::Config(e.to_string()))?;
    Ok((config, spec))
}

fn model_header(spec: &ModelSpec) -> Vec<String> {
    vec![
        format!("dimension={}", spec.dimension()),
        format!("beta_S={}", num(spec.beta_s())),
        format!("beta_B={}", num(spec.beta_b())),
        format!("energy_shift={}", num(spec.energy_shift())),
    ]
}

fn check_tau(tau: f64) -> Result<(), CliError> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--tau must be a finite number >= 0, got {tau}")))
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Validate => cmd_validate(cli),
        Command::Dump => cmd_dump(cli),
        Command::Evolve(args) => cmd_evolve(cli, args),
        Command::Heatdist(args) => cmd_heatdist(cli, args),
        Command::Verify(args) => cmd_verify(cli, args),
        Command::Sample(args) => cmd_sample(cli, args),
        Command::Ensemble(args) => cmd_ensemble(cli, args),
    }
}

fn cmd_validate(cli: &Cli) -> Result<(), CliError> {
    let config = read_config(cli)?;
    let spec = config.to_spec_unchecked().map_err(|e| CliError::Config(e.to_string()))?;
    let report = validate_model(&spec);
    let mut session = Session::new(cli, Some(config))?;
    for c in &report.checks {
        println!("{:<5} {:<24} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.message);
    }
    session.write_json("validation.json", json!({ "pass": report.passed(), "checks": report.checks }))?;
    session.finish()?;
    let failure = report.failures().next().map(|c| format!("`{}`: {}", c.field, c.message));
    match failure {
        Some(msg) => Err(CliError::CheckFailed(msg)),
        None => Ok(()),
    }
}

fn cmd_dump(cli: &Cli) -> Result<(), CliError> {
    let (config, spec) = load_spec(cli)?;
    let gen = generator_for(&spec);
    let table = decay_rates(gen.rate_matrix(), &spec);
    let mut session = Session::new(cli, Some(config))?;
    let header = model_header(&spec);
    let with = |line: &str| {
        let mut h = header.clone();
        h.push(line.to_string());
        h
    };
    session.write_csv("A.csv", &with("A: population generator, d|v>/dt = -A|v>"), &matrix_csv(gen.a_matrix()))?;
    session.write_csv("R.csv", &with("R[row, col]: jump rate into row from col"), &matrix_csv(gen.rate_matrix().matrix()))?;
    session.write_csv("gamma.csv", &with("gamma: coherence decay rates"), &matrix_csv(&table.gamma))?;
    session.write_csv("omega.csv", &with("omega[row, col] = E[row] - E[col] (effective energies)"), &matrix_csv(&table.omega))?;
    session.finish()?;
    println!("wrote A.csv R.csv gamma.csv omega.csv to {}", cli.out_dir.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialState {
    populations: Option<Vec<f64>>,
    density: Option<ComplexMatrixJson>,
}

#[derive(Deserialize)]
struct ComplexMatrixJson {
    re: Vec<Vec<f64>>,
    #[serde(default)]
    im: Option<Vec<Vec<f64>>>,
}

enum Initial {
    Populations(PopulationVector),
    Density(DensityMatrix),
}

fn read_initial(arg: &str, spec: &ModelSpec) -> Result<Initial, CliError> {
    let d = spec.dimension();
    if arg == "thermal" {
        return Ok(Initial::Populations(gibbs_populations(spec.bare_energies(), spec.beta_s())));
    }
    let bad = |msg: String| CliError::Usage(format!("--initial {arg}: {msg}"));
    let text = fs::read_to_string(arg).map_err(|e| bad(e.to_string()))?;
    let init: InitialState = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    match (init.populations, init.density) {
        (Some(p), None) => {
            if p.len() != d {
                return Err(bad(format!("expected {d} populations, got {}", p.len())));
            }
            Ok(Initial::Populations(PopulationVector::new(p).map_err(|e| bad(e.to_string()))?))
        }
        (None, Some(m)) => {
            let im = m.im.unwrap_or_else(|| vec![vec![0.0; d]; d]);
            let shape_ok = |rows: &Vec<Vec<f64>>| rows.len() == d && rows.iter().all(|r| r.len() == d);
            if !shape_ok(&m.re) || !shape_ok(&im) {
                return Err(bad(format!("density must be {d}x{d}")));
            }
            let entries = DMatrix::from_fn(d, d, |i, j| Complex64::new(m.re[i][j], im[i][j]));
            Ok(Initial::Density(DensityMatrix::new(entries).map_err(|e| bad(e.to_string()))?))
        }
        _ => Err(bad("expected exactly one of `populations` or `density`".into())),
    }
}

fn cmd_evolve(cli: &Cli, args: &EvolveArgs) -> Result<(), CliError> {
    check_tau(args.tau)?;
    let (config, spec) = load_spec(cli)?;
    let initial = read_initial(&args.initial, &spec)?;
    let gen = generator_for(&spec);
    let mut session = Session::new(cli, Some(config))?;
    let mut header = model_header(&spec);
    header.push(format!("tau={}", num(args.tau)));
    header.push(format!("initial={}", args.initial));
    match initial {
        Initial::Populations(v0) => {
            let p = Propagation::new(&gen, &spec)?.at(args.tau)?;
            let v = evolve_populations(&p, &v0)?;
            let mut body = String::from("state,energy,p_initial,p_tau\n");
            for (m, e) in spec.bare_energies().iter().enumerate() {
                let _ = writeln!(body, "{m},{},{},{}", num(*e), num(v0.probs()[m]), num(v.probs()[m]));
            }
            session.write_csv("populations.csv", &header, &body)?;
            println!("wrote populations.csv (tau = {})", args.tau);
        }
        Initial::Density(rho0) => {
            let rho = evolve_density(&rho0, &spec, &gen, args.tau)?;
            let mut body = String::from("row,col,re,im\n");
            for i in 0..spec.dimension() {
                for j in 0..spec.dimension() {
                    let z = rho.entries()[(i, j)];
                    let _ = writeln!(body, "{i},{j},{},{}", num(z.re), num(z.im));
                }
            }
            session.write_csv("density.csv", &header, &body)?;
            println!("wrote density.csv (tau = {})", args.tau);
        }
    }
    session.finish()
}

fn heat_table(spec: &ModelSpec, p: &StochasticMatrix, support: &HeatSupport) -> Result<String, CliError> {
    let f = forward_distribution(spec, p, support)?;
    let r = reverse_distribution(spec, p, support)?;
    let dbeta = spec.delta_beta();
    let mut body = String::from("Q,mass_forward,mass_reverse,log_ratio,expected_log_ratio,residual\n");
    for (i, &q) in support.values().iter().enumerate() {
        let (mf, mr) = (f.mass[i], r.mass[i]);
        if mf == 0.0 && mr == 0.0 {
            continue;
        }
        let log_ratio = if mf > 0.0 && mr > 0.0 { mf.ln() - mr.ln() } else { f64::NAN };
        let expected = q * dbeta;
        let _ = writeln!(
            body,
            "{},{},{},{},{},{}",
            num(q),
            num(mf),
            num(mr),
            num(log_ratio),
            num(expected),
            num(log_ratio - expected)
        );
    }
    Ok(body)
}

fn cmd_heatdist(cli: &Cli, args: &HeatdistArgs) -> Result<(), CliError> {
    check_tau(args.tau)?;
    let (config, spec) = load_spec(cli)?;
    let gen = generator_for(&spec);
    let support = heat_support(&spec, args.bin_tol)?;
    let p = Propagation::new(&gen, &spec)?.at(args.tau)?;
    let body = heat_table(&spec, &p, &support)?;
    let mut session = Session::new(cli, Some(config))?;
    let mut header = model_header(&spec);
    header.push(format!("tau={}", num(args.tau)));
    header.push(format!("tol={}", num(support.tol())));
    header.push(format!("sign convention: {SIGN_CONVENTION}"));
    session.tolerances = json!({ "bin_tol": support.tol() });
    session.write_csv("heatdist.csv", &header, &body)?;
    session.finish()?;
    println!("wrote heatdist.csv (tau = {}, {} support points)", args.tau, support.len());
    Ok(())
}

const KNOWN_CHECKS: [&str; 6] = ["fr", "db", "tail", "spectral", "powersym", "firstlaw"];

/// Every check of `checks` on one model over `taus`.
struct VerifyOutcome {
    reports: Vec<VerificationReport>,
    spectral: Option<SpectralReport>,
}

impl VerifyOutcome {
    fn pass(&self) -> bool {
        self.reports.iter().all(|r| r.pass) && self.spectral.as_ref().is_none_or(|s| s.pass)
    }

    fn max_residual(&self, check: &str) -> f64 {
        self.reports.iter().filter(|r| r.check == check).map(|r| r.max_residual()).fold(0.0, f64::max)
    }

    fn worst_line(&self) -> String {
        if let Some(s) = self.spectral.as_ref().filter(|s| !s.pass) {
            if let Some(c) = s.checks.iter().find(|c| !c.pass) {
                return format!("spectral `{}`: {} (measured {:e})", c.name, c.message, c.measured);
            }
        }
        for r in self.reports.iter().filter(|r| !r.pass) {
            if let Some(w) = r.worst() {
                return format!(
                    "{} at tau={}: {} residual {:e} (tolerance {:e})",
                    r.check,
                    r.tau.map_or("-".into(), num),
                    w.label,
                    w.residual,
                    w.tolerance
                );
            }
        }
        "all checks passed".into()
    }
}

fn run_checks(spec: &ModelSpec, gen: &Generator, checks: &[String], taus: &[f64], tol: f64, s_max: usize) -> Result<VerifyOutcome, CliError> {
    let has = |c: &str| checks.iter().any(|x| x == c);
    if has("tail") && spec.delta_beta() < 0.0 {
        return Err(CliError::Usage("inapplicable regime: requires beta_S >= beta_B".into()));
    }
    let propagation = Propagation::new(gen, spec)?;
    let support = heat_support(spec, None)?;
    let props = propagation.on_grid(taus)?;
    let mut reports = Vec::new();
    for p in &props {
        let tau = p.tau();
        if has("fr") {
            reports.push(fr_check(spec, p, &support, tol)?);
        }
        if has("db") {
            reports.push(detailed_balance_check(p, spec, tol)?);
            let taylor = taylor_propagator(gen, tau);
            let mut t = detailed_balance_check(&taylor, spec, tol)?;
            t.check = "db_taylor".into();
            reports.push(t);
            reports.push(path_agreement(p, &taylor, tol));
        }
        if has("tail") || has("firstlaw") {
            let f = forward_distribution(spec, p, &support)?;
            if has("tail") {
                reports.push(tail_bound_check(&f, spec, None)?);
            }
            if has("firstlaw") {
                reports.push(first_law_check(&f, spec, p)?);
            }
        }
        if has("powersym") {
            reports.push(power_symmetry_check(gen, spec, s_max, Some(tau)));
        }
    }
    let spectral = if has("spectral") { Some(spectral_report(gen, spec)?) } else { None };
    Ok(VerifyOutcome { reports, spectral })
}

/// Elementwise relative agreement of the eigendecomposition and Taylor propagators.
fn path_agreement(eigen: &StochasticMatrix, taylor: &StochasticMatrix, tol: f64) -> VerificationReport {
    let mut report = VerificationReport::new("path_agreement", Some(eigen.tau()), tol);
    let d = eigen.dimension();
    for n in 0..d {
        for m in 0..d {
            let (a, b) = (eigen.prob(n, m), taylor.prob(n, m));
            let scale = a.abs().max(b.abs());
            let rel = if scale > 0.0 { (a - b) / scale } else { 0.0 };
            report.record(format!("({n},{m})"), a, b, rel);
        }
    }
    report
}

fn validate_checks(checks: &[String]) -> Result<(), CliError> {
    if let Some(bad) = checks.iter().find(|c| !KNOWN_CHECKS.contains(&c.as_str())) {
        return Err(CliError::Usage(format!("--checks: unknown check `{bad}` (known: {})", KNOWN_CHECKS.join(","))));
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs) -> Result<(), CliError> {
    validate_checks(&args.checks)?;
    if args.tol.is_nan() || args.tol <= 0.0 {
        return Err(CliError::Usage(format!("--tol must be > 0, got {}", args.tol)));
    }
    let (config, spec) = load_spec(cli)?;
    let gen = generator_for(&spec);
    let taus = match &args.tau_grid {
        Some(g) => {
            for &t in g {
                check_tau(t).map_err(|_| CliError::Usage(format!("--tau-grid: invalid time {t}")))?;
            }
            g.clone()
        }
        None => default_tau_grid(&gen),
    };
    let outcome = run_checks(&spec, &gen, &args.checks, &taus, args.tol, args.s_max)?;
    let pass = outcome.pass();
    let mut session = Session::new(cli, Some(config))?;
    session.tolerances = json!({ "log_residual": args.tol, "s_max": args.s_max });
    let summary: Vec<Value> = args
        .checks
        .iter()
        .filter(|c| c.as_str() != "spectral")
        .map(|c| {
            let reps: Vec<&VerificationReport> = outcome.reports.iter().filter(|r| r.check.starts_with(c.as_str()) || (c == "db" && r.check == "path_agreement")).collect();
            json!({ "check": c, "pass": reps.iter().all(|r| r.pass), "max_residual": reps.iter().map(|r| r.max_residual()).fold(0.0, f64::max) })
        })
        .collect();
    session.write_json(
        "verify.json",
        json!({
            "sign_convention": SIGN_CONVENTION,
            "beta_S": spec.beta_s(),
            "beta_B": spec.beta_b(),
            "tau_grid": taus,
            "tol": args.tol,
            "pass": pass,
            "summary": summary,
            "spectral": outcome.spectral,
            "reports": outcome.reports,
        }),
    )?;
    session.finish()?;
    for s in &summary {
        println!(
            "{:<5} {:<9} max residual {:e}",
            if s["pass"].as_bool() == Some(true) { "PASS" } else { "FAIL" },
            s["check"].as_str().unwrap_or(""),
            s["max_residual"].as_f64().unwrap_or(f64::NAN)
        );
    }
    if let Some(sp) = &outcome.spectral {
        println!("{:<5} spectral  gap {:e}", if sp.pass { "PASS" } else { "FAIL" }, sp.spectral_gap());
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed(outcome.worst_line()))
    }
}

fn cmd_sample(cli: &Cli, args: &SampleArgs) -> Result<(), CliError> {
    check_tau(args.tau)?;
    let (config, spec) = load_spec(cli)?;
    let gen = generator_for(&spec);
    let rates = gen.rate_matrix();
    let support = heat_support(&spec, None)?;
    let cond = empirical_conditional(rates, args.tau, args.trajectories, args.seed)?;
    let heat = empirical_heat_distribution(&spec, rates, &support, args.tau, args.trajectories, args.seed)?;
    let exact_p = Propagation::new(&gen, &spec)?.at(args.tau)?;
    let exact_heat = forward_distribution(&spec, &exact_p, &support)?;

    let mut session = Session::new(cli, Some(config))?;
    session.seeds = vec![args.seed];
    let mut header = model_header(&spec);
    header.push(format!("tau={}", num(args.tau)));
    header.push(format!("trajectories={}", args.trajectories));
    header.push(format!("seed={}", args.seed));

    let d = spec.dimension();
    let n = args.trajectories as f64;
    let mut body = String::from("from,to,count,empirical,std_err");
    body.push_str(if args.compare { ",exact,z\n" } else { "\n" });
    for m in 0..d {
        for k in 0..d {
            let _ = write!(
                body,
                "{m},{k},{},{},{}",
                cond.batch.counts[k][m],
                num(cond.probs[(k, m)]),
                num(cond.std_err[(k, m)])
            );
            if args.compare {
                let ex = exact_p.prob(k, m);
                let _ = write!(body, ",{},{}", num(ex), num(z_score(cond.probs[(k, m)], ex, n)));
            }
            body.push('\n');
        }
    }
    session.write_csv("sample_conditional.csv", &header, &body)?;

    let mut hbody = String::from("Q,count,mass,std_err");
    hbody.push_str(if args.compare { ",exact,z\n" } else { "\n" });
    for (i, q) in support.values().iter().enumerate() {
        let _ = write!(hbody, "{},{},{},{}", num(*q), heat.counts[i], num(heat.distribution.mass[i]), num(heat.std_err[i]));
        if args.compare {
            let ex = exact_heat.mass[i];
            let _ = write!(hbody, ",{},{}", num(ex), num(z_score(heat.distribution.mass[i], ex, n)));
        }
        hbody.push('\n');
    }
    let mut hheader = header.clone();
    hheader.push(format!("sign convention: {SIGN_CONVENTION}"));
    session.write_csv("sample_heat.csv", &hheader, &hbody)?;

    let mut result = Ok(());
    if args.compare {
        let rc = compare_conditional(&exact_p, &cond)?;
        let rh = compare_heat(&exact_heat, &heat)?;
        let pass = rc.pass && rh.pass;
        session.tolerances = json!({ "max_z": crate::trajectory::MAX_Z, "max_fraction_beyond_3sigma": crate::trajectory::MAX_FRACTION_BEYOND_3SIGMA });
        println!("{:<5} conditional max |z| {:.3}", if rc.pass { "PASS" } else { "FAIL" }, max_abs_z(&rc));
        println!("{:<5} heat        max |z| {:.3}", if rh.pass { "PASS" } else { "FAIL" }, max_abs_z(&rh));
        if !pass {
            let worst = [&rc, &rh].into_iter().filter(|r| !r.pass).filter_map(|r| r.worst()).next();
            result = Err(CliError::CheckFailed(match worst {
                Some(w) => format!("{} z = {:.3}", w.label, w.residual),
                None => "z-score gate failed".into(),
            }));
        }
        session.write_json("sample_report.json", json!({ "pass": pass, "reports": [rc, rh] }))?;
    } else {
        println!("wrote sample_conditional.csv and sample_heat.csv");
    }
    session.finish()?;
    result
}

fn z_score(empirical: f64, exact: f64, n: f64) -> f64 {
    let diff = empirical - exact;
    let sigma = (exact * (1.0 - exact) / n).sqrt();
    if diff == 0.0 {
        0.0
    } else if sigma > 0.0 {
        diff / sigma
    } else {
        f64::INFINITY.copysign(diff)
    }
}

fn max_abs_z(r: &VerificationReport) -> f64 {
    r.records.iter().filter(|x| x.tolerance == crate::trajectory::MAX_Z).map(|x| x.residual.abs()).fold(0.0, f64::max)
}

fn cmd_ensemble(cli: &Cli, args: &EnsembleArgs) -> Result<(), CliError> {
    if args.dim < 2 {
        return Err(CliError::Usage(format!("--dim must be >= 2, got {}", args.dim)));
    }
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let opts = RandomModelOptions::default();
    let all: Vec<String> = KNOWN_CHECKS.iter().map(|s| s.to_string()).collect();
    let no_tail: Vec<String> = all.iter().filter(|c| c.as_str() != "tail").cloned().collect();
    let mut session = Session::new(cli, None)?;
    session.seeds = (args.first_seed..args.first_seed + args.seeds).collect();
    session.tolerances = json!({ "log_residual": args.tol });

    let mut body = String::from(
        "seed,dim,beta_S,beta_B,max_fr,max_db,max_db_taylor,max_path_diff,max_powersym,max_tail_excess,max_firstlaw,spectral_gap,pass\n",
    );
    let mut failures = Vec::new();
    for seed in args.first_seed..args.first_seed + args.seeds {
        let spec = random_model_config(args.dim, seed, &opts).to_spec().map_err(|e| CliError::Config(e.to_string()))?;
        let gen = generator_for(&spec);
        let checks = if spec.delta_beta() >= 0.0 { &all } else { &no_tail };
        let outcome = run_checks(&spec, &gen, checks, &default_tau_grid(&gen), args.tol, 10)?;
        let tail_excess = outcome
            .reports
            .iter()
            .filter(|r| r.check == "tail")
            .flat_map(|r| r.records.iter().map(|x| x.residual))
            .fold(f64::NAN, f64::max);
        let pass = outcome.pass();
        if !pass {
            failures.push(format!("seed {seed}: {}", outcome.worst_line()));
        }
        let _ = writeln!(
            body,
            "{seed},{},{},{},{},{},{},{},{},{},{},{},{}",
            args.dim,
            num(spec.beta_s()),
            num(spec.beta_b()),
            num(outcome.max_residual("fr")),
            num(outcome.max_residual("db")),
            num(outcome.max_residual("db_taylor")),
            num(outcome.max_residual("path_agreement")),
            num(outcome.max_residual("power_symmetry")),
            num(tail_excess),
            num(outcome.max_residual("firstlaw")),
            num(outcome.spectral.as_ref().map_or(f64::NAN, |s| s.spectral_gap())),
            pass
        );
    }
    let header = vec![
        format!("dim={} seeds={}..{}", args.dim, args.first_seed, args.first_seed + args.seeds),
        format!("tol={}", num(args.tol)),
        "tau grid = {0.1, 0.5, 1, 2, 5} / ||A||_inf; tail check only when beta_S >= beta_B".into(),
        format!("sign convention: {SIGN_CONVENTION}"),
    ];
    session.write_csv("ensemble.csv", &header, &body)?;
    session.finish()?;
    println!("{} of {} models passed every check", args.seeds as usize - failures.len(), args.seeds);
    match failures.first() {
        Some(f) => Err(CliError::CheckFailed(f.clone())),
        None => Ok(()),
    }
}
