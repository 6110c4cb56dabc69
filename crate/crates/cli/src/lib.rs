//! Command implementations behind the `coevo` binary. Each command reads a
//! scenario, writes its outputs to `<out>/<scenario>/<command>-<hash>*` and
//! reports an [`Outcome`] that maps to the process exit code.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use coevo::analysis;
use coevo::config::{Property, Scenario, ScenarioConfig, Verification};
use coevo::control;
use coevo::dynamics::State;
use coevo::equilibria::{self, EquilibriumBranch};
use coevo::landscape::{check_hypotheses, Grid};
use coevo::omega::{self, OmegaCurve};
use coevo::Error;

#[derive(Debug, Parser)]
#[command(name = "coevo", version, about = "Controllable sets and dosing for trait/population therapy models")]
pub struct Cli {
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in landscape to use when no config file is given.
    #[arg(long, global = true, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Output root; files go to `<out>/<scenario name>/`.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the integrator relative tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
pub enum Command {
    /// Audit hypotheses H1-H4 on the configured grids.
    Check,
    /// Equilibrium branch, labels and connected components of the feasible set.
    Equilibria,
    /// Boundary curves of the controllable sets.
    Omega,
    /// Trajectory under the configured schedule.
    Simulate(SimulateArgs),
    /// Randomized verification of one property.
    Verify(VerifyArgs),
    /// Controllable sets along a family of dose ranges.
    Sweep,
    /// L1-optimal periodic dosing experiment.
    Control,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Initial trait value (overrides the config).
    #[arg(long, allow_negative_numbers = true)]
    pub u0: Option<f64>,
    /// Initial population (overrides the config).
    #[arg(long)]
    pub n0: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    /// Property to check (overrides the config).
    #[arg(long, value_parser = parse_property)]
    pub property: Option<Property>,
}

fn parse_property(s: &str) -> Result<Property, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| {
        "expected one of angle_condition, forward_invariance, controllability, no_return, limit_sets, b_delta, curative_set"
            .to_string()
    })
}

/// How a command ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// A checked property or hypothesis failed.
    Violation(String),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    /// 1 usage/config, 2 property violation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::InvalidLandscape(_) | Error::InvalidSchedule(_) | Error::Io(_) | Error::Json(_) => 1,
                Error::H3Violation { .. } | Error::NonPositiveInteraction { .. } | Error::NotHyperbolic { .. } => 2,
                Error::NonFinite { .. }
                | Error::StepUnderflow { .. }
                | Error::GridTooCoarse(_)
                | Error::NotASaddle { .. }
                | Error::Orbit(_)
                | Error::NotClosed(_)
                | Error::NoConvergence(_) => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Reads the scenario and applies the global overrides.
pub fn load_config(cli: &Cli) -> CliResult<ScenarioConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config '{}': {e}", path.display())))?;
            ScenarioConfig::from_toml(&text)?
        }
        (None, Some(p)) => ScenarioConfig::from_preset(p),
        (None, None) => return Err(CliError::Usage("either --config or --preset is required".into())),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = cli.tol {
        if !(t > 0.0) {
            return Err(CliError::Usage("--tol must be positive".into()));
        }
        cfg.tolerances.rtol = Some(t);
        cfg.tolerances.atol = None;
    }
    Ok(cfg)
}

/// Short stable digest of the command and the effective configuration.
pub fn params_hash(command: &Command, cfg: &ScenarioConfig) -> String {
    let payload = serde_json::to_string(&(command, cfg)).expect("configuration serializes");
    let digest = Sha256::digest(payload.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Check => "check",
        Command::Equilibria => "equilibria",
        Command::Omega => "omega",
        Command::Simulate(_) => "simulate",
        Command::Verify(_) => "verify",
        Command::Sweep => "sweep",
        Command::Control => "control",
    }
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Output sink for one command run.
pub struct Output {
    dir: PathBuf,
    stem: String,
    pub written: Vec<PathBuf>,
}

impl Output {
    fn new(root: &Path, scenario: &str, stem: String) -> CliResult<Self> {
        let dir = root.join(safe_name(scenario));
        fs::create_dir_all(&dir)?;
        Ok(Output {
            dir,
            stem,
            written: Vec::new(),
        })
    }

    fn path(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}{suffix}", self.stem))
    }

    fn with<F: FnOnce(&mut BufWriter<File>) -> coevo::Result<()>>(&mut self, suffix: &str, f: F) -> CliResult<()> {
        let p = self.path(suffix);
        let mut w = BufWriter::new(File::create(&p)?);
        f(&mut w)?;
        w.flush()?;
        self.written.push(p);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, suffix: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value).map_err(Error::Json)?;
        self.with(suffix, |w| {
            w.write_all(text.as_bytes())?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }
}

/// Runs a parsed command line; returns the outcome and the written files.
pub fn run(cli: &Cli) -> CliResult<(Outcome, Vec<PathBuf>)> {
    let cfg = load_config(cli)?;
    let sc = cfg.resolve()?;
    let stem = format!("{}-{}", command_name(&cli.command), params_hash(&cli.command, &cfg));
    let mut out = Output::new(&cli.out, &sc.name, stem)?;
    let outcome = match &cli.command {
        Command::Check => cmd_check(&sc, &mut out)?,
        Command::Equilibria => cmd_equilibria(&sc, &mut out)?,
        Command::Omega => cmd_omega(&sc, &mut out)?,
        Command::Simulate(a) => cmd_simulate(&sc, a, &mut out)?,
        Command::Verify(a) => cmd_verify(&sc, a.property.unwrap_or(sc.config.verify.property), &mut out)?,
        Command::Sweep => cmd_sweep(&sc, &mut out)?,
        Command::Control => cmd_control(&sc, &mut out)?,
    };
    Ok((outcome, out.written))
}

pub fn cmd_check(sc: &Scenario, out: &mut Output) -> CliResult<Outcome> {
    let rep = check_hypotheses(&sc.landscape, &sc.u_grid, &sc.a_grid);
    out.json(".json", &rep)?;
    let failed: Vec<&str> = rep.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    Ok(if failed.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Violation(format!("hypotheses failed: {}", failed.join(", ")))
    })
}

#[derive(Serialize)]
struct ComponentsFile<'a> {
    range: (f64, f64),
    hyperbolic: bool,
    folds: Vec<equilibria::Fold>,
    components: &'a [equilibria::Component],
}

pub fn cmd_equilibria(sc: &Scenario, out: &mut Output) -> CliResult<Outcome> {
    let l = &sc.landscape;
    let branch = EquilibriumBranch::compute(l, &sc.u_grid, sc.deriv_tol)?;
    out.with("-branch.csv", |w| branch.write_csv(w))?;
    let comps = equilibria::components(sc.range, l, &sc.u_grid, sc.deriv_tol)?;
    out.json(
        "-components.json",
        &ComponentsFile {
            range: sc.range,
            hyperbolic: true,
            folds: equilibria::folds(l, &sc.u_grid)?,
            components: &comps,
        },
    )?;
    Ok(Outcome::Ok)
}

fn write_curves(out: &mut Output, prefix: &str, curves: &[OmegaCurve]) -> CliResult<()> {
    for c in curves {
        out.with(&format!("{prefix}-{}.csv", c.component.id), |w| c.write_csv(w))?;
    }
    Ok(())
}

pub fn cmd_omega(sc: &Scenario, out: &mut Output) -> CliResult<Outcome> {
    let curves = omega::build_all(sc.range, &sc.landscape, &sc.omega)?;
    write_curves(out, "", &curves)?;
    let summaries: Vec<_> = curves.iter().map(|c| c.summary()).collect();
    out.json("-summary.json", &summaries)?;
    Ok(Outcome::Ok)
}

pub fn cmd_simulate(sc: &Scenario, a: &SimulateArgs, out: &mut Output) -> CliResult<Outcome> {
    let (u0, n0) = sc.config.simulate.x0;
    let x0 = State::new(a.u0.unwrap_or(u0), a.n0.unwrap_or(n0));
    let traj = sc.simulate(Some(x0), a.horizon)?;
    out.with(".csv", |w| traj.write_csv(w))?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct CurativeSummary {
    property: &'static str,
    seed: u64,
    budget: usize,
    horizon: f64,
    curative_fraction: f64,
    u_grid: Grid,
    n_grid: Grid,
}

pub fn cmd_verify(sc: &Scenario, property: Property, out: &mut Output) -> CliResult<Outcome> {
    match sc.verify(property)? {
        Verification::Curative(field) => {
            out.with("-curative.csv", |w| field.write_csv(w))?;
            out.json(
                "-curative.json",
                &CurativeSummary {
                    property: property.as_str(),
                    seed: sc.seed,
                    budget: sc.config.verify.curative_budget,
                    horizon: sc.config.verify.horizon,
                    curative_fraction: field.fraction(),
                    u_grid: field.u_grid,
                    n_grid: field.n_grid,
                },
            )?;
            Ok(Outcome::Ok)
        }
        Verification::Report(report) => {
            out.json(&format!("-{}.json", property.as_str()), &report)?;
            Ok(if report.passed {
                Outcome::Ok
            } else {
                Outcome::Violation(format!("{}: {} violations out of {}", report.property, report.violations, report.checked))
            })
        }
    }
}

pub fn cmd_sweep(sc: &Scenario, out: &mut Output) -> CliResult<Outcome> {
    let s = &sc.config.sweep;
    if s.deltas.is_empty() {
        return Err(CliError::Usage("sweep: 'sweep.deltas' is empty".into()));
    }
    let res = match &s.ranges {
        Some(r) => analysis::sweep_ranges(&sc.landscape, sc.range, &s.deltas, r, &sc.omega)?,
        None => analysis::bifurcation_sweep(&sc.landscape, sc.range, &s.deltas, &sc.omega)?,
    };
    for (k, e) in res.entries.iter().enumerate() {
        write_curves(out, &format!("-d{k}"), &e.curves)?;
    }
    out.json(".json", &res)?;
    let bad: usize = res.nesting.iter().map(|n| n.violations).sum();
    Ok(if bad == 0 {
        Outcome::Ok
    } else {
        Outcome::Violation(format!("{bad} nesting violations"))
    })
}

#[derive(Serialize)]
struct ControlFile {
    range: (f64, f64),
    epsilon: f64,
    experiments: Vec<control::ExperimentSummary>,
    /// Repetition of the last converged period of each experiment.
    cycles: Vec<Option<Vec<f64>>>,
    adjoint_fd_error: Vec<Option<f64>>,
    splits: Vec<control::Split>,
}

pub fn cmd_control(sc: &Scenario, out: &mut Output) -> CliResult<Outcome> {
    let l = &sc.landscape;
    let c = &sc.config.control;
    let cls = sc.exit_classifier()?;
    let eo = sc.experiment();
    let starts: Vec<State> = c.starts.iter().map(|&(u, n)| State::new(u, n)).collect();
    let exps = control::classify_starts(&starts, sc.range, l, &cls, &eo)?;
    let mut file = ControlFile {
        range: sc.range,
        epsilon: l.epsilon,
        experiments: Vec::new(),
        cycles: Vec::new(),
        adjoint_fd_error: Vec::new(),
        splits: Vec::new(),
    };
    for (k, ex) in exps.iter().enumerate() {
        out.with(&format!("-s{k}.csv"), |w| ex.write_csv(w))?;
        if let Some(t) = &ex.continuation {
            out.with(&format!("-s{k}-continuation.csv"), |w| t.write_csv(w))?;
        }
        let last = ex.runs.iter().rev().find(|r| r.converged);
        match last {
            Some(run) if c.cycles > 0 => {
                let cy = control::run_cycles(run, c.cycles, l)?;
                out.with(&format!("-s{k}-cycles.csv"), |w| cy.write_csv(w))?;
                file.cycles.push(Some(cy.return_errors));
            }
            _ => file.cycles.push(None),
        }
        file.adjoint_fd_error.push(match ex.runs.first() {
            Some(r) if r.converged => Some(control::adjoint_fd_error(r, l, 8, 1e-6)?),
            _ => None,
        });
        file.experiments.push(ex.summary());
    }
    for &t in &c.split_horizons {
        let o = coevo::control::ExperimentOptions { horizon: t, ..eo };
        file.splits.extend(control::split_search(c.split_n0, &c.split_u, sc.range, l, &cls, &o, c.split_tol)?);
    }
    out.json(".json", &file)?;
    Ok(Outcome::Ok)
}
