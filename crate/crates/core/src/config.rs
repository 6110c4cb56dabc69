//! Scenario files (TOML). Unknown keys are rejected at every level.
//!
//! ```toml
//! name = "exit-split"
//! range = [0.0, 0.38]
//! seed = 7
//!
//! [landscape]
//! preset = "d"
//! epsilon = 0.01
//!
//! [control]
//! starts = [[0.28585, 0.32], [0.28587, 0.32]]
//! horizon = 30.0
//! ```

use serde::{Deserialize, Serialize};

use crate::analysis::{self, CurativeField, RandomScheduleSpec, SimulationSpec, SteeringOptions, VerificationReport};
use crate::control::{ExitClassifier, ExperimentOptions, FbsmOptions, DEFAULT_HORIZON};
use crate::dynamics::{flow, FlowOptions, Schedule, State, System, Trajectory, DEFAULT_ETA};
use crate::equilibria::{self, ComponentType, DEFAULT_DERIV_TOL};
use crate::error::{Error, Result};
use crate::landscape::{preset, EvolutionRate, Grid, Interaction, Landscape, Window};
use crate::ode::Tolerances;
use crate::omega::{self, OmegaCurve, OmegaOptions};

/// Either a preset name or the inline parameter arrays; `epsilon`,
/// `interaction` and `rate` override either.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    pub preset: Option<String>,
    pub r: Option<Vec<f64>>,
    pub g: Option<Vec<f64>>,
    pub u_bar: Option<Vec<f64>>,
    pub p: Option<[f64; 3]>,
    pub sigmoids: Option<Vec<[f64; 7]>>,
    pub epsilon: Option<f64>,
    pub interaction: Option<Interaction>,
    pub rate: Option<EvolutionRate>,
}

impl LandscapeSpec {
    /// Landscape plus the preset's default range, if any.
    pub fn build(&self) -> Result<(Landscape, Option<(f64, f64)>, Option<f64>)> {
        let inline = [self.r.is_some(), self.g.is_some(), self.u_bar.is_some(), self.p.is_some(), self.sigmoids.is_some()];
        let (mut l, range, max_dose) = match (&self.preset, inline.iter().any(|&b| b)) {
            (Some(_), true) => {
                return Err(Error::Config("landscape: give either 'preset' or inline arrays, not both".into()));
            }
            (Some(name), false) => {
                let p = preset(name)?;
                (p.landscape, Some(p.equilibrium_range), Some(p.max_dose))
            }
            (None, _) => {
                if !inline.iter().all(|&b| b) {
                    return Err(Error::Config(
                        "landscape: inline definitions need r, g, u_bar, p and sigmoids".into(),
                    ));
                }
                let l = Landscape::from_arrays(
                    self.r.as_deref().unwrap(),
                    self.g.as_deref().unwrap(),
                    self.u_bar.as_deref().unwrap(),
                    self.p.unwrap(),
                    self.sigmoids.as_deref().unwrap(),
                )?;
                (l, None, None)
            }
        };
        if let Some(e) = self.epsilon {
            l = l.with_epsilon(e);
        }
        if let Some(c) = self.interaction {
            l = l.with_interaction(c);
        }
        if let Some(k) = self.rate {
            l = l.with_rate(k);
        }
        l.validate()?;
        Ok((l, range, max_dose))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridsConfig {
    pub u: Option<Grid>,
    /// Dose grid of the hypothesis audit.
    pub a: Option<Grid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TolerancesConfig {
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub h_max: Option<f64>,
    pub deriv_tol: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OmegaConfig {
    pub n_margin: Option<f64>,
    pub seed_offset: Option<f64>,
    pub stop_radius: Option<f64>,
    pub closure_tol: Option<f64>,
    pub chord_tol: Option<f64>,
    pub max_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub x0: (f64, f64),
    /// `[[duration, dose], ...]`; the last dose is held until `horizon`.
    pub schedule: Vec<(f64, f64)>,
    pub horizon: Option<f64>,
    pub system: System,
    /// Stop once `n` drops below `eta` (reduced system).
    pub stop_at_e: bool,
    pub max_sample_dt: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            x0: (0.0, 0.5),
            schedule: Vec::new(),
            horizon: None,
            system: System::Reduced,
            stop_at_e: true,
            max_sample_dt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    AngleCondition,
    ForwardInvariance,
    Controllability,
    NoReturn,
    LimitSets,
    BDelta,
    CurativeSet,
}

impl Property {
    pub fn as_str(&self) -> &'static str {
        match self {
            Property::AngleCondition => "angle_condition",
            Property::ForwardInvariance => "forward_invariance",
            Property::Controllability => "controllability",
            Property::NoReturn => "no_return",
            Property::LimitSets => "limit_sets",
            Property::BDelta => "b_delta",
            Property::CurativeSet => "curative_set",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub property: Property,
    /// Target set (index into the components of `range`) for the
    /// set-based properties; defaults to the first set of a suitable type.
    pub component: Option<usize>,
    pub samples: usize,
    pub points: usize,
    pub schedules: usize,
    pub horizon: f64,
    pub pairs: usize,
    pub exits: usize,
    pub dilation: f64,
    pub band: f64,
    pub collar: Option<f64>,
    pub limit_tol: f64,
    pub final_fraction: f64,
    pub target_tol: f64,
    pub max_switches: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub curative_u: Option<Grid>,
    pub curative_n: Option<Grid>,
    pub curative_budget: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let rs = RandomScheduleSpec::default();
        VerifyConfig {
            property: Property::AngleCondition,
            component: None,
            samples: 10_000,
            points: 100,
            schedules: 50,
            horizon: 5.0e4,
            pairs: 50,
            exits: 100,
            dilation: 1e-6,
            band: 1e-3,
            collar: None,
            limit_tol: 1e-2,
            final_fraction: 0.2,
            target_tol: 1e-3,
            max_switches: rs.max_switches,
            min_duration: rs.min_duration,
            max_duration: rs.max_duration,
            curative_u: None,
            curative_n: None,
            curative_budget: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Inflation amounts; `[a- - delta, a+ + delta]` unless `ranges` is given.
    pub deltas: Vec<f64>,
    /// Explicit ranges, one per delta.
    pub ranges: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Initial states; each one gets its own experiment.
    pub starts: Vec<(f64, f64)>,
    pub horizon: f64,
    pub intervals: usize,
    pub tol_ctrl: f64,
    pub tol_shoot: f64,
    pub max_iter: usize,
    pub relax: f64,
    pub singular_tol: f64,
    pub max_cycles: usize,
    pub settle_cycles: usize,
    /// Repetitions of the final period's schedule.
    pub cycles: usize,
    pub continuation: f64,
    /// Exit-side split search: horizons to try (empty: skip), `u0` scan
    /// grid at `split_n0`, and bisection tolerance.
    pub split_horizons: Vec<f64>,
    pub split_u: Grid,
    pub split_n0: f64,
    pub split_tol: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let f = FbsmOptions::default();
        let e = ExperimentOptions::default();
        ControlConfig {
            starts: vec![(0.28587, 0.32)],
            horizon: DEFAULT_HORIZON,
            intervals: f.intervals,
            tol_ctrl: f.tol_ctrl,
            tol_shoot: f.tol_shoot,
            max_iter: f.max_iter,
            relax: f.relax,
            singular_tol: f.singular_tol,
            max_cycles: e.max_cycles,
            settle_cycles: e.settle_cycles,
            cycles: 10,
            continuation: e.continuation,
            split_horizons: Vec::new(),
            split_u: Grid::new(0.279, 0.293, 15),
            split_n0: 0.32,
            split_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Option<String>,
    pub landscape: LandscapeSpec,
    pub range: Option<(f64, f64)>,
    pub window: Option<Window>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub grids: GridsConfig,
    #[serde(default)]
    pub tolerances: TolerancesConfig,
    #[serde(default)]
    pub omega: OmegaConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub control: ControlConfig,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_preset(name: &str) -> Self {
        ScenarioConfig {
            name: Some(format!("preset-{name}")),
            landscape: LandscapeSpec {
                preset: Some(name.to_string()),
                ..LandscapeSpec::default()
            },
            ..ScenarioConfig::default()
        }
    }

    pub fn resolve(&self) -> Result<Scenario> {
        let (landscape, preset_range, max_dose) = self.landscape.build()?;
        let range = self
            .range
            .or(preset_range)
            .ok_or_else(|| Error::Config("'range' is required for inline landscapes".into()))?;
        if !(range.0.is_finite() && range.1.is_finite() && range.0 <= range.1 && range.0 >= 0.0) {
            return Err(Error::Config(format!("invalid dose range [{}, {}]", range.0, range.1)));
        }
        let window = self.window.unwrap_or_default();
        if !(window.u.0 < window.u.1 && window.n.0 < window.n.1) {
            return Err(Error::Config("window bounds must be increasing".into()));
        }
        let u_grid = self.grids.u.unwrap_or_else(equilibria::default_u_grid);
        let a_hi = max_dose.unwrap_or(range.1).max(range.1);
        let a_grid = self.grids.a.unwrap_or(Grid::new(0.0, a_hi, 101));
        for (g, what) in [(u_grid, "u"), (a_grid, "a")] {
            if !(g.points >= 2 && g.min < g.max) {
                return Err(Error::Config(format!("grid '{what}' needs at least two points and min < max")));
            }
        }
        let t = &self.tolerances;
        let mut tol = Tolerances::default();
        if let Some(r) = t.rtol {
            tol = tol.with_rtol(r);
        }
        if let Some(a) = t.atol {
            tol.atol = a;
        }
        if let Some(h) = t.h_max {
            tol = tol.with_h_max(h);
        }
        if !(tol.rtol > 0.0 && tol.atol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        let deriv_tol = t.deriv_tol.unwrap_or(DEFAULT_DERIV_TOL);
        let eta = t.eta.unwrap_or(DEFAULT_ETA);
        let d = OmegaOptions::default();
        let oc = &self.omega;
        let omega = OmegaOptions {
            tol,
            window,
            n_margin: oc.n_margin.unwrap_or(d.n_margin),
            seed_offset: oc.seed_offset.unwrap_or(d.seed_offset),
            stop_radius: oc.stop_radius.unwrap_or(d.stop_radius),
            closure_tol: oc.closure_tol.unwrap_or(d.closure_tol),
            chord_tol: oc.chord_tol.unwrap_or(d.chord_tol),
            max_time: oc.max_time.unwrap_or(d.max_time),
            eta,
            u_grid,
            deriv_tol,
        };
        if self.sweep.ranges.as_ref().is_some_and(|r| r.len() != self.sweep.deltas.len()) {
            return Err(Error::Config("sweep: 'ranges' must have one entry per delta".into()));
        }
        let v = &self.verify;
        if !(v.final_fraction > 0.0 && v.final_fraction <= 1.0) {
            return Err(Error::Config("verify.final_fraction must lie in (0, 1]".into()));
        }
        if !(v.min_duration > 0.0 && v.min_duration <= v.max_duration && v.max_switches >= 1) {
            return Err(Error::Config("verify: invalid random schedule parameters".into()));
        }
        let c = &self.control;
        if !(c.horizon > 0.0 && c.intervals > 0 && c.relax > 0.0 && c.relax <= 1.0) {
            return Err(Error::Config("control: horizon, intervals and relax must be positive (relax <= 1)".into()));
        }
        Ok(Scenario {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            landscape,
            range,
            window,
            u_grid,
            a_grid,
            tol,
            deriv_tol,
            eta,
            seed: self.seed.unwrap_or(0),
            omega,
            config: self.clone(),
        })
    }
}

/// Validated scenario ready for the commands.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub landscape: Landscape,
    pub range: (f64, f64),
    pub window: Window,
    pub u_grid: Grid,
    pub a_grid: Grid,
    pub tol: Tolerances,
    pub deriv_tol: f64,
    pub eta: f64,
    pub seed: u64,
    pub omega: OmegaOptions,
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn schedule_spec(&self) -> RandomScheduleSpec {
        let v = &self.config.verify;
        RandomScheduleSpec {
            max_switches: v.max_switches,
            min_duration: v.min_duration,
            max_duration: v.max_duration,
        }
    }

    pub fn simulation_spec(&self) -> SimulationSpec {
        let v = &self.config.verify;
        SimulationSpec {
            n_points: v.points,
            n_schedules: v.schedules,
            horizon: v.horizon,
            tol: self.tol,
            schedules: self.schedule_spec(),
            seed: self.seed,
        }
    }

    pub fn steering(&self) -> SteeringOptions {
        SteeringOptions {
            tol_target: self.config.verify.target_tol,
            orbit: self.omega,
            ..SteeringOptions::default()
        }
    }

    pub fn simulate_schedule(&self) -> Schedule {
        Schedule {
            segments: self.config.simulate.schedule.clone(),
        }
    }

    pub fn simulate_x0(&self) -> State {
        let (u, n) = self.config.simulate.x0;
        State::new(u, n)
    }

    pub fn experiment(&self) -> ExperimentOptions {
        let c = &self.config.control;
        ExperimentOptions {
            horizon: c.horizon,
            max_cycles: c.max_cycles,
            settle_cycles: c.settle_cycles,
            continuation: c.continuation,
            fbsm: FbsmOptions {
                intervals: c.intervals,
                tol_ctrl: c.tol_ctrl,
                tol_shoot: c.tol_shoot,
                max_iter: c.max_iter,
                max_shoot: FbsmOptions::default().max_shoot,
                relax: c.relax,
                singular_tol: c.singular_tol,
            },
        }
    }

    /// Runs the `[simulate]` section; `x0` and `horizon` override it.
    pub fn simulate(&self, x0: Option<State>, horizon: Option<f64>) -> Result<Trajectory> {
        let s = &self.config.simulate;
        let sched = self.simulate_schedule();
        sched.validate(self.range)?;
        let horizon = horizon.or(s.horizon).unwrap_or_else(|| sched.total_duration());
        if !(horizon > 0.0) {
            return Err(Error::Config("simulate: horizon must be positive (set it or give a schedule)".into()));
        }
        let mut opts = FlowOptions::new(s.system, horizon).with_tol(self.tol);
        if s.stop_at_e && s.system == System::Reduced {
            opts = opts.stop_below(self.eta);
        }
        if let Some(dt) = s.max_sample_dt {
            opts = opts.with_max_sample_dt(dt);
        }
        flow(x0.unwrap_or_else(|| self.simulate_x0()), &sched, &self.landscape, &opts)
    }

    fn pick<'a>(&self, curves: &'a [OmegaCurve], accept: impl Fn(&OmegaCurve) -> bool, what: &str) -> Result<&'a OmegaCurve> {
        match self.config.verify.component {
            Some(i) => curves
                .iter()
                .find(|c| c.component.id == i)
                .ok_or_else(|| Error::Config(format!("verify: no component with id {i}"))),
            None => curves
                .iter()
                .find(|c| accept(c))
                .ok_or_else(|| Error::Config(format!("verify: the range has no {what} set"))),
        }
    }

    /// Runs one randomized check with the `[verify]` settings. Set-based
    /// properties use `verify.component`, or the first set of a fitting type.
    pub fn verify(&self, property: Property) -> Result<Verification> {
        let l = &self.landscape;
        let v = &self.config.verify;
        let spec = self.simulation_spec();
        let curves = || omega::build_all(self.range, l, &self.omega);
        let report = match property {
            Property::AngleCondition => analysis::verify_angle_condition(l, &self.window, self.range, v.samples, v.band, self.seed)?,
            Property::ForwardInvariance => {
                let cs = curves()?;
                let om = self.pick(&cs, |c| c.kind == ComponentType::NodeNode, "node-type")?;
                analysis::verify_forward_invariance(om, l, &spec, v.dilation)?
            }
            Property::Controllability => {
                let cs = curves()?;
                let om = self.pick(&cs, |_| true, "controllable")?;
                analysis::verify_controllability(om, l, v.pairs, &self.steering(), self.seed)?
            }
            Property::NoReturn => {
                let cs = curves()?;
                let om = self.pick(&cs, |c| c.kind != ComponentType::NodeNode, "saddle-type")?;
                let others: Vec<OmegaCurve> = cs.iter().filter(|c| c.component.id != om.component.id).cloned().collect();
                analysis::verify_no_return(om, &others, l, v.exits, &spec, v.dilation)?
            }
            Property::LimitSets => {
                let cs = curves()?;
                analysis::verify_limit_sets(l, &self.window, &cs, &spec, v.limit_tol, v.final_fraction, self.eta)?
            }
            Property::BDelta => {
                let collar = v.collar.unwrap_or_else(|| analysis::default_collar(l));
                analysis::verify_b_delta_invariance(l, &self.window, self.range, &spec, collar)?
            }
            Property::CurativeSet => {
                let ug = v.curative_u.unwrap_or(Grid::new(self.window.u.0, self.window.u.1, 81));
                let ng = v.curative_n.unwrap_or(Grid::new(self.window.n.0, self.window.n.1, 49));
                let field = analysis::estimate_curative_set(l, self.range, &ug, &ng, v.curative_budget, &spec, self.eta)?;
                return Ok(Verification::Curative(field));
            }
        };
        Ok(Verification::Report(report))
    }

    /// Exit classifier on the first saddle-type set of `range`.
    pub fn exit_classifier(&self) -> Result<ExitClassifier> {
        let curves = omega::build_all(self.range, &self.landscape, &self.omega)?;
        let saddle = curves
            .into_iter()
            .find(|o| o.kind != ComponentType::NodeNode)
            .ok_or_else(|| Error::Config("control: exit classification needs a saddle-type set in the range".into()))?;
        ExitClassifier::new(saddle)
    }
}

/// Result of [`Scenario::verify`]. The curative set is an estimate and has
/// no pass/fail verdict.
#[derive(Debug, Clone)]
pub enum Verification {
    Report(VerificationReport),
    Curative(CurativeField),
}
