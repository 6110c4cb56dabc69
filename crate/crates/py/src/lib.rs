//! Python module `coevo`. Structured results (reports, summaries, component
//! lists) come back as plain dicts and lists.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use coevo::analysis::{self, Steering};
use coevo::config::{Property, Scenario, ScenarioConfig, Verification};
use coevo::control::{self, FbsmOptions};
use coevo::dynamics::{self, flow, FlowOptions, Schedule, State, System, Trajectory};
use coevo::equilibria::{self, ComponentType, DEFAULT_DERIV_TOL};
use coevo::geometry::PolygonIndex;
use coevo::landscape::{self, Grid, Landscape};
use coevo::ode::Tolerances;
use coevo::omega::{self, OmegaCurve, OmegaOptions};
use coevo::Error;

create_exception!(coevo, CoevoError, PyException, "Base class of coevo errors.");
create_exception!(coevo, ConfigError, CoevoError, "Invalid configuration, parameters or schedule.");
create_exception!(coevo, HypothesisError, CoevoError, "A structural hypothesis does not hold.");
create_exception!(coevo, NumericalError, CoevoError, "Integration, continuation or shooting failed.");

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::InvalidLandscape(_) | Error::InvalidSchedule(_) | Error::Io(_) | Error::Json(_) => ConfigError::new_err(msg),
        Error::H3Violation { .. } | Error::NonPositiveInteraction { .. } | Error::NotHyperbolic { .. } => HypothesisError::new_err(msg),
        _ => NumericalError::new_err(msg),
    }
}

trait Py3<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> Py3<T> for coevo::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Serializable value to Python objects via `json.loads`.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| NumericalError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_system(s: &str) -> PyResult<System> {
    match s {
        "reduced" => Ok(System::Reduced),
        "full" => Ok(System::Full),
        _ => Err(ConfigError::new_err(format!("system must be 'reduced' or 'full', got '{s}'"))),
    }
}

fn parse_property(s: &str) -> PyResult<Property> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| ConfigError::new_err(format!("unknown property '{s}'")))
}

/// Fitness landscape with treatment; see `Landscape.preset`.
#[pyclass(name = "Landscape", module = "coevo", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLandscape {
    inner: Landscape,
    range: Option<(f64, f64)>,
}

#[pymethods]
impl PyLandscape {
    /// Built-in landscape by name.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let p = landscape::preset(name).py()?;
        Ok(PyLandscape {
            inner: p.landscape,
            range: Some(p.equilibrium_range),
        })
    }

    /// Same landscape with another time-scale separation.
    fn with_epsilon(&self, epsilon: f64) -> PyResult<Self> {
        let l = self.inner.clone().with_epsilon(epsilon);
        l.validate().py()?;
        Ok(PyLandscape { inner: l, range: self.range })
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    /// Dose range that came with the preset, if any.
    #[getter]
    fn default_range(&self) -> Option<(f64, f64)> {
        self.range
    }

    fn b0(&self, u: f64) -> f64 {
        self.inner.b0(u)
    }

    fn b1(&self, u: f64) -> f64 {
        self.inner.b1(u)
    }

    fn c(&self, u: f64) -> f64 {
        self.inner.c(u)
    }

    fn h(&self, u: f64, a: f64) -> PyResult<f64> {
        self.inner.h(u, a).py()
    }

    /// Dose that makes `u` an equilibrium trait.
    fn a_star(&self, u: f64) -> PyResult<f64> {
        equilibria::a_star(u, &self.inner).py()
    }

    /// Equilibrium population at trait `u`.
    fn h_star(&self, u: f64) -> PyResult<f64> {
        equilibria::h_star(u, &self.inner).py()
    }

    /// 'stable_node', 'saddle' or 'fold_candidate'.
    fn classify(&self, u: f64) -> PyResult<&'static str> {
        Ok(equilibria::classify(u, &self.inner, DEFAULT_DERIV_TOL).py()?.as_str())
    }

    #[pyo3(signature = (u, n, a, system = "reduced"))]
    fn field(&self, u: f64, n: f64, a: f64, system: &str) -> PyResult<(f64, f64)> {
        let v = dynamics::field(parse_system(system)?, State::new(u, n), a, &self.inner).py()?;
        Ok((v[0], v[1]))
    }

    /// Hypothesis audit on `u` and dose grids.
    #[pyo3(signature = (u_min = -0.5, u_max = 1.5, u_points = 2001, a_max = 2.0, a_points = 101))]
    fn check_hypotheses(&self, py: Python<'_>, u_min: f64, u_max: f64, u_points: usize, a_max: f64, a_points: usize) -> PyResult<Py<PyAny>> {
        let rep = landscape::check_hypotheses(&self.inner, &Grid::new(u_min, u_max, u_points), &Grid::new(0.0, a_max, a_points));
        to_py(py, &rep)
    }

    /// Connected components of the feasible equilibria for doses in `[a_lo, a_hi]`.
    fn components(&self, py: Python<'_>, a_lo: f64, a_hi: f64) -> PyResult<Py<PyAny>> {
        let comps = equilibria::components((a_lo, a_hi), &self.inner, &equilibria::default_u_grid(), DEFAULT_DERIV_TOL).py()?;
        to_py(py, &comps)
    }

    /// Controllable sets for doses in `[a_lo, a_hi]`.
    fn omega(&self, py: Python<'_>, a_lo: f64, a_hi: f64) -> PyResult<Vec<PyOmega>> {
        let l = self.inner.clone();
        let curves = py
            .detach(|| omega::build_all((a_lo, a_hi), &l, &OmegaOptions::default()))
            .py()?;
        Ok(curves.into_iter().map(|c| PyOmega::new(c, self.inner.clone())).collect())
    }

    /// Integrates from `x0` under `schedule = [(duration, dose), ...]`. The
    /// last dose is held until `horizon`. Doses are checked against
    /// `dose_range`, which defaults to the preset range.
    #[pyo3(signature = (x0, schedule, horizon = None, system = "reduced", rtol = None, stop_below = None, dose_range = None))]
    fn simulate(
        &self,
        py: Python<'_>,
        x0: (f64, f64),
        schedule: Vec<(f64, f64)>,
        horizon: Option<f64>,
        system: &str,
        rtol: Option<f64>,
        stop_below: Option<f64>,
        dose_range: Option<(f64, f64)>,
    ) -> PyResult<PyTrajectory> {
        let sched = Schedule { segments: schedule };
        sched.validate(dose_range.or(self.range).unwrap_or((0.0, f64::INFINITY))).py()?;
        let horizon = horizon.unwrap_or_else(|| sched.total_duration());
        if !(horizon > 0.0) {
            return Err(ConfigError::new_err("horizon must be positive"));
        }
        let mut tol = Tolerances::default();
        if let Some(r) = rtol {
            tol = tol.with_rtol(r);
        }
        let mut opts = FlowOptions::new(parse_system(system)?, horizon).with_tol(tol);
        if let Some(eta) = stop_below {
            opts = opts.stop_below(eta);
        }
        let l = self.inner.clone();
        let tr = py.detach(|| flow(State::new(x0.0, x0.1), &sched, &l, &opts)).py()?;
        Ok(PyTrajectory { inner: tr })
    }

    /// L1-optimal dosing over one period with `n(T) = n(0)`.
    #[pyo3(signature = (x0, horizon, a_lo, a_hi, intervals = 3000))]
    fn fbsm(&self, py: Python<'_>, x0: (f64, f64), horizon: f64, a_lo: f64, a_hi: f64, intervals: usize) -> PyResult<Py<PyAny>> {
        let o = FbsmOptions {
            intervals,
            ..FbsmOptions::default()
        };
        let l = self.inner.clone();
        let run = py
            .detach(|| control::fbsm_solve(State::new(x0.0, x0.1), horizon, (a_lo, a_hi), &l, &o))
            .py()?;
        #[derive(Serialize)]
        struct Out<'a> {
            summary: control::RunSummary,
            t: &'a [f64],
            alpha: &'a [f64],
            u: Vec<f64>,
            n: Vec<f64>,
        }
        to_py(
            py,
            &Out {
                summary: run.summary(),
                t: &run.times,
                alpha: &run.doses,
                u: run.states.iter().map(|s| s.u).collect(),
                n: run.states.iter().map(|s| s.n).collect(),
            },
        )
    }

    fn __repr__(&self) -> String {
        format!("Landscape(epsilon={})", self.inner.epsilon)
    }
}

/// Sampled solution. Sample `i` carries the dose active on `[t_i, t_{i+1})`.
#[pyclass(name = "Trajectory", module = "coevo", frozen)]
struct PyTrajectory {
    inner: Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn t(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| s.u).collect()
    }

    #[getter]
    fn n(&self) -> Vec<f64> {
        self.inner.states.iter().map(|s| s.n).collect()
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.doses.clone()
    }

    /// 'horizon', 'hit_e' or 'left_window'.
    #[getter]
    fn status(&self) -> &'static str {
        match self.inner.status {
            dynamics::TerminalStatus::Horizon => "horizon",
            dynamics::TerminalStatus::HitE => "hit_e",
            dynamics::TerminalStatus::LeftWindow => "left_window",
        }
    }

    fn end(&self) -> (f64, f64) {
        let s = self.inner.last();
        (s.u, s.n)
    }

    /// CSV text with header `t,u,n,a`.
    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).py()?;
        Ok(String::from_utf8(buf).expect("csv is ascii"))
    }

    fn __len__(&self) -> usize {
        self.inner.times.len()
    }
}

/// Boundary of one controllable set, counter-clockwise.
#[pyclass(name = "OmegaSet", module = "coevo", frozen)]
struct PyOmega {
    curve: OmegaCurve,
    index: PolygonIndex,
    landscape: Landscape,
}

impl PyOmega {
    fn new(curve: OmegaCurve, landscape: Landscape) -> Self {
        let index = curve.index();
        PyOmega { curve, index, landscape }
    }
}

#[pymethods]
impl PyOmega {
    /// 1 node-node, 2 saddle-saddle, 3 node-saddle.
    #[getter]
    fn kind(&self) -> u8 {
        self.curve.kind.number()
    }

    #[getter]
    fn component_id(&self) -> usize {
        self.curve.component.id
    }

    #[getter]
    fn area(&self) -> f64 {
        self.curve.area
    }

    #[getter]
    fn vertices(&self) -> Vec<(f64, f64)> {
        self.curve.points.iter().map(|s| (s.u, s.n)).collect()
    }

    fn contains(&self, u: f64, n: f64) -> bool {
        self.index.contains(State::new(u, n))
    }

    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.curve.summary())
    }

    /// CSV text of the boundary with the provenance of every vertex.
    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.curve.write_csv(&mut buf).py()?;
        Ok(String::from_utf8(buf).expect("csv is ascii"))
    }

    /// Two-dose schedule from `x0` to `x1` inside the set, as
    /// `[(duration, dose), ...]`, or None when the construction misses.
    #[pyo3(signature = (x0, x1, tol = 1e-3))]
    fn steer(&self, py: Python<'_>, x0: (f64, f64), x1: (f64, f64), tol: f64) -> PyResult<Option<Vec<(f64, f64)>>> {
        let so = analysis::SteeringOptions {
            tol_target: tol,
            ..Default::default()
        };
        let r = py
            .detach(|| analysis::steer(&self.curve, &self.index, State::new(x0.0, x0.1), State::new(x1.0, x1.1), &self.landscape, &so))
            .py()?;
        match r {
            Steering::Reached { schedule, .. } => Ok(Some(schedule.segments)),
            Steering::Missed { .. } => Ok(None),
            Steering::NotQualifying(m) => Err(ConfigError::new_err(m)),
            Steering::Failed(m) => Err(NumericalError::new_err(m)),
        }
    }

    fn __repr__(&self) -> String {
        format!("OmegaSet(kind={}, vertices={})", self.kind(), self.curve.points.len())
    }
}

/// Resolved scenario file; mirrors the `coevo` command line.
#[pyclass(name = "Scenario", module = "coevo", frozen)]
struct PyScenario {
    inner: Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = ScenarioConfig::from_toml(text).py()?.resolve().py()?;
        Ok(PyScenario { inner })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let inner = ScenarioConfig::from_preset(name).resolve().py()?;
        Ok(PyScenario { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn range(&self) -> (f64, f64) {
        self.inner.range
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn landscape(&self) -> PyLandscape {
        PyLandscape {
            inner: self.inner.landscape.clone(),
            range: Some(self.inner.range),
        }
    }

    fn check(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = &self.inner;
        to_py(py, &landscape::check_hypotheses(&s.landscape, &s.u_grid, &s.a_grid))
    }

    fn components(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = &self.inner;
        to_py(py, &equilibria::components(s.range, &s.landscape, &s.u_grid, s.deriv_tol).py()?)
    }

    fn omega(&self, py: Python<'_>) -> PyResult<Vec<PyOmega>> {
        let s = &self.inner;
        let curves = py.detach(|| omega::build_all(s.range, &s.landscape, &s.omega)).py()?;
        Ok(curves.into_iter().map(|c| PyOmega::new(c, s.landscape.clone())).collect())
    }

    #[pyo3(signature = (x0 = None, horizon = None))]
    fn simulate(&self, py: Python<'_>, x0: Option<(f64, f64)>, horizon: Option<f64>) -> PyResult<PyTrajectory> {
        let s = &self.inner;
        let tr = py.detach(|| s.simulate(x0.map(|(u, n)| State::new(u, n)), horizon)).py()?;
        Ok(PyTrajectory { inner: tr })
    }

    /// Report dict for one property; `curative_set` gives the marked grid.
    #[pyo3(signature = (property = None))]
    fn verify(&self, py: Python<'_>, property: Option<&str>) -> PyResult<Py<PyAny>> {
        let p = match property {
            Some(p) => parse_property(p)?,
            None => self.inner.config.verify.property,
        };
        let s = &self.inner;
        match py.detach(|| s.verify(p)).py()? {
            Verification::Report(r) => to_py(py, &r),
            Verification::Curative(f) => to_py(py, &f),
        }
    }

    fn sweep(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let s = &self.inner;
        let c = &s.config.sweep;
        let res = py
            .detach(|| match &c.ranges {
                Some(r) => analysis::sweep_ranges(&s.landscape, s.range, &c.deltas, r, &s.omega),
                None => analysis::bifurcation_sweep(&s.landscape, s.range, &c.deltas, &s.omega),
            })
            .py()?;
        to_py(py, &res)
    }

    /// Periodic optimal dosing from `(u, n)` until the state leaves the
    /// saddle-type set; summary dict with `exit` of 'left', 'right' or 'none'.
    fn experiment(&self, py: Python<'_>, u: f64, n: f64) -> PyResult<Py<PyAny>> {
        let s = &self.inner;
        let ex = py
            .detach(|| {
                let cls = s.exit_classifier()?;
                control::control_experiment(State::new(u, n), s.range, &s.landscape, &cls, &s.experiment())
            })
            .py()?;
        to_py(py, &ex.summary())
    }
}

/// Type number of a component kind name, for convenience in scripts.
#[pyfunction]
fn component_type(name: &str) -> PyResult<u8> {
    let t = match name {
        "node_node" => ComponentType::NodeNode,
        "saddle_saddle" => ComponentType::SaddleSaddle,
        "node_saddle" => ComponentType::NodeSaddle,
        _ => return Err(ConfigError::new_err(format!("unknown component type '{name}'"))),
    };
    Ok(t.number())
}

#[pymodule]
#[pyo3(name = "coevo")]
fn coevo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyLandscape>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyOmega>()?;
    m.add_class::<PyScenario>()?;
    m.add_function(wrap_pyfunction!(component_type, m)?)?;
    m.add("CoevoError", py.get_type::<CoevoError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("HypothesisError", py.get_type::<HypothesisError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_parsing() {
        assert_eq!(parse_system("full").unwrap(), System::Full);
        assert!(parse_system("other").is_err());
        assert_eq!(parse_property("limit-sets").unwrap(), Property::LimitSets);
        assert!(parse_property("x").is_err());
    }
}
