//! Randomized and sweep-based verification of the structural results:
//! angle condition, invariance and controllability of the enclosed sets,
//! no-return, curative-set estimates, limit sets, the band `B_delta` and
//! bifurcations of controllable sets under range inflation.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{self, dot, f_full, flow, flow_observe, perp, FlowOptions, Schedule, State, System, TerminalStatus};
use crate::equilibria::{self, ComponentType, Label};
use crate::error::{Error, Result};
use crate::geometry::{self, PolygonIndex};
use crate::landscape::{Grid, Landscape, Window};
use crate::ode::Tolerances;
use crate::omega::{self, OmegaCurve, OmegaOptions, OmegaSummary, TraceEnd};

const MAX_COUNTEREXAMPLES: usize = 20;

/// Replayable failure: start, schedule, and where/when it went wrong.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub x0: State,
    pub state: State,
    pub time: f64,
    pub schedule: Schedule,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub property: String,
    pub seed: u64,
    /// Samples drawn.
    pub samples: usize,
    /// Samples that entered the test (after exclusions).
    pub checked: usize,
    pub violations: usize,
    pub passed: bool,
    /// Violations are expected here and do not fail the report.
    pub informative: bool,
    pub counterexamples: Vec<Counterexample>,
    pub tolerances: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl VerificationReport {
    fn new(property: &str, seed: u64) -> Self {
        VerificationReport {
            property: property.to_string(),
            seed,
            samples: 0,
            checked: 0,
            violations: 0,
            passed: true,
            informative: false,
            counterexamples: Vec::new(),
            tolerances: BTreeMap::new(),
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn tol(mut self, k: &str, v: f64) -> Self {
        self.tolerances.insert(k.to_string(), v);
        self
    }

    fn violation(&mut self, c: Counterexample) {
        self.violations += 1;
        if self.counterexamples.len() < MAX_COUNTEREXAMPLES {
            self.counterexamples.push(c);
        }
    }

    fn finish(mut self) -> Self {
        self.passed = self.informative || self.violations == 0;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Independent generator per task so results do not depend on scheduling.
pub fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RandomScheduleSpec {
    pub max_switches: usize,
    pub min_duration: f64,
    pub max_duration: f64,
}

impl Default for RandomScheduleSpec {
    fn default() -> Self {
        RandomScheduleSpec {
            max_switches: 20,
            min_duration: 0.1,
            max_duration: 50.0,
        }
    }
}

/// `k` switches with `k` uniform in `1..=max_switches`, log-uniform
/// durations and uniform doses.
pub fn random_schedule<R: Rng>(rng: &mut R, range: (f64, f64), spec: &RandomScheduleSpec) -> Schedule {
    let k = rng.gen_range(1..=spec.max_switches.max(1));
    let (lo, hi) = (spec.min_duration.ln(), spec.max_duration.ln());
    let segments = (0..=k)
        .map(|_| {
            let d = rng.gen_range(lo..=hi).exp();
            let a = if range.1 > range.0 { rng.gen_range(range.0..=range.1) } else { range.0 };
            (d, a)
        })
        .collect();
    Schedule { segments }
}

fn sample_window<R: Rng>(rng: &mut R, w: &Window) -> State {
    State::new(rng.gen_range(w.u.0..=w.u.1), rng.gen_range(w.n.0..=w.n.1))
}

/// Uniform point of the enclosed set at least `margin` from its boundary.
fn sample_inside<R: Rng>(rng: &mut R, idx: &PolygonIndex, margin: f64) -> Option<State> {
    let v = idx.vertices();
    let (mut u0, mut u1, mut n0, mut n1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in v {
        u0 = u0.min(p.u);
        u1 = u1.max(p.u);
        n0 = n0.min(p.n);
        n1 = n1.max(p.n);
    }
    for _ in 0..100_000 {
        let x = State::new(rng.gen_range(u0..=u1), rng.gen_range(n0..=n1));
        if idx.contains(x) && idx.boundary_distance(x) > margin {
            return Some(x);
        }
    }
    None
}

/// `h*` from the closed form without the H3 guard, so that regions where H3
/// fails show up as sign violations instead of errors.
fn h_star_raw(u: f64, l: &Landscape) -> Option<f64> {
    let b0 = l.b0_jet(u);
    let b1 = l.b1_jet(u);
    let c = l.c_jet(u);
    let d = b1.d1 * c.v - c.d1 * b1.v;
    if d == 0.0 {
        None
    } else {
        Some((b0.v * b1.d1 - b0.d1 * b1.v) / d)
    }
}

/// Sign relation between extremal fields off a band around `H*`.
pub fn verify_angle_condition(
    l: &Landscape,
    window: &Window,
    range: (f64, f64),
    n_samples: usize,
    band: f64,
    seed: u64,
) -> Result<VerificationReport> {
    const MAX_REDRAWS: usize = 1000;
    let mut rep = VerificationReport::new("angle_condition", seed).tol("band", band);
    let redrawn = AtomicUsize::new(0);
    let results: Vec<Option<(bool, Counterexample)>> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(seed, i as u64);
            // redraw inside the band; gives up only for a band covering the window
            let (x, a1, a2, hs, redraws) = (0..MAX_REDRAWS).find_map(|k| {
                let mut x = sample_window(&mut rng, window);
                if x.n <= 0.0 {
                    x.n = f64::MIN_POSITIVE;
                }
                let a1 = rng.gen_range(range.0..=range.1);
                let a2 = rng.gen_range(range.0..=range.1);
                let (a1, a2) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
                let hs = h_star_raw(x.u, l)?;
                (a1 != a2 && (x.n - hs).abs() > band).then_some((x, a1, a2, hs, k))
            })?;
            redrawn.fetch_add(redraws, Ordering::Relaxed);
            let f1 = f_full(x, a1, l).ok()?;
            let f2 = f_full(x, a2, l).ok()?;
            let s12 = dot(perp(f1), f2);
            let s21 = dot(perp(f2), f1);
            let expect = (x.n - hs).signum();
            let ok = s12.signum() == expect && s21.signum() == -expect;
            Some((
                ok,
                Counterexample {
                    x0: x,
                    state: x,
                    time: 0.0,
                    schedule: Schedule {
                        segments: vec![(0.0, a1), (0.0, a2)],
                    },
                    detail: format!("<f(x,a1)^perp, f(x,a2)> = {s12:e}, n - h* = {:e}", x.n - hs),
                },
            ))
        })
        .collect();
    rep.samples = n_samples;
    for r in results.into_iter().flatten() {
        rep.checked += 1;
        if !r.0 {
            rep.violation(r.1);
        }
    }
    rep.metrics.insert("excluded".into(), (rep.samples - rep.checked) as f64);
    rep.metrics.insert("redrawn_in_band".into(), redrawn.into_inner() as f64);
    Ok(rep.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationSpec {
    pub n_points: usize,
    pub n_schedules: usize,
    pub horizon: f64,
    pub tol: Tolerances,
    pub schedules: RandomScheduleSpec,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn new(n_points: usize, n_schedules: usize, horizon: f64, seed: u64) -> Self {
        SimulationSpec {
            n_points,
            n_schedules,
            horizon,
            tol: Tolerances::default(),
            schedules: RandomScheduleSpec::default(),
            seed,
        }
    }

    pub fn with_tol(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }
}

/// Random interior points under random schedules never leave the enclosed
/// set by more than `dilation`. Escapes from type-2/3 sets are expected and
/// reported as informative.
pub fn verify_forward_invariance(
    omega: &OmegaCurve,
    l: &Landscape,
    spec: &SimulationSpec,
    dilation: f64,
) -> Result<VerificationReport> {
    let mut rep = VerificationReport::new("forward_invariance", spec.seed)
        .tol("dilation", dilation)
        .tol("rtol", spec.tol.rtol)
        .tol("horizon", spec.horizon);
    rep.informative = omega.kind != ComponentType::NodeNode;
    if rep.informative {
        rep.notes
            .push("set is not of node type; escapes through stable-manifold pieces are expected".into());
    }
    let idx = omega.index();
    let range = omega.component.range;
    let points: Vec<State> = (0..spec.n_points)
        .map(|i| sample_inside(&mut task_rng(spec.seed, i as u64), &idx, dilation))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Orbit("could not sample interior points".into()))?;
    let jobs: Vec<(usize, usize)> = (0..spec.n_points)
        .flat_map(|i| (0..spec.n_schedules).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<Option<Counterexample>>> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let mut rng = task_rng(spec.seed ^ 0x5eed, (i * spec.n_schedules + j) as u64);
            let sched = random_schedule(&mut rng, range, &spec.schedules).cycled(spec.horizon);
            let mut worst = 0.0f64;
            let ob = flow_observe(points[i], &sched, l, System::Reduced, &spec.tol, spec.horizon, 2, |_, x| {
                if idx.contains(x) {
                    return false;
                }
                let d = idx.boundary_distance(x);
                worst = worst.max(d);
                d > dilation
            })?;
            Ok(ob.stopped.then(|| Counterexample {
                x0: points[i],
                state: ob.x,
                time: ob.t,
                schedule: sched.clone(),
                detail: format!("left the set by {worst:e}"),
            }))
        })
        .collect();
    rep.samples = jobs.len();
    for r in results {
        rep.checked += 1;
        if let Some(c) = r? {
            rep.violation(c);
        }
    }
    rep.metrics.insert("escapes".into(), rep.violations as f64);
    Ok(rep.finish())
}

/// Three-dose recipe: follow dose `d1`, switch to `d2` near the boundary,
/// intercept the backward `d1`-orbit of the target, and ride it in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Steering {
    Reached { schedule: Schedule, error: f64 },
    Missed { schedule: Schedule, error: f64 },
    /// The backward orbit of the target does not leave the set inside the window.
    NotQualifying(String),
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteeringOptions {
    pub tol_target: f64,
    /// Distance to the attracting corner (type 1) or arc length before the
    /// exit point (types 2/3) at which the first switch happens.
    pub switch_radius: f64,
    /// Distance outside the set that counts as having left it.
    pub exit_tol: f64,
    pub orbit: OmegaOptions,
}

impl Default for SteeringOptions {
    fn default() -> Self {
        SteeringOptions {
            tol_target: 1e-3,
            switch_radius: 1e-5,
            exit_tol: 1e-7,
            orbit: OmegaOptions::default(),
        }
    }
}

fn steering_doses(omega: &OmegaCurve) -> (f64, f64) {
    let (lo, hi) = omega.component.range;
    let c = &omega.component;
    // Mirrored node-saddle sets (both endpoints at the upper dose) are
    // steered with the roles of the extremal doses swapped.
    if omega.kind == ComponentType::NodeSaddle && c.left.dose == hi && c.right.dose == hi {
        (lo, hi)
    } else {
        (hi, lo)
    }
}

/// Time at arc length `r` before the point where `tr` first leaves the
/// region (vertices are too sparse along slow manifolds to back off from
/// the last one).
fn back_off_exit(tr: &omega::Traced, outside: impl Fn(&State) -> bool, r: f64) -> f64 {
    let pts = &tr.points;
    let lerp = |a: State, b: State, s: f64| State::new(a.u + s * (b.u - a.u), a.n + s * (b.n - a.n));
    let Some(k) = (1..pts.len()).find(|&k| outside(&pts[k])) else {
        return *tr.times.last().unwrap();
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if !outside(&lerp(pts[k - 1], pts[k], mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // walk back from the exit point
    let mut acc = lo * pts[k].dist(pts[k - 1]);
    if acc >= r {
        return tr.time_at(k - 1, lo - r / pts[k].dist(pts[k - 1]));
    }
    for j in (1..k).rev() {
        let seg = pts[j].dist(pts[j - 1]);
        if acc + seg >= r {
            return tr.time_at(j - 1, 1.0 - (r - acc) / seg);
        }
        acc += seg;
    }
    tr.times[0]
}

fn endpoint_at(omega: &OmegaCurve, dose: f64) -> State {
    let c = &omega.component;
    if c.left.dose == dose {
        c.left.state
    } else {
        c.right.state
    }
}

pub fn steer(omega: &OmegaCurve, idx: &PolygonIndex, x0: State, x1: State, l: &Landscape, so: &SteeringOptions) -> Result<Steering> {
    if x0.dist(x1) <= so.tol_target {
        return Ok(Steering::Reached {
            schedule: Schedule::default(),
            error: x0.dist(x1),
        });
    }
    let o = &so.orbit;
    let (d1, d2) = steering_doses(omega);
    let outside = |x: &State, by: f64| !idx.contains(*x) && idx.boundary_distance(*x) > by;

    let gamma = omega::trace_orbit(x1, d1, true, l, o, |_, x| outside(x, 100.0 * so.exit_tol))?;
    if gamma.end != TraceEnd::Stopped {
        return Ok(Steering::NotQualifying(format!(
            "backward orbit of the target ended with {:?} before leaving the set",
            gamma.end
        )));
    }

    let node = endpoint_at(omega, d1);
    let t1 = if omega.kind == ComponentType::NodeNode {
        let tr = omega::trace_orbit(x0, d1, false, l, o, |_, x| x.dist(node) < so.switch_radius)?;
        if tr.end != TraceEnd::Stopped {
            return Ok(Steering::Failed(format!("first phase ended with {:?}", tr.end)));
        }
        *tr.times.last().unwrap()
    } else {
        let tr = omega::trace_orbit(x0, d1, false, l, o, |_, x| outside(x, so.exit_tol))?;
        if tr.end != TraceEnd::Stopped {
            return Ok(Steering::Failed(format!("first phase did not leave the set ({:?})", tr.end)));
        }
        back_off_exit(&tr, |x| outside(x, so.exit_tol), so.switch_radius)
    };
    let run = |sched: &Schedule, horizon: f64| -> Result<State> {
        Ok(flow(x0, sched, l, &FlowOptions::new(System::Reduced, horizon).with_tol(o.tol))?.last())
    };
    let x_switch = run(&Schedule::constant(d1, t1), t1)?;

    let attract = omega::attractors(d2, l, o)?;
    let phase2 = omega::trace_orbit(x_switch, d2, false, l, o, |_, x| {
        outside(x, so.exit_tol) || attract.iter().any(|p| p.dist(*x) < o.stop_radius)
    })?;
    let Some((i, t, j, s, _)) = geometry::first_crossing(&phase2.points, &gamma.points) else {
        return Ok(Steering::Failed(format!(
            "second phase from ({}, {}) ended with {:?} at ({}, {}) without crossing the backward orbit of the target",
            x_switch.u,
            x_switch.n,
            phase2.end,
            phase2.points.last().map_or(f64::NAN, |p| p.u),
            phase2.points.last().map_or(f64::NAN, |p| p.n),
        )));
    };
    let t2 = phase2.time_at(i, t);
    let tau = gamma.time_at(j, s);
    let schedule = Schedule {
        segments: vec![(t1, d1), (t2, d2), (tau, d1)],
    };
    let end = run(&schedule, t1 + t2 + tau)?;
    let error = end.dist(x1);
    Ok(if error <= so.tol_target {
        Steering::Reached { schedule, error }
    } else {
        Steering::Missed { schedule, error }
    })
}

/// Random pairs in the enclosed set are connected by the constructive
/// three-phase strategy.
pub fn verify_controllability(
    omega: &OmegaCurve,
    l: &Landscape,
    pairs: usize,
    so: &SteeringOptions,
    seed: u64,
) -> Result<VerificationReport> {
    let mut rep = VerificationReport::new("controllability", seed)
        .tol("tol_target", so.tol_target)
        .tol("switch_radius", so.switch_radius);
    let idx = omega.index();
    let results: Vec<Result<(State, State, Steering)>> = (0..pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(seed, i as u64);
            let x0 = sample_inside(&mut rng, &idx, 1e-6).ok_or_else(|| Error::Orbit("sampling failed".into()))?;
            let x1 = sample_inside(&mut rng, &idx, 1e-6).ok_or_else(|| Error::Orbit("sampling failed".into()))?;
            Ok((x0, x1, steer(omega, &idx, x0, x1, l, so)?))
        })
        .collect();
    rep.samples = pairs;
    let mut non_qualifying = 0usize;
    let mut worst = 0.0f64;
    for r in results {
        let (x0, x1, st) = r?;
        match st {
            Steering::Reached { error, .. } => {
                rep.checked += 1;
                worst = worst.max(error);
            }
            Steering::Missed { schedule, error } => {
                rep.checked += 1;
                worst = worst.max(error);
                rep.violation(Counterexample {
                    x0,
                    state: x1,
                    time: schedule.total_duration(),
                    schedule,
                    detail: format!("missed target by {error:e}"),
                });
            }
            Steering::Failed(msg) => {
                rep.checked += 1;
                rep.violation(Counterexample {
                    x0,
                    state: x1,
                    time: 0.0,
                    schedule: Schedule::default(),
                    detail: msg,
                });
            }
            Steering::NotQualifying(msg) => {
                non_qualifying += 1;
                rep.notes.push(format!("non-qualifying pair ({}, {}) -> ({}, {}): {msg}", x0.u, x0.n, x1.u, x1.n));
            }
        }
    }
    rep.metrics.insert("non_qualifying".into(), non_qualifying as f64);
    rep.metrics.insert("max_error".into(), worst);
    Ok(rep.finish())
}

/// Trajectories that have left a type-2/3 set never come back, whatever
/// the schedule. `others` lets the report count exits into neighbouring sets.
pub fn verify_no_return(
    omega: &OmegaCurve,
    others: &[OmegaCurve],
    l: &Landscape,
    n_exited: usize,
    spec: &SimulationSpec,
    dilation: f64,
) -> Result<VerificationReport> {
    let mut rep = VerificationReport::new("no_return", spec.seed)
        .tol("dilation", dilation)
        .tol("horizon", spec.horizon);
    if omega.kind == ComponentType::NodeNode {
        return Err(Error::Config("no-return applies to type-2 and type-3 sets".into()));
    }
    let idx = omega.index();
    let other_idx: Vec<PolygonIndex> = others.iter().map(|o| o.index()).collect();
    let range = omega.component.range;
    let attempts = n_exited * 20;
    let mut exited = 0usize;
    let mut ended_in_other = 0usize;
    let mut vacuous = 0usize;
    // Work in batches so that the run stops once enough exits are collected.
    let batch = 32usize;
    let mut next = 0usize;
    while exited < n_exited && next < attempts {
        let ids: Vec<usize> = (next..(next + batch).min(attempts)).collect();
        next += ids.len();
        let results: Vec<Result<Option<(State, Option<Counterexample>, bool)>>> = ids
            .par_iter()
            .map(|&i| {
                let mut rng = task_rng(spec.seed, i as u64);
                let x0 = sample_inside(&mut rng, &idx, dilation).ok_or_else(|| Error::Orbit("sampling failed".into()))?;
                let first = random_schedule(&mut rng, range, &spec.schedules).cycled(spec.horizon);
                let out = flow_observe(x0, &first, l, System::Reduced, &spec.tol, spec.horizon, 2, |_, x| {
                    !idx.contains(x) && idx.boundary_distance(x) > dilation
                })?;
                if !out.stopped {
                    return Ok(None);
                }
                let second = random_schedule(&mut rng, range, &spec.schedules).cycled(spec.horizon);
                let back = flow_observe(out.x, &second, l, System::Reduced, &spec.tol, spec.horizon, 2, |_, x| {
                    idx.contains(x) && idx.boundary_distance(x) > dilation
                })?;
                let in_other = other_idx.iter().any(|o| o.contains(back.x));
                Ok(Some((
                    x0,
                    back.stopped.then(|| Counterexample {
                        x0: out.x,
                        state: back.x,
                        time: back.t,
                        schedule: second.clone(),
                        detail: "re-entered the set after exiting".into(),
                    }),
                    in_other,
                )))
            })
            .collect();
        for r in results {
            rep.samples += 1;
            match r? {
                None => vacuous += 1,
                Some((_, ce, in_other)) => {
                    if exited >= n_exited {
                        continue;
                    }
                    exited += 1;
                    rep.checked += 1;
                    if in_other {
                        ended_in_other += 1;
                    }
                    if let Some(c) = ce {
                        rep.violation(c);
                    }
                }
            }
        }
    }
    if exited < n_exited {
        rep.notes
            .push(format!("only {exited} of {n_exited} requested trajectories left the set within {attempts} attempts"));
    }
    rep.metrics.insert("exited".into(), exited as f64);
    rep.metrics.insert("stayed_inside".into(), vacuous as f64);
    rep.metrics.insert("ended_in_other_set".into(), ended_in_other as f64);
    Ok(rep.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CurativeMark {
    Curative,
    /// Not certified either way.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurativeField {
    pub u_grid: Grid,
    pub n_grid: Grid,
    /// Row-major in `n`, then `u`.
    pub marks: Vec<CurativeMark>,
}

impl CurativeField {
    pub fn at(&self, i_u: usize, i_n: usize) -> CurativeMark {
        self.marks[i_n * self.u_grid.points + i_u]
    }

    pub fn fraction(&self) -> f64 {
        let c = self.marks.iter().filter(|&&m| m == CurativeMark::Curative).count();
        c as f64 / self.marks.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "u,n,mark")?;
        let us = self.u_grid.values();
        for (j, n) in self.n_grid.iter().enumerate() {
            for (i, u) in us.iter().enumerate() {
                let m = match self.at(i, j) {
                    CurativeMark::Curative => "curative",
                    CurativeMark::Unknown => "unknown",
                };
                writeln!(w, "{u:.16e},{n:.16e},{m}")?;
            }
        }
        Ok(())
    }
}

/// Lower estimate of the curative set: a grid point is marked when one of
/// the tried schedules (both extremal constants, then `budget` random ones)
/// drives the reduced trajectory below `eta` before `horizon`.
pub fn estimate_curative_set(
    l: &Landscape,
    range: (f64, f64),
    u_grid: &Grid,
    n_grid: &Grid,
    budget: usize,
    spec: &SimulationSpec,
    eta: f64,
) -> Result<CurativeField> {
    let us = u_grid.values();
    let ns = n_grid.values();
    let cells: Vec<(usize, usize)> = (0..ns.len()).flat_map(|j| (0..us.len()).map(move |i| (i, j))).collect();
    let marks: Vec<Result<CurativeMark>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let x0 = State::new(us[i], ns[j]);
            if x0.n <= eta {
                return Ok(CurativeMark::Curative);
            }
            let mut rng = task_rng(spec.seed, (j * us.len() + i) as u64);
            let opts = FlowOptions::new(System::Reduced, spec.horizon).with_tol(spec.tol).stop_below(eta);
            for k in 0..budget + 2 {
                let sched = match k {
                    0 => Schedule::constant(range.1, spec.horizon),
                    1 => Schedule::constant(range.0, spec.horizon),
                    _ => random_schedule(&mut rng, range, &spec.schedules).cycled(spec.horizon),
                };
                if flow(x0, &sched, l, &opts)?.status == TerminalStatus::HitE {
                    return Ok(CurativeMark::Curative);
                }
            }
            Ok(CurativeMark::Unknown)
        })
        .collect();
    Ok(CurativeField {
        u_grid: *u_grid,
        n_grid: *n_grid,
        marks: marks.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

/// Trajectories from random non-curative starts end up within `tol` of
/// the union of the enclosed sets and stay there over the final
/// `final_fraction` of the horizon.
pub fn verify_limit_sets(
    l: &Landscape,
    window: &Window,
    omegas: &[OmegaCurve],
    spec: &SimulationSpec,
    tol: f64,
    final_fraction: f64,
    eta: f64,
) -> Result<VerificationReport> {
    let mut rep = VerificationReport::new("limit_sets", spec.seed)
        .tol("distance", tol)
        .tol("final_fraction", final_fraction)
        .tol("horizon", spec.horizon);
    if omegas.is_empty() {
        return Err(Error::Config("no controllable sets given".into()));
    }
    let range = omegas[0].component.range;
    let idx: Vec<PolygonIndex> = omegas.iter().map(|o| o.index()).collect();
    // exact below `tol`, a lower bound above it
    let dist = |x: State| {
        idx.iter()
            .map(|i| i.region_distance_below(x, tol))
            .fold(f64::INFINITY, f64::min)
    };
    let t_tail = spec.horizon * (1.0 - final_fraction);
    let jobs = spec.n_points * spec.n_schedules;
    let mut counted = 0usize;
    let mut curative = 0usize;
    let mut max_tail = 0.0f64;
    let mut next = 0usize;
    let attempts = jobs * 10;
    while counted < jobs && next < attempts {
        let ids: Vec<usize> = (next..(next + 64).min(attempts)).collect();
        next += ids.len();
        let results: Vec<Result<Option<(f64, Option<Counterexample>)>>> = ids
            .par_iter()
            .map(|&i| {
                let mut rng = task_rng(spec.seed, i as u64);
                let x0 = sample_window(&mut rng, window);
                let sched = random_schedule(&mut rng, range, &spec.schedules).cycled(spec.horizon);
                let mut worst = 0.0f64;
                let mut worst_at = (0.0, x0);
                let mut hit_e = false;
                flow_observe(x0, &sched, l, System::Reduced, &spec.tol, spec.horizon, 1, |t, x| {
                    if x.n < eta {
                        hit_e = true;
                        return true;
                    }
                    if t >= t_tail {
                        let d = dist(x);
                        if d > worst {
                            worst = d;
                            worst_at = (t, x);
                        }
                    }
                    false
                })?;
                if hit_e {
                    return Ok(None);
                }
                Ok(Some((
                    worst,
                    (worst >= tol).then(|| Counterexample {
                        x0,
                        state: worst_at.1,
                        time: worst_at.0,
                        schedule: sched.clone(),
                        detail: format!("distance {worst:e} to the nearest enclosed set in the final window"),
                    }),
                )))
            })
            .collect();
        for r in results {
            rep.samples += 1;
            match r? {
                None => curative += 1,
                Some((w, ce)) => {
                    if counted >= jobs {
                        continue;
                    }
                    counted += 1;
                    rep.checked += 1;
                    max_tail = max_tail.max(w);
                    if let Some(c) = ce {
                        rep.violation(c);
                    }
                }
            }
        }
    }
    rep.metrics.insert("skipped_curative".into(), curative as f64);
    rep.metrics.insert("max_tail_distance".into(), max_tail);
    Ok(rep.finish())
}

/// Membership in the band between the extremal graphs `h(., a+ + delta)` and
/// `h(., a- - delta)`, widened by `collar`, an allowance of order epsilon for
/// the gap between these graphs and the true slow manifolds.
pub fn b_delta_contains(x: State, delta: f64, l: &Landscape, range: (f64, f64), collar: f64) -> Result<bool> {
    let lo = l.h(x.u, range.1 + delta)?;
    let hi = l.h(x.u, range.0 - delta)?;
    Ok(x.n >= lo - collar && x.n <= hi + collar)
}

/// Default collar: `5 epsilon`.
pub fn default_collar(l: &Landscape) -> f64 {
    5.0 * l.epsilon
}

/// Trajectories started in `B_0` stay within the collar.
pub fn verify_b_delta_invariance(
    l: &Landscape,
    window: &Window,
    range: (f64, f64),
    spec: &SimulationSpec,
    collar: f64,
) -> Result<VerificationReport> {
    let mut rep = VerificationReport::new("b_delta_invariance", spec.seed)
        .tol("collar", collar)
        .tol("horizon", spec.horizon);
    let jobs = spec.n_points * spec.n_schedules;
    let results: Vec<Result<Option<Counterexample>>> = (0..jobs)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(spec.seed, i as u64);
            let x0 = loop {
                let u = rng.gen_range(window.u.0..=window.u.1);
                let lo = l.h(u, range.1)?;
                let hi = l.h(u, range.0)?;
                let n = rng.gen_range(lo..=hi);
                if n > 0.0 {
                    break State::new(u, n);
                }
            };
            let sched = random_schedule(&mut rng, range, &spec.schedules).cycled(spec.horizon);
            let w = window.dilate(0.0, 1.0);
            let mut err = None;
            let ob = flow_observe(x0, &sched, l, System::Reduced, &spec.tol, spec.horizon, 2, |_, x| {
                if !w.contains(x.u, x.n) {
                    return true;
                }
                match b_delta_contains(x, 0.0, l, range, collar) {
                    Ok(inside) => !inside,
                    Err(e) => {
                        err = Some(e);
                        true
                    }
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            Ok(ob.stopped.then(|| Counterexample {
                x0,
                state: ob.x,
                time: ob.t,
                schedule: sched.clone(),
                detail: "left the band".into(),
            }))
        })
        .collect();
    rep.samples = jobs;
    for r in results {
        rep.checked += 1;
        if let Some(c) = r? {
            rep.violation(c);
        }
    }
    Ok(rep.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SweepStatus {
    Ok,
    NotHyperbolic { witnesses: Vec<f64> },
    Failed { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub delta: f64,
    pub range: (f64, f64),
    pub status: SweepStatus,
    pub omega_types: Vec<u8>,
    pub omegas: Vec<OmegaSummary>,
    #[serde(skip)]
    pub curves: Vec<OmegaCurve>,
}

/// Component count dropped between two adjacent sweep samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeEvent {
    pub delta_before: f64,
    pub delta_after: f64,
    /// Component ids (at `delta_before`) that end up in the same component.
    pub colliding: Vec<usize>,
    /// Id of the merged component at `delta_after`.
    pub merged_into: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NestingCheck {
    pub delta_inner: f64,
    pub delta_outer: f64,
    pub vertices_checked: usize,
    pub violations: usize,
    pub example: Option<State>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub base_range: (f64, f64),
    pub entries: Vec<SweepEntry>,
    pub merges: Vec<MergeEvent>,
    pub nesting: Vec<NestingCheck>,
}

impl SweepResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn sweep_entry(delta: f64, range: (f64, f64), l: &Landscape, o: &OmegaOptions) -> Result<SweepEntry> {
    let hyp = equilibria::is_hyperbolic(range, l, &o.u_grid, o.deriv_tol)?;
    let mut e = SweepEntry {
        delta,
        range,
        status: SweepStatus::Ok,
        omega_types: Vec::new(),
        omegas: Vec::new(),
        curves: Vec::new(),
    };
    if !hyp.hyperbolic {
        e.status = SweepStatus::NotHyperbolic {
            witnesses: hyp.witnesses,
        };
        return Ok(e);
    }
    match omega::build_all(range, l, o) {
        Ok(curves) => {
            e.omega_types = curves.iter().map(|c| c.kind.number()).collect();
            e.omegas = curves.iter().map(|c| c.summary()).collect();
            e.curves = curves;
        }
        Err(err @ (Error::NotClosed(_) | Error::Orbit(_) | Error::NotASaddle { .. })) => {
            e.status = SweepStatus::Failed {
                message: err.to_string(),
            };
        }
        Err(err) => return Err(err),
    }
    Ok(e)
}

/// Counts vertices of each inner curve not strictly inside the outer curve
/// whose component contains it.
pub fn nesting_check(inner: &[OmegaCurve], outer: &[OmegaCurve], d_in: f64, d_out: f64) -> NestingCheck {
    let idx: Vec<PolygonIndex> = outer.iter().map(|o| o.index()).collect();
    let mut chk = NestingCheck {
        delta_inner: d_in,
        delta_outer: d_out,
        vertices_checked: 0,
        violations: 0,
        example: None,
    };
    for c in inner {
        let mid = 0.5 * (c.component.interval.0 + c.component.interval.1);
        let host = outer.iter().position(|o| o.component.contains_u(mid));
        for &v in &c.points {
            chk.vertices_checked += 1;
            let ok = host.is_some_and(|h| idx[h].contains(v) && idx[h].boundary_distance(v) > 0.0);
            if !ok {
                chk.violations += 1;
                chk.example.get_or_insert(v);
            }
        }
    }
    chk
}

/// Builds components and curves for explicitly given ranges (labelled by
/// `deltas`, sorted ascending) and reports merges and nesting.
pub fn sweep_ranges(l: &Landscape, base: (f64, f64), deltas: &[f64], ranges: &[(f64, f64)], o: &OmegaOptions) -> Result<SweepResult> {
    if deltas.len() != ranges.len() {
        return Err(Error::Config("deltas and ranges differ in length".into()));
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].total_cmp(&deltas[b]));
    let entries: Vec<Result<SweepEntry>> = order
        .par_iter()
        .map(|&k| sweep_entry(deltas[k], ranges[k], l, o))
        .collect();
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let ok: Vec<&SweepEntry> = entries.iter().filter(|e| e.status == SweepStatus::Ok).collect();
    let mut merges = Vec::new();
    let mut nesting = Vec::new();
    for w in ok.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (j, big) in b.curves.iter().enumerate() {
            let colliding: Vec<usize> = a
                .curves
                .iter()
                .filter(|c| {
                    let mid = 0.5 * (c.component.interval.0 + c.component.interval.1);
                    big.component.contains_u(mid)
                })
                .map(|c| c.component.id)
                .collect();
            if colliding.len() > 1 {
                merges.push(MergeEvent {
                    delta_before: a.delta,
                    delta_after: b.delta,
                    colliding,
                    merged_into: j,
                });
            }
        }
        nesting.push(nesting_check(&a.curves, &b.curves, a.delta, b.delta));
    }
    Ok(SweepResult {
        base_range: base,
        entries,
        merges,
        nesting,
    })
}

/// Inflated ranges `[a- - delta, a+ + delta]`.
pub fn bifurcation_sweep(l: &Landscape, base: (f64, f64), deltas: &[f64], o: &OmegaOptions) -> Result<SweepResult> {
    let ranges: Vec<(f64, f64)> = deltas.iter().map(|d| (base.0 - d, base.1 + d)).collect();
    sweep_ranges(l, base, deltas, &ranges, o)
}

/// Equilibria of the extremal systems with their labels, for reports.
pub fn extremal_equilibria(range: (f64, f64), l: &Landscape, o: &OmegaOptions) -> Result<Vec<(f64, State, Label)>> {
    let mut out = Vec::new();
    for a in [range.0, range.1] {
        for u in equilibria::preimages(a, l, &o.u_grid)? {
            out.push((a, State::new(u, l.h(u, a)?), equilibria::classify(u, l, o.deriv_tol)?));
        }
    }
    Ok(out)
}

/// Full/reduced orbit equivalence: the full trajectory at rescaled times
/// matches the reduced one. Returns the largest state mismatch.
pub fn full_reduced_mismatch(x0: State, a: f64, horizon: f64, l: &Landscape, tol: &Tolerances) -> Result<f64> {
    let red = flow(
        x0,
        &Schedule::constant(a, horizon),
        l,
        &FlowOptions::new(System::Reduced, horizon).with_tol(*tol).with_max_sample_dt(horizon * 1e-4),
    )?;
    let s = dynamics::rescale_time(&red, l)?;
    let mut worst = 0.0f64;
    let step = (red.times.len() / 50).max(1);
    for k in (step..red.times.len()).step_by(step) {
        let full = flow(
            x0,
            &Schedule::constant(a, s[k]),
            l,
            &FlowOptions::new(System::Full, s[k]).with_tol(*tol),
        )?;
        worst = worst.max(full.last().dist(red.states[k]));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{preset, Interaction};

    fn ex(name: &str) -> Landscape {
        preset(name).unwrap().landscape
    }

    #[test]
    fn random_schedules_respect_spec() {
        let mut rng = task_rng(3, 0);
        let spec = RandomScheduleSpec::default();
        for _ in 0..200 {
            let s = random_schedule(&mut rng, (0.2, 0.9), &spec);
            assert!(s.segments.len() >= 2 && s.segments.len() <= 21);
            for &(d, a) in &s.segments {
                assert!((0.1..=50.0).contains(&d));
                assert!((0.2..=0.9).contains(&a));
            }
        }
        let a = random_schedule(&mut task_rng(9, 4), (0.0, 1.0), &spec);
        let b = random_schedule(&mut task_rng(9, 4), (0.0, 1.0), &spec);
        assert_eq!(a, b);
    }

    #[test]
    fn angle_condition_holds_on_presets() {
        for name in ["a", "b", "c", "d"] {
            let p = preset(name).unwrap();
            let r = verify_angle_condition(&p.landscape, &Window::default(), (0.0, p.max_dose), 2000, 1e-3, 1).unwrap();
            assert!(r.passed, "{name}: {:?}", r.counterexamples.first());
            assert!(r.checked > 1900);
        }
    }

    #[test]
    fn angle_condition_detects_h3_failure_region() {
        // c = exp(-3u) against the steep sigmoid of preset d: H3 fails for small u
        let l = ex("d").with_interaction(Interaction::Exponential { scale: 1.0, rate: -3.0 });
        let r = verify_angle_condition(&l, &Window::default(), (0.0, 1.3), 3000, 1e-3, 2).unwrap();
        assert!(!r.passed);
        let h3_fails = |u: f64| {
            let b1 = l.b1_jet(u);
            let c = l.c_jet(u);
            c.d1 / c.v <= b1.d1 / b1.v
        };
        for c in &r.counterexamples {
            assert!(h3_fails(c.x0.u), "violation at u = {} where H3 holds", c.x0.u);
        }
    }

    #[test]
    fn b_delta_membership() {
        let l = ex("a");
        let range = (0.3, 1.75);
        let u = 0.15;
        let (x, a) = equilibria::equilibrium(u, &l).unwrap();
        assert!(a > range.0 && a < range.1);
        assert!(b_delta_contains(x, 0.01, &l, range, 0.0).unwrap());
        assert!(!b_delta_contains(State::new(u, 5.0), 0.01, &l, range, 0.05).unwrap());
    }

    #[test]
    fn b0_band_is_invariant_up_to_collar() {
        let l = ex("a");
        let spec = SimulationSpec::new(10, 3, 2000.0, 5);
        let r = verify_b_delta_invariance(&l, &Window::default(), (0.3, 1.75), &spec, default_collar(&l)).unwrap();
        assert!(r.passed, "{:?}", r.counterexamples.first());
    }

    #[test]
    fn node_set_small_invariance_and_boundary_leg() {
        let l = ex("a");
        let o = OmegaOptions::default();
        let om = &omega::build_all((0.3, 1.75), &l, &o).unwrap()[0];
        let spec = SimulationSpec::new(4, 3, 3000.0, 11);
        let r = verify_forward_invariance(om, &l, &spec, 1e-6).unwrap();
        assert!(r.passed && r.violations == 0, "{:?}", r.counterexamples.first());
        // from the a+ node under a-, the trajectory runs along the boundary leg
        let idx = om.index();
        let p_hi = endpoint_at(om, 1.75);
        let mut worst = 0.0f64;
        flow_observe(p_hi, &Schedule::constant(0.3, 3000.0), &l, System::Reduced, &Tolerances::default(), 3000.0, 2, |_, x| {
            worst = worst.max(idx.region_distance(x));
            false
        })
        .unwrap();
        assert!(worst < 1e-6, "outward excursion {worst:e}");
    }

    #[test]
    fn saddle_set_escapes_are_informative() {
        let l = ex("c");
        let o = OmegaOptions::default();
        let curves = omega::build_all((0.5, 0.95), &l, &o).unwrap();
        let t2 = curves.iter().find(|c| c.kind == ComponentType::SaddleSaddle).unwrap();
        let spec = SimulationSpec::new(3, 2, 3000.0, 2);
        let r = verify_forward_invariance(t2, &l, &spec, 1e-6).unwrap();
        assert!(r.informative && r.passed);
        assert!(r.violations > 0);
    }

    #[test]
    fn steering_identity_and_node_set() {
        let l = ex("a");
        let o = OmegaOptions::default();
        let om = &omega::build_all((0.3, 1.75), &l, &o).unwrap()[0];
        let idx = om.index();
        let so = SteeringOptions::default();
        let x = om.component.interior_point(0.5, &l).unwrap();
        let x = State::new(x.u, x.n + 0.01);
        match steer(om, &idx, x, x, &l, &so).unwrap() {
            Steering::Reached { schedule, .. } => assert!(schedule.segments.is_empty()),
            other => panic!("{other:?}"),
        }
        let r = verify_controllability(om, &l, 4, &so, 3).unwrap();
        assert!(r.passed, "{:?}", r.counterexamples);
    }

    #[test]
    fn sweep_detects_merge_and_nesting() {
        let l = ex("c");
        let o = OmegaOptions::default();
        let res = sweep_ranges(
            &l,
            (0.5, 0.95),
            &[0.0, 1.0, 2.0],
            &[(0.5, 0.95), (0.4, 1.05), (0.35, 1.23)],
            &o,
        )
        .unwrap();
        let types: Vec<Vec<u8>> = res
            .entries
            .iter()
            .map(|e| {
                let mut t = e.omega_types.clone();
                t.sort();
                t
            })
            .collect();
        assert_eq!(types, vec![vec![1, 1, 2], vec![1, 3], vec![1]]);
        assert_eq!(res.merges.len(), 2);
        for n in &res.nesting {
            assert_eq!(n.violations, 0, "{n:?}");
        }
        let direct = omega::build_all((0.5, 0.95), &l, &o).unwrap();
        assert_eq!(direct.len(), res.entries[0].curves.len());
        assert_eq!(direct[0].points, res.entries[0].curves[0].points);
    }

    #[test]
    fn full_and_reduced_orbits_agree() {
        let l = ex("a");
        let m = full_reduced_mismatch(State::new(0.1, 0.6), 1.0, 50.0, &l, &Tolerances::default().with_rtol(1e-10)).unwrap();
        assert!(m < 1e-6, "{m:e}");
    }

    #[test]
    fn curative_marks() {
        let l = ex("a");
        let spec = SimulationSpec::new(0, 0, 200.0, 1);
        let f = estimate_curative_set(&l, (0.3, 1.75), &Grid::new(0.13, 0.17, 3), &Grid::new(0.0, 0.3, 3), 2, &spec, 1e-8).unwrap();
        for i in 0..3 {
            assert_eq!(f.at(i, 0), CurativeMark::Curative);
        }
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 10);
    }
}
