//! Vector fields of the full and reduced systems and trajectory flows under
//! piecewise-constant dosing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landscape::{Landscape, Window};
use crate::ode::{self, Control, Step, Tolerances};

/// Point `(u, n)` in trait x population space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct State {
    pub u: f64,
    pub n: f64,
}

impl State {
    pub const fn new(u: f64, n: f64) -> Self {
        State { u, n }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.u, self.n]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        State { u: a[0], n: a[1] }
    }

    pub fn dist(self, o: State) -> f64 {
        (self.u - o.u).hypot(self.n - o.n)
    }

    pub fn is_finite(self) -> bool {
        self.u.is_finite() && self.n.is_finite()
    }
}

pub type Vec2 = [f64; 2];

/// `v^perp = (-v2, v1)`.
pub fn perp(v: Vec2) -> Vec2 {
    [-v[1], v[0]]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Which of the two equivalent systems to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Full,
    #[default]
    Reduced,
}

/// Treatment-independent part of the full field.
pub fn f0(x: State, l: &Landscape) -> Vec2 {
    let b0 = l.b0_jet(x.u);
    let c = l.c_jet(x.u);
    let k = l.rate.k(x.n);
    [
        l.epsilon * k * (b0.d1 - c.d1 * x.n),
        x.n * (b0.v - c.v * x.n),
    ]
}

/// Treatment direction of the full field; the full field is `f0 + a f1`.
pub fn f1(x: State, l: &Landscape) -> Vec2 {
    let b1 = l.b1_jet(x.u);
    let k = l.rate.k(x.n);
    [-(l.epsilon * k * b1.d1), -(x.n * b1.v)]
}

fn check(v: Vec2, x: State) -> Result<Vec2> {
    if v[0].is_finite() && v[1].is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { u: x.u, n: x.n })
    }
}

pub fn f_full(x: State, a: f64, l: &Landscape) -> Result<Vec2> {
    let b = l.b_jet(x.u, a);
    let c = l.c_jet(x.u);
    let k = l.rate.k(x.n);
    check(
        [
            l.epsilon * k * (b.d1 - c.d1 * x.n),
            x.n * (b.v - c.v * x.n),
        ],
        x,
    )
}

/// Reduced field: the full field divided by `k(n)`, regular across `n = 0`.
pub fn f_reduced(x: State, a: f64, l: &Landscape) -> Result<Vec2> {
    let b = l.b_jet(x.u, a);
    let c = l.c_jet(x.u);
    let kt = l.rate.k_tilde(x.n);
    check(
        [
            l.epsilon * (b.d1 - c.d1 * x.n),
            (b.v - c.v * x.n) / kt,
        ],
        x,
    )
}

pub fn field(system: System, x: State, a: f64, l: &Landscape) -> Result<Vec2> {
    match system {
        System::Full => f_full(x, a, l),
        System::Reduced => f_reduced(x, a, l),
    }
}

/// Jacobian of the reduced field with respect to `(u, n)` (row-major).
pub fn jacobian_reduced(x: State, a: f64, l: &Landscape) -> [[f64; 2]; 2] {
    let b = l.b_jet(x.u, a);
    let c = l.c_jet(x.u);
    let kt = l.rate.k_tilde(x.n);
    let dkt = l.rate.dk_tilde(x.n);
    let g = b.v - c.v * x.n;
    [
        [l.epsilon * (b.d2 - c.d2 * x.n), -l.epsilon * c.d1],
        [(b.d1 - c.d1 * x.n) / kt, -c.v / kt - g * dkt / (kt * kt)],
    ]
}

/// Jacobian of the full field with respect to `(u, n)` (row-major).
pub fn jacobian_full(x: State, a: f64, l: &Landscape) -> [[f64; 2]; 2] {
    let b = l.b_jet(x.u, a);
    let c = l.c_jet(x.u);
    let k = l.rate.k(x.n);
    let dk = l.rate.dk(x.n);
    [
        [
            l.epsilon * k * (b.d2 - c.d2 * x.n),
            l.epsilon * (dk * (b.d1 - c.d1 * x.n) - k * c.d1),
        ],
        [x.n * (b.d1 - c.d1 * x.n), b.v - 2.0 * c.v * x.n],
    ]
}

/// Piecewise-constant dosing: consecutive `(duration, dose)` segments, each
/// closed on the left. The last dose is held after the final segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Schedule {
    pub segments: Vec<(f64, f64)>,
}

impl Schedule {
    pub fn constant(dose: f64, duration: f64) -> Self {
        Schedule {
            segments: vec![(duration, dose)],
        }
    }

    pub fn validate(&self, dose_range: (f64, f64)) -> Result<()> {
        for &(d, a) in &self.segments {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::InvalidSchedule(format!("negative or non-finite duration {d}")));
            }
            if !(a >= dose_range.0 - 1e-12 && a <= dose_range.1 + 1e-12) {
                return Err(Error::InvalidSchedule(format!(
                    "dose {a} outside [{}, {}]",
                    dose_range.0, dose_range.1
                )));
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.0).sum()
    }

    /// Dose active at time `t`.
    pub fn dose_at(&self, t: f64) -> Option<f64> {
        let mut start = 0.0;
        for &(d, a) in &self.segments {
            if t >= start && t < start + d {
                return Some(a);
            }
            start += d;
        }
        self.segments.last().map(|s| s.1)
    }

    /// Repeats the segments until they cover `horizon`.
    pub fn cycled(&self, horizon: f64) -> Schedule {
        let period = self.total_duration();
        if !(period > 0.0) || period >= horizon {
            return self.clone();
        }
        let reps = (horizon / period).ceil() as usize;
        let mut segments = Vec::with_capacity(reps * self.segments.len());
        for _ in 0..reps {
            segments.extend_from_slice(&self.segments);
        }
        Schedule { segments }
    }

    /// Switch times and doses: `(t_start, t_end, dose)` per non-empty segment,
    /// covering `[0, horizon]`.
    pub fn pieces(&self, horizon: f64) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        let mut t = 0.0;
        for &(d, a) in &self.segments {
            if t >= horizon {
                break;
            }
            if d > 0.0 {
                let end = (t + d).min(horizon);
                out.push((t, end, a));
            }
            t += d;
        }
        if t < horizon {
            if let Some(&(_, a)) = self.segments.last() {
                out.push((t, horizon, a));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Horizon,
    HitE,
    LeftWindow,
}

/// Sampled solution. Sample `i` carries the dose active on `[t_i, t_{i+1})`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub doses: Vec<f64>,
    pub status: TerminalStatus,
    pub system: System,
}

impl Trajectory {
    pub fn last(&self) -> State {
        *self.states.last().expect("trajectory has at least one sample")
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u,n,a")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[i], self.states[i].u, self.states[i].n, self.doses[i]
            )?;
        }
        Ok(())
    }
}

pub const DEFAULT_ETA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub system: System,
    pub tol: Tolerances,
    pub horizon: f64,
    /// Stop when leaving this window.
    pub window: Option<Window>,
    /// Reduced system only: stop when `n` drops below this threshold.
    pub stop_below: Option<f64>,
    /// Insert dense-output samples so that consecutive sample times differ
    /// by at most this much.
    pub max_sample_dt: Option<f64>,
}

impl FlowOptions {
    pub fn new(system: System, horizon: f64) -> Self {
        FlowOptions {
            system,
            tol: Tolerances::default(),
            horizon,
            window: None,
            stop_below: None,
            max_sample_dt: None,
        }
    }

    pub fn with_tol(mut self, tol: Tolerances) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_window(mut self, w: Window) -> Self {
        self.window = Some(w);
        self
    }

    pub fn stop_below(mut self, eta: f64) -> Self {
        self.stop_below = Some(eta);
        self
    }

    pub fn with_max_sample_dt(mut self, dt: f64) -> Self {
        self.max_sample_dt = Some(dt);
        self
    }
}

fn event_value(opts: &FlowOptions, y: &[f64; 2]) -> Option<(f64, TerminalStatus)> {
    // Positive while the trajectory may continue.
    let mut worst: Option<(f64, TerminalStatus)> = None;
    if let Some(eta) = opts.stop_below {
        worst = Some((y[1] - eta, TerminalStatus::HitE));
    }
    if let Some(w) = opts.window {
        let g = (y[0] - w.u.0)
            .min(w.u.1 - y[0])
            .min(y[1] - w.n.0)
            .min(w.n.1 - y[1]);
        if worst.map_or(true, |(v, _)| g < v) {
            worst = Some((g, TerminalStatus::LeftWindow));
        }
    }
    worst
}

/// Integrates the chosen system from `x0` under `sched` up to `opts.horizon`,
/// restarting the integrator at every switch time.
pub fn flow(x0: State, sched: &Schedule, l: &Landscape, opts: &FlowOptions) -> Result<Trajectory> {
    if !x0.is_finite() {
        return Err(Error::NonFinite { u: x0.u, n: x0.n });
    }
    if opts.system == System::Full && x0.n < 0.0 {
        return Err(Error::InvalidSchedule(format!(
            "full system requires n0 >= 0, got {}",
            x0.n
        )));
    }
    let mut times = vec![0.0];
    let mut states = vec![x0];
    let mut doses = Vec::new();
    let pieces = sched.pieces(opts.horizon);
    let mut y = x0.to_array();
    let mut status = TerminalStatus::Horizon;

    if let Some((g, st)) = event_value(opts, &y) {
        if g <= 0.0 {
            doses.push(sched.dose_at(0.0).unwrap_or(0.0));
            return Ok(Trajectory {
                times,
                states,
                doses,
                status: st,
                system: opts.system,
            });
        }
    }

    let mut h_guess = None;
    'pieces: for &(ta, tb, a) in &pieces {
        let rhs = |_: f64, y: &[f64; 2]| match field(opts.system, State::from_array(*y), a, l) {
            Ok(v) => v,
            Err(_) => [f64::NAN, f64::NAN],
        };
        let mut stop_status = None;
        let mut last_h = None;
        let end = ode::integrate(rhs, ta, y, tb, &opts.tol, h_guess, |s: &Step<2>| {
            last_h = Some(s.t1 - s.t0);
            if let Some((g1, st)) = event_value(opts, &s.y1) {
                if g1 <= 0.0 {
                    let (te, ye) = s.bisect(|y| event_value(opts, y).map_or(1.0, |v| v.0), 1e-12);
                    push_dense(&mut times, &mut states, &mut doses, s, te, a, opts.max_sample_dt);
                    stop_status = Some(st);
                    return Control::StopAt(te, ye);
                }
            }
            push_dense(&mut times, &mut states, &mut doses, s, s.t1, a, opts.max_sample_dt);
            Control::Continue
        })?;
        h_guess = last_h;
        y = end.y;
        if let Some(st) = stop_status {
            status = st;
            break 'pieces;
        }
    }
    let last_dose = doses
        .last()
        .copied()
        .or_else(|| sched.dose_at(0.0))
        .unwrap_or(0.0);
    doses.push(last_dose);
    Ok(Trajectory {
        times,
        states,
        doses,
        status,
        system: opts.system,
    })
}

fn push_dense(
    times: &mut Vec<f64>,
    states: &mut Vec<State>,
    doses: &mut Vec<f64>,
    s: &Step<2>,
    t_end: f64,
    a: f64,
    max_dt: Option<f64>,
) {
    if let Some(dt) = max_dt {
        let span = t_end - s.t0;
        let m = (span / dt).ceil() as usize;
        for j in 1..m {
            let t = s.t0 + span * j as f64 / m as f64;
            times.push(t);
            states.push(State::from_array(s.eval(t)));
            doses.push(a);
        }
    }
    let y = if t_end == s.t1 { s.y1 } else { s.eval(t_end) };
    times.push(t_end);
    states.push(State::from_array(y));
    doses.push(a);
}

/// Result of `flow_observe`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observed {
    pub t: f64,
    pub x: State,
    /// The observer asked to stop at `(t, x)`.
    pub stopped: bool,
}

/// Integrates like `flow` without storing the trajectory. The observer sees
/// every accepted step end plus `substeps - 1` interior dense-output points
/// and returns `true` to stop there.
pub fn flow_observe<O: FnMut(f64, State) -> bool>(
    x0: State,
    sched: &Schedule,
    l: &Landscape,
    system: System,
    tol: &Tolerances,
    horizon: f64,
    substeps: usize,
    mut obs: O,
) -> Result<Observed> {
    if obs(0.0, x0) {
        return Ok(Observed {
            t: 0.0,
            x: x0,
            stopped: true,
        });
    }
    let mut y = x0.to_array();
    let mut t = 0.0;
    let mut h_guess = None;
    let m = substeps.max(1);
    for (ta, tb, a) in sched.pieces(horizon) {
        let rhs = |_: f64, y: &[f64; 2]| match field(system, State::from_array(*y), a, l) {
            Ok(v) => v,
            Err(_) => [f64::NAN, f64::NAN],
        };
        let mut hit = None;
        let mut last_h = None;
        let end = ode::integrate(rhs, ta, y, tb, tol, h_guess, |s: &Step<2>| {
            last_h = Some(s.t1 - s.t0);
            for j in 1..=m {
                let tj = if j == m { s.t1 } else { s.t0 + (s.t1 - s.t0) * j as f64 / m as f64 };
                let yj = if j == m { s.y1 } else { s.eval(tj) };
                let xj = State::from_array(yj);
                if obs(tj, xj) {
                    hit = Some((tj, xj));
                    return Control::StopAt(tj, yj);
                }
            }
            Control::Continue
        })?;
        h_guess = last_h;
        if let Some((th, xh)) = hit {
            return Ok(Observed {
                t: th,
                x: xh,
                stopped: true,
            });
        }
        y = end.y;
        t = end.t;
    }
    Ok(Observed {
        t,
        x: State::from_array(y),
        stopped: false,
    })
}

/// Killing time of the reduced flow under constant dose `a`: first time the
/// `n`-component drops below `eta`, or `None` if this does not happen before
/// `t_max`.
pub fn killing_time(
    x0: State,
    a: f64,
    l: &Landscape,
    t_max: f64,
    eta: f64,
    tol: &Tolerances,
) -> Result<Option<f64>> {
    if x0.n <= eta {
        return Ok(Some(0.0));
    }
    let opts = FlowOptions {
        system: System::Reduced,
        tol: *tol,
        horizon: t_max,
        window: None,
        stop_below: Some(eta),
        max_sample_dt: None,
    };
    let tr = flow(x0, &Schedule::constant(a, t_max), l, &opts)?;
    Ok(match tr.status {
        TerminalStatus::HitE => Some(tr.end_time()),
        _ => None,
    })
}

/// Full-system time along a reduced trajectory, `s(t) = int_0^t 1/k(n) dtau`,
/// by the trapezoidal rule on the trajectory samples.
pub fn rescale_time(traj: &Trajectory, l: &Landscape) -> Result<Vec<f64>> {
    let mut s = Vec::with_capacity(traj.times.len());
    s.push(0.0);
    let inv = |x: &State| -> Result<f64> {
        let k = l.rate.k(x.n);
        if !(k > 0.0) || !(1.0 / k).is_finite() {
            Err(Error::Orbit(format!(
                "time rescaling diverges: k(n) = {k} at n = {}",
                x.n
            )))
        } else {
            Ok(1.0 / k)
        }
    };
    let mut prev = inv(&traj.states[0])?;
    for i in 1..traj.times.len() {
        let cur = inv(&traj.states[i])?;
        let dt = traj.times[i] - traj.times[i - 1];
        let next = s[i - 1] + 0.5 * dt * (prev + cur);
        s.push(next);
        prev = cur;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::{preset, EvolutionRate, Interaction};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ex(name: &str) -> Landscape {
        preset(name).unwrap().landscape
    }

    #[test]
    fn cemetery_line_is_fixed_for_full_field() {
        let l = ex("a");
        for u in [-0.3, 0.2, 1.0] {
            let x = State::new(u, 0.0);
            assert_eq!(f0(x, &l), [0.0, 0.0]);
            assert_eq!(f1(x, &l), [0.0, 0.0]);
        }
    }

    #[test]
    fn f1_sign_structure() {
        for name in ["a", "b", "c", "d"] {
            let l = ex(name);
            for &(u, n) in &[(-0.4, 0.1), (0.2, 0.5), (0.9, 1.1), (1.4, 0.01)] {
                let v = f1(State::new(u, n), &l);
                assert!(v[0] > 0.0 && v[1] < 0.0, "{name} at ({u},{n}): {v:?}");
            }
        }
    }

    #[test]
    fn f0_matches_numerical_derivatives() {
        let l = ex("a");
        let x = State::new(0.3, 0.5);
        let d = 1e-5;
        let db0 = (l.b0(0.3 + d) - l.b0(0.3 - d)) / (2.0 * d);
        let dc = (l.c(0.3 + d) - l.c(0.3 - d)) / (2.0 * d);
        let expected = [
            l.epsilon * 0.5 * (db0 - dc * 0.5),
            0.5 * (l.b0(0.3) - l.c(0.3) * 0.5),
        ];
        let got = f0(x, &l);
        assert_relative_eq!(got[0], expected[0], max_relative = 1e-8);
        assert_relative_eq!(got[1], expected[1], max_relative = 1e-12);
    }

    #[test]
    fn reduced_field_identity_rate() {
        let l = ex("c");
        let x = State::new(0.4, 0.3);
        let a = 0.6;
        let b = l.b_jet(x.u, a);
        let got = f_reduced(x, a, &l).unwrap();
        assert_eq!(got, [l.epsilon * b.d1, b.v - x.n]);
        let on_graph = State::new(0.4, l.h(0.4, a).unwrap());
        assert!(f_reduced(on_graph, a, &l).unwrap()[1].abs() < 1e-15);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let l = ex("d")
            .with_interaction(Interaction::Exponential {
                scale: 1.1,
                rate: 0.3,
            })
            .with_rate(EvolutionRate::Saturating { half: 2.0 });
        let x = State::new(0.31, 0.42);
        let a = 0.2;
        let d = 1e-6;
        for (jac, sys) in [
            (jacobian_reduced(x, a, &l), System::Reduced),
            (jacobian_full(x, a, &l), System::Full),
        ] {
            for col in 0..2 {
                let mut xp = x.to_array();
                let mut xm = x.to_array();
                xp[col] += d;
                xm[col] -= d;
                let fp = field(sys, State::from_array(xp), a, &l).unwrap();
                let fm = field(sys, State::from_array(xm), a, &l).unwrap();
                for row in 0..2 {
                    let fd = (fp[row] - fm[row]) / (2.0 * d);
                    assert!(
                        (fd - jac[row][col]).abs() < 1e-7 * (1.0 + fd.abs()),
                        "{sys:?} J[{row}][{col}] = {} vs {fd}",
                        jac[row][col]
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn full_factorizes_through_reduced(u in -0.5f64..1.5, n in 0.01f64..1.2, a in 0.0f64..1.5) {
            let l = ex("c").with_rate(EvolutionRate::Saturating { half: 0.7 });
            let x = State::new(u, n);
            let full = f_full(x, a, &l).unwrap();
            let red = f_reduced(x, a, &l).unwrap();
            let k = l.rate.k(n);
            for i in 0..2 {
                prop_assert!((full[i] - k * red[i]).abs() <= 1e-12 * (1.0 + full[i].abs()));
            }
        }

        #[test]
        fn affine_split(u in -0.5f64..1.5, n in 0.0f64..1.2, a in 0.0f64..2.0) {
            let l = ex("d");
            let x = State::new(u, n);
            let full = f_full(x, a, &l).unwrap();
            let (g0, g1) = (f0(x, &l), f1(x, &l));
            for i in 0..2 {
                prop_assert!((full[i] - (g0[i] + a * g1[i])).abs() <= 1e-12 * (1.0 + full[i].abs()));
            }
        }

        #[test]
        fn cross_product_is_affine_in_dose(u in -0.5f64..1.5, n in 0.0f64..1.2, a1 in 0.0f64..1.0, da in 0.0f64..1.0) {
            let l = ex("a");
            let x = State::new(u, n);
            let a2 = a1 + da;
            let lhs = dot(perp(f_full(x, a1, &l).unwrap()), f_full(x, a2, &l).unwrap());
            let rhs = da * dot(perp(f0(x, &l)), f1(x, &l));
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1e-300) + 1e-17);
        }
    }

    #[test]
    fn schedule_closed_on_left() {
        let s = Schedule {
            segments: vec![(1.0, 0.2), (2.0, 0.5)],
        };
        assert_eq!(s.dose_at(0.0), Some(0.2));
        assert_eq!(s.dose_at(1.0), Some(0.5));
        assert_eq!(s.dose_at(10.0), Some(0.5));
        assert!(s.validate((0.0, 0.4)).is_err());
        assert!(Schedule {
            segments: vec![(-1.0, 0.1)]
        }
        .validate((0.0, 1.0))
        .is_err());
        assert_eq!(s.pieces(2.0), vec![(0.0, 1.0, 0.2), (1.0, 2.0, 0.5)]);
        assert_eq!(s.pieces(4.0).last(), Some(&(3.0, 4.0, 0.5)));
    }

    #[test]
    fn full_system_cemetery_is_frozen() {
        let l = ex("a");
        let x0 = State::new(0.37, 0.0);
        let sched = Schedule {
            segments: vec![(5.0, 0.0), (5.0, 1.75), (5.0, 0.3)],
        };
        let tr = flow(x0, &sched, &l, &FlowOptions::new(System::Full, 15.0)).unwrap();
        assert_eq!(tr.status, TerminalStatus::Horizon);
        for s in &tr.states {
            assert_eq!(*s, x0);
        }
    }

    #[test]
    fn times_strictly_increase_and_switches_are_hit() {
        let l = ex("a");
        let sched = Schedule {
            segments: vec![(3.3, 0.5), (2.2, 1.5), (1.0, 0.0)],
        };
        let tr = flow(
            State::new(0.2, 0.6),
            &sched,
            &l,
            &FlowOptions::new(System::Reduced, 10.0).with_max_sample_dt(0.5),
        )
        .unwrap();
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert!(tr.times.iter().any(|&t| (t - 3.3).abs() < 1e-12));
        assert!(tr.times.iter().any(|&t| (t - 5.5).abs() < 1e-12));
        assert!(tr.times.windows(2).all(|w| w[1] - w[0] <= 0.5 + 1e-12));
        assert_eq!(tr.times.len(), tr.doses.len());
        assert_eq!(tr.end_time(), 10.0);
    }

    #[test]
    fn cycled_schedule_covers_horizon() {
        let s = Schedule {
            segments: vec![(1.0, 0.2), (2.0, 0.5)],
        };
        let c = s.cycled(10.0);
        assert!(c.total_duration() >= 10.0);
        assert_eq!(c.dose_at(3.5), Some(0.2));
        assert_eq!(c.dose_at(4.5), Some(0.5));
        assert_eq!(s.cycled(2.0), s);
    }

    #[test]
    fn observe_matches_flow_end_state() {
        let l = ex("c");
        let sched = Schedule {
            segments: vec![(7.0, 0.8), (4.0, 0.15)],
        };
        let x0 = State::new(0.3, 0.4);
        let tr = flow(x0, &sched, &l, &FlowOptions::new(System::Reduced, 20.0)).unwrap();
        let mut count = 0;
        let ob = flow_observe(x0, &sched, &l, System::Reduced, &Tolerances::default(), 20.0, 3, |_, _| {
            count += 1;
            false
        })
        .unwrap();
        assert!(!ob.stopped);
        assert_eq!(ob.t, 20.0);
        assert!(ob.x.dist(tr.last()) < 1e-12);
        assert!(count > 3);
        let stop = flow_observe(x0, &sched, &l, System::Reduced, &Tolerances::default(), 20.0, 3, |t, _| t > 8.0).unwrap();
        assert!(stop.stopped && stop.t > 8.0 && stop.t < 20.0);
    }

    #[test]
    fn killing_time_trivial_cases() {
        let l = ex("a");
        let tol = Tolerances::default();
        assert_eq!(
            killing_time(State::new(0.2, 0.0), 1.0, &l, 10.0, DEFAULT_ETA, &tol).unwrap(),
            Some(0.0)
        );
    }

    #[test]
    fn rescale_constant_population() {
        let l = ex("a");
        let mk = |n: f64| Trajectory {
            times: vec![0.0, 0.5, 1.0, 2.0],
            states: vec![State::new(0.0, n); 4],
            doses: vec![0.0; 4],
            status: TerminalStatus::Horizon,
            system: System::Reduced,
        };
        let s = rescale_time(&mk(1.0), &l).unwrap();
        assert_eq!(s, vec![0.0, 0.5, 1.0, 2.0]);
        let s = rescale_time(&mk(0.5), &l).unwrap();
        assert_eq!(s, vec![0.0, 1.0, 2.0, 4.0]);
        assert!(rescale_time(&mk(0.0), &l).is_err());
    }

    #[test]
    fn window_exit_is_located() {
        let l = ex("a");
        let w = Window {
            u: (-0.5, 1.5),
            n: (0.0, 0.9),
        };
        let tr = flow(
            State::new(0.15, 0.5),
            &Schedule::constant(0.0, 100.0),
            &l,
            &FlowOptions::new(System::Reduced, 100.0).with_window(w),
        )
        .unwrap();
        assert_eq!(tr.status, TerminalStatus::LeftWindow);
        assert!((tr.last().n - 0.9).abs() < 1e-9);
    }

    #[test]
    fn csv_header_and_rows() {
        let tr = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![State::new(0.1, 0.2), State::new(0.3, 0.4)],
            doses: vec![0.5, 0.5],
            status: TerminalStatus::Horizon,
            system: System::Reduced,
        };
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = s.lines().collect();
        assert_eq!(lines[0], "t,u,n,a");
        assert_eq!(lines.len(), 3);
        let parsed: Vec<f64> = lines[2].split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(parsed, vec![1.0, 0.3, 0.4, 0.5]);
    }
}
