//! L1-minimal dosing over a period `[0, T]` with `n(T) = n(0)`:
//! forward-backward sweep on a fixed RK4 grid with a shooting loop on the
//! terminal multiplier, plus the repeated-cycle experiment with exit
//! classification relative to a saddle-type controllable set.
//!
//! Necessary conditions used: `H = alpha + lambda . f(x, alpha)`,
//! `lambda' = -(df/dx)^T lambda`, `lambda(T) = (0, nu)` for the penalized
//! functional `int alpha + nu n(T)`, and `alpha` minimizing `H` pointwise,
//! i.e. bang-bang on the switching function `sigma = 1 + lambda . f1(x)`.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::{dot, f1, f_full, flow, jacobian_full, FlowOptions, Schedule, State, System, Trajectory, Vec2};
use crate::equilibria::ComponentType;
use crate::error::{Error, Result};
use crate::geometry::PolygonIndex;
use crate::landscape::{Landscape, Window};
use crate::ode::Tolerances;
use crate::omega::OmegaCurve;

pub const DEFAULT_HORIZON: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FbsmOptions {
    /// Control intervals on `[0, T]`.
    pub intervals: usize,
    /// Inner loop stops when the mean dose change drops below this.
    pub tol_ctrl: f64,
    /// Required `|n(T) - n(0)|`.
    pub tol_shoot: f64,
    pub max_iter: usize,
    pub max_shoot: usize,
    /// Initial relaxation weight of the bang-bang update.
    pub relax: f64,
    /// `|sigma|` below this marks a node as (near) singular.
    pub singular_tol: f64,
}

impl Default for FbsmOptions {
    fn default() -> Self {
        FbsmOptions {
            intervals: 3000,
            tol_ctrl: 1e-6,
            tol_shoot: 1e-5,
            max_iter: 300,
            max_shoot: 80,
            relax: 0.5,
            singular_tol: 1e-3,
        }
    }
}

/// One accepted or attempted multiplier of the shooting loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShootRecord {
    pub nu: f64,
    pub inner_iterations: usize,
    pub objective: f64,
    pub residual: f64,
    pub inner_converged: bool,
    /// Lagrangian never increased across accepted inner steps.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalRun {
    pub x0: State,
    pub horizon: f64,
    pub range: (f64, f64),
    pub times: Vec<f64>,
    /// Dose on `[times[i], times[i+1])`.
    pub doses: Vec<f64>,
    pub states: Vec<State>,
    pub adjoint: Vec<Vec2>,
    /// Switching function at interval midpoints.
    pub switching: Vec<f64>,
    pub nu: f64,
    pub objective: f64,
    pub residual: f64,
    pub converged: bool,
    pub singular_fraction: f64,
    pub history: Vec<ShootRecord>,
    pub failure: Option<String>,
    /// The constraint was met by mixing the two extremals that bracket a
    /// jump of `n(T)` in `nu` (a duality gap of the penalized problem).
    pub bridged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub x0: State,
    pub end: State,
    pub horizon: f64,
    pub range: (f64, f64),
    pub intervals: usize,
    pub nu: f64,
    pub objective: f64,
    pub residual: f64,
    pub converged: bool,
    pub singular_fraction: f64,
    pub history: Vec<ShootRecord>,
    pub failure: Option<String>,
    pub bridged: bool,
    pub derivation: &'static str,
}

const DERIVATION: &str = "H = alpha + lambda.f(x,alpha); lambda' = -(df/dx)^T lambda; lambda(T) = (0, nu); \
alpha = argmin H (a- if 1 + lambda.f1 > 0, a+ if < 0), relaxed; nu by regula falsi on n(T) - n(0)";

impl OptimalRun {
    pub fn end(&self) -> State {
        *self.states.last().unwrap()
    }

    pub fn schedule(&self) -> Schedule {
        let dt = self.horizon / self.doses.len() as f64;
        let mut segments: Vec<(f64, f64)> = Vec::new();
        for &a in &self.doses {
            match segments.last_mut() {
                Some(s) if s.1 == a => s.0 += dt,
                _ => segments.push((dt, a)),
            }
        }
        Schedule { segments }
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            x0: self.x0,
            end: self.end(),
            horizon: self.horizon,
            range: self.range,
            intervals: self.doses.len(),
            nu: self.nu,
            objective: self.objective,
            residual: self.residual,
            converged: self.converged,
            singular_fraction: self.singular_fraction,
            history: self.history.clone(),
            failure: self.failure.clone(),
            bridged: self.bridged,
            derivation: DERIVATION,
        }
    }

    /// `t,u,n,alpha,lambda1,lambda2`; the final node repeats the last dose.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u,n,alpha,lambda1,lambda2")?;
        for (i, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let a = self.doses[i.min(self.doses.len() - 1)];
            let lam = self.adjoint[i];
            writeln!(w, "{t:.16e},{:.16e},{:.16e},{a:.16e},{:.16e},{:.16e}", x.u, x.n, lam[0], lam[1])?;
        }
        Ok(())
    }
}

fn add(x: State, k: Vec2, h: f64) -> State {
    State::new(x.u + h * k[0], x.n + h * k[1])
}

/// Classical RK4 under a piecewise-constant control.
pub fn forward(x0: State, doses: &[f64], dt: f64, l: &Landscape) -> Result<Vec<State>> {
    let mut xs = Vec::with_capacity(doses.len() + 1);
    xs.push(x0);
    let mut x = x0;
    for &a in doses {
        let k1 = f_full(x, a, l)?;
        let k2 = f_full(add(x, k1, 0.5 * dt), a, l)?;
        let k3 = f_full(add(x, k2, 0.5 * dt), a, l)?;
        let k4 = f_full(add(x, k3, dt), a, l)?;
        x = State::new(
            x.u + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x.n + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        );
        xs.push(x);
    }
    Ok(xs)
}

fn adj_rhs(x: State, a: f64, lam: Vec2, l: &Landscape) -> Vec2 {
    let j = jacobian_full(x, a, l);
    [-(j[0][0] * lam[0] + j[1][0] * lam[1]), -(j[0][1] * lam[0] + j[1][1] * lam[1])]
}

/// Backward RK4 for the costate; the state at interval midpoints comes from
/// cubic Hermite interpolation.
pub fn backward(xs: &[State], doses: &[f64], dt: f64, terminal: Vec2, l: &Landscape) -> Result<Vec<Vec2>> {
    let m = doses.len();
    let mut lam = vec![[0.0; 2]; m + 1];
    lam[m] = terminal;
    for i in (0..m).rev() {
        let a = doses[i];
        let (xa, xb) = (xs[i], xs[i + 1]);
        let fa = f_full(xa, a, l)?;
        let fb = f_full(xb, a, l)?;
        let xm = State::new(
            0.5 * (xa.u + xb.u) + dt / 8.0 * (fa[0] - fb[0]),
            0.5 * (xa.n + xb.n) + dt / 8.0 * (fa[1] - fb[1]),
        );
        let y = lam[i + 1];
        let k1 = adj_rhs(xb, a, y, l);
        let k2 = adj_rhs(xm, a, [y[0] - 0.5 * dt * k1[0], y[1] - 0.5 * dt * k1[1]], l);
        let k3 = adj_rhs(xm, a, [y[0] - 0.5 * dt * k2[0], y[1] - 0.5 * dt * k2[1]], l);
        let k4 = adj_rhs(xa, a, [y[0] - dt * k3[0], y[1] - dt * k3[1]], l);
        lam[i] = [
            y[0] - dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            y[1] - dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        if !(lam[i][0].is_finite() && lam[i][1].is_finite()) {
            return Err(Error::NonFinite { u: xa.u, n: xa.n });
        }
    }
    Ok(lam)
}

fn node_switching(xs: &[State], lam: &[Vec2], l: &Landscape) -> Vec<f64> {
    xs.iter().zip(lam).map(|(x, y)| 1.0 + dot(*y, f1(*x, l))).collect()
}

fn switching(xs: &[State], lam: &[Vec2], l: &Landscape) -> Vec<f64> {
    node_switching(xs, lam, l).windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Interval average of the pointwise minimizer of `H`, with `sigma` linear
/// between nodes. A sign change inside an interval gives the fraction of
/// the interval spent at the upper dose, so the switch time is not tied to
/// the grid.
fn bang_average(node_sigma: &[f64], range: (f64, f64)) -> Vec<f64> {
    node_sigma
        .windows(2)
        .map(|w| {
            let (s0, s1) = (w[0], w[1]);
            let frac = if s0 < 0.0 && s1 < 0.0 {
                1.0
            } else if s0 >= 0.0 && s1 >= 0.0 {
                0.0
            } else {
                let z = s0 / (s0 - s1);
                if s0 < 0.0 {
                    z
                } else {
                    1.0 - z
                }
            };
            range.0 + frac * (range.1 - range.0)
        })
        .collect()
}

struct Inner {
    doses: Vec<f64>,
    states: Vec<State>,
    adjoint: Vec<Vec2>,
    switching: Vec<f64>,
    iterations: usize,
    converged: bool,
    monotone: bool,
}

fn objective(doses: &[f64], dt: f64) -> f64 {
    doses.iter().sum::<f64>() * dt
}

/// Inner sweep at fixed multiplier, warm-started from `doses`.
fn sweep(x0: State, dt: f64, range: (f64, f64), nu: f64, mut doses: Vec<f64>, l: &Landscape, o: &FbsmOptions) -> Result<Inner> {
    let lagr = |d: &[f64], xs: &[State]| objective(d, dt) + nu * xs.last().unwrap().n;
    let mut xs = forward(x0, &doses, dt, l)?;
    let mut value = lagr(&doses, &xs);
    let mut monotone = true;
    let mut theta = o.relax;
    for it in 0..o.max_iter {
        let lam = backward(&xs, &doses, dt, [0.0, nu], l)?;
        let node_sig = node_switching(&xs, &lam, l);
        let sig: Vec<f64> = node_sig.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let bang = bang_average(&node_sig, range);
        let gap = bang.iter().zip(&doses).map(|(b, d)| (b - d).abs()).sum::<f64>() / doses.len() as f64;
        if gap < o.tol_ctrl {
            return Ok(Inner {
                doses,
                states: xs,
                adjoint: lam,
                switching: sig,
                iterations: it,
                converged: true,
                monotone,
            });
        }
        // relaxed update, halving the weight until the Lagrangian does not grow
        let mut accepted = false;
        let mut th = theta;
        let mut applied = 0.0;
        while th >= 1e-8 {
            let cand: Vec<f64> = bang.iter().zip(&doses).map(|(b, d)| th * b + (1.0 - th) * d).collect();
            let xc = forward(x0, &cand, dt, l)?;
            let vc = lagr(&cand, &xc);
            if vc <= value + 1e-14 * value.abs().max(1.0) {
                monotone &= vc <= value + 1e-12 * value.abs().max(1.0);
                doses = cand;
                xs = xc;
                value = vc;
                accepted = true;
                applied = th * gap;
                break;
            }
            th *= 0.5;
        }
        if !accepted {
            // no descent along the bang-bang direction: stationary up to grid effects
            let lam = backward(&xs, &doses, dt, [0.0, nu], l)?;
            let sig = switching(&xs, &lam, l);
            return Ok(Inner {
                doses,
                states: xs,
                adjoint: lam,
                switching: sig,
                iterations: it,
                converged: true,
                monotone,
            });
        }
        theta = (th * 2.0).min(o.relax);
        if applied < o.tol_ctrl {
            let lam = backward(&xs, &doses, dt, [0.0, nu], l)?;
            let sig = switching(&xs, &lam, l);
            return Ok(Inner {
                doses,
                states: xs,
                adjoint: lam,
                switching: sig,
                iterations: it + 1,
                converged: true,
                monotone,
            });
        }
    }
    let lam = backward(&xs, &doses, dt, [0.0, nu], l)?;
    let sig = switching(&xs, &lam, l);
    Ok(Inner {
        doses,
        states: xs,
        adjoint: lam,
        switching: sig,
        iterations: o.max_iter,
        converged: false,
        monotone,
    })
}

fn assemble(x0: State, horizon: f64, range: (f64, f64), nu: f64, inner: Inner, history: Vec<ShootRecord>, o: &FbsmOptions) -> OptimalRun {
    let m = inner.doses.len();
    let dt = horizon / m as f64;
    let residual = inner.states.last().unwrap().n - x0.n;
    let singular = inner.switching.iter().filter(|s| s.abs() < o.singular_tol).count();
    OptimalRun {
        x0,
        horizon,
        range,
        times: (0..=m).map(|i| i as f64 * dt).collect(),
        objective: objective(&inner.doses, dt),
        doses: inner.doses,
        states: inner.states,
        adjoint: inner.adjoint,
        switching: inner.switching,
        nu,
        residual,
        converged: false,
        singular_fraction: singular as f64 / m as f64,
        history,
        failure: None,
        bridged: false,
    }
}

/// Sweep at a prescribed multiplier (no shooting).
pub fn fbsm_fixed(x0: State, horizon: f64, range: (f64, f64), nu: f64, l: &Landscape, o: &FbsmOptions) -> Result<OptimalRun> {
    let dt = horizon / o.intervals as f64;
    let inner = sweep(x0, dt, range, nu, vec![range.0; o.intervals], l, o)?;
    let rec = ShootRecord {
        nu,
        inner_iterations: inner.iterations,
        objective: objective(&inner.doses, dt),
        residual: inner.states.last().unwrap().n - x0.n,
        inner_converged: inner.converged,
        monotone: inner.monotone,
    };
    let conv = inner.converged;
    let mut run = assemble(x0, horizon, range, nu, inner, vec![rec], o);
    run.converged = conv;
    Ok(run)
}

/// Forward-backward sweep with shooting on `nu` so that `n(T) = n(0)`.
/// A run that cannot meet the constraint comes back with `converged =
/// false` and `failure` set; only integration breakdowns are errors.
pub fn fbsm_solve(x0: State, horizon: f64, range: (f64, f64), l: &Landscape, o: &FbsmOptions) -> Result<OptimalRun> {
    if !(horizon > 0.0) || o.intervals == 0 {
        return Err(Error::Config("control horizon and interval count must be positive".into()));
    }
    if !Window::default().dilate(1.0, 1.0).contains(x0.u, x0.n) || x0.n <= 0.0 {
        return Err(Error::Config(format!("initial state ({}, {}) outside the state window", x0.u, x0.n)));
    }
    let dt = horizon / o.intervals as f64;
    let mut history = Vec::new();
    let solve = |nu: f64, warm: Vec<f64>, history: &mut Vec<ShootRecord>| -> Result<Inner> {
        let inner = sweep(x0, dt, range, nu, warm, l, o)?;
        history.push(ShootRecord {
            nu,
            inner_iterations: inner.iterations,
            objective: objective(&inner.doses, dt),
            residual: inner.states.last().unwrap().n - x0.n,
            inner_converged: inner.converged,
            monotone: inner.monotone,
        });
        Ok(inner)
    };
    let resid = |s: &Inner| s.states.last().unwrap().n - x0.n;
    let finish = |nu: f64, inner: Inner, history: Vec<ShootRecord>, failure: Option<String>| {
        let ok = failure.is_none();
        let mut run = assemble(x0, horizon, range, nu, inner, history, o);
        run.converged = ok && run.residual.abs() < o.tol_shoot;
        run.failure = failure;
        run
    };

    // nu = 0 gives the least dosing; the residual then has to be non-negative
    let mut lo = (0.0, solve(0.0, vec![range.0; o.intervals], &mut history)?);
    let g_lo = resid(&lo.1);
    if g_lo.abs() < o.tol_shoot {
        return Ok(finish(0.0, lo.1, history, None));
    }
    if g_lo < 0.0 {
        let msg = format!("n(T) - n(0) = {g_lo:e} < 0 even without treatment");
        return Ok(finish(0.0, lo.1, history, Some(msg)));
    }
    let mut nu = 1.0;
    let mut hi = loop {
        let s = solve(nu, lo.1.doses.clone(), &mut history)?;
        let g = resid(&s);
        if g.abs() < o.tol_shoot {
            return Ok(finish(nu, s, history, None));
        }
        if g < 0.0 {
            break (nu, s);
        }
        lo = (nu, s);
        nu *= 4.0;
        if nu > 1e12 {
            let msg = format!("n(T) - n(0) = {g:e} > 0 at every multiplier; maximal dosing cannot restore n(0)");
            return Ok(finish(lo.0, lo.1, history, Some(msg)));
        }
    };
    // Illinois regula falsi on g(nu), decreasing in nu
    let (mut g_lo, mut g_hi) = (resid(&lo.1), resid(&hi.1));
    let mut side = 0i8;
    for _ in 0..o.max_shoot {
        let mut nu = (lo.0 * g_hi - hi.0 * g_lo) / (g_hi - g_lo);
        if !(nu > lo.0 && nu < hi.0) {
            nu = 0.5 * (lo.0 + hi.0);
        }
        let warm = if g_lo.abs() < g_hi.abs() { lo.1.doses.clone() } else { hi.1.doses.clone() };
        let s = solve(nu, warm, &mut history)?;
        let g = resid(&s);
        if g.abs() < o.tol_shoot {
            return Ok(finish(nu, s, history, None));
        }
        if g > 0.0 {
            lo = (nu, s);
            g_lo = g;
            if side == 1 {
                g_hi *= 0.5;
            }
            side = 1;
        } else {
            hi = (nu, s);
            g_hi = g;
            if side == -1 {
                g_lo *= 0.5;
            }
            side = -1;
        }
        if (hi.0 - lo.0) <= 1e-10 * hi.0 {
            break;
        }
    }
    // bridge a jump: n(T) is continuous along the segment between the two
    // bracketing controls
    let mix = |w: f64| -> Vec<f64> { lo.1.doses.iter().zip(&hi.1.doses).map(|(a, b)| w * a + (1.0 - w) * b).collect() };
    let (mut w0, mut w1) = (0.0, 1.0);
    for _ in 0..60 {
        let w = 0.5 * (w0 + w1);
        let d = mix(w);
        let xs = forward(x0, &d, dt, l)?;
        let g = xs.last().unwrap().n - x0.n;
        if g.abs() < o.tol_shoot {
            let nu = w * lo.0 + (1.0 - w) * hi.0;
            let lam = backward(&xs, &d, dt, [0.0, nu], l)?;
            let sig = switching(&xs, &lam, l);
            let inner = Inner {
                doses: d,
                states: xs,
                adjoint: lam,
                switching: sig,
                iterations: 0,
                converged: true,
                monotone: true,
            };
            let mut run = finish(nu, inner, history, None);
            run.bridged = true;
            return Ok(run);
        }
        // w = 1 is the low-multiplier control with positive residual
        if g > 0.0 {
            w1 = w;
        } else {
            w0 = w;
        }
    }
    let (nu, best) = if resid(&lo.1).abs() < resid(&hi.1).abs() { lo } else { hi };
    let g = resid(&best);
    let msg = format!("shooting stalled with n(T) - n(0) = {g:e}; the residual jumps across nu = {nu:e}");
    Ok(finish(nu, best, history, Some(msg)))
}

/// Largest relative mismatch between the costate and central finite
/// differences of `nu n(T)` with respect to the state at `samples` nodes.
pub fn adjoint_fd_error(run: &OptimalRun, l: &Landscape, samples: usize, h: f64) -> Result<f64> {
    let m = run.doses.len();
    let dt = run.horizon / m as f64;
    let nu = if run.nu == 0.0 { 1.0 } else { run.nu };
    let lam = backward(&run.states, &run.doses, dt, [0.0, nu], l)?;
    let mut worst = 0.0f64;
    for k in 0..samples {
        let i = (k * m) / samples.max(1);
        let tail = &run.doses[i..];
        let mut fd = [0.0; 2];
        for (c, e) in [[h, 0.0], [0.0, h]].iter().enumerate() {
            let p = forward(add(run.states[i], *e, 1.0), tail, dt, l)?;
            let q = forward(add(run.states[i], *e, -1.0), tail, dt, l)?;
            fd[c] = nu * (p.last().unwrap().n - q.last().unwrap().n) / (2.0 * h);
        }
        let err = (lam[i][0] - fd[0]).hypot(lam[i][1] - fd[1]);
        let scale = fd[0].hypot(fd[1]).max(1e-12);
        worst = worst.max(err / scale);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cycles {
    pub times: Vec<f64>,
    pub states: Vec<State>,
    pub doses: Vec<f64>,
    /// `|n(kT) - n((k-1)T)|` for each cycle.
    pub return_errors: Vec<f64>,
}

impl Cycles {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u,n,a")?;
        for (i, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let a = self.doses[i.min(self.doses.len() - 1)];
            writeln!(w, "{t:.16e},{:.16e},{:.16e},{a:.16e}", x.u, x.n)?;
        }
        Ok(())
    }
}

/// Repeats the periodic schedule of `run` from its initial state.
pub fn run_cycles(run: &OptimalRun, n_cycles: usize, l: &Landscape) -> Result<Cycles> {
    let m = run.doses.len();
    let dt = run.horizon / m as f64;
    let mut out = Cycles {
        times: vec![0.0],
        states: vec![run.x0],
        doses: Vec::new(),
        return_errors: Vec::new(),
    };
    let mut x = run.x0;
    for k in 0..n_cycles {
        let xs = forward(x, &run.doses, dt, l)?;
        for (i, s) in xs.iter().enumerate().skip(1) {
            out.times.push(k as f64 * run.horizon + i as f64 * dt);
            out.states.push(*s);
        }
        out.doses.extend_from_slice(&run.doses);
        let end = *xs.last().unwrap();
        out.return_errors.push((end.n - x.n).abs());
        x = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Exit {
    Left,
    Right,
    None,
}

impl Exit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Exit::Left => "left",
            Exit::Right => "right",
            Exit::None => "none",
        }
    }
}

/// Locates the first departure from a saddle-type set and names the side
/// by the saddle whose boundary piece is nearest to the departure point.
pub struct ExitClassifier {
    omega: OmegaCurve,
    idx: PolygonIndex,
    pub margin: f64,
}

impl ExitClassifier {
    pub fn new(omega: OmegaCurve) -> Result<Self> {
        if omega.kind == ComponentType::NodeNode {
            return Err(Error::Config("exit classification needs a type-2 or type-3 set".into()));
        }
        let idx = omega.index();
        Ok(ExitClassifier { omega, idx, margin: 1e-6 })
    }

    pub fn omega(&self) -> &OmegaCurve {
        &self.omega
    }

    pub fn contains(&self, x: State) -> bool {
        self.idx.contains(x)
    }

    pub fn is_outside(&self, x: State) -> bool {
        !self.idx.contains(x) && self.idx.boundary_distance(x) > self.margin
    }

    pub fn side(&self, x: State) -> Exit {
        let (k, _) = self
            .omega
            .points
            .iter()
            .enumerate()
            .map(|(k, p)| (k, p.dist(x)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let anchor = self.omega.provenance_at(k).anchor();
        let c = &self.omega.component;
        if (anchor.u - c.left.state.u).abs() <= (anchor.u - c.right.state.u).abs() {
            Exit::Left
        } else {
            Exit::Right
        }
    }

    /// First sample outside the set, with its side.
    pub fn first_exit(&self, times: &[f64], states: &[State]) -> Option<(f64, State, Exit)> {
        let k = states.iter().position(|&x| self.is_outside(x))?;
        Some((times[k], states[k], self.side(states[k])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExperimentOptions {
    pub horizon: f64,
    /// Periods solved before giving up on an exit.
    pub max_cycles: usize,
    /// Extra periods solved after a converged exit so the run can settle.
    pub settle_cycles: usize,
    /// Length of the maximal-dose continuation after a failure.
    pub continuation: f64,
    pub fbsm: FbsmOptions,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            horizon: DEFAULT_HORIZON,
            max_cycles: 40,
            settle_cycles: 10,
            continuation: 2000.0,
            fbsm: FbsmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Experiment {
    pub x0: State,
    pub runs: Vec<OptimalRun>,
    /// Index of the period whose optimization failed.
    pub failed_at: Option<usize>,
    /// Maximal-dose continuation after a failure.
    pub continuation: Option<Trajectory>,
    pub exit: Exit,
    pub exit_time: Option<f64>,
    pub exit_state: Option<State>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub x0: State,
    pub exit: Exit,
    pub exit_time: Option<f64>,
    pub exit_state: Option<State>,
    pub failed_at: Option<usize>,
    pub periods: usize,
    pub runs: Vec<RunSummary>,
}

impl Experiment {
    pub fn summary(&self) -> ExperimentSummary {
        ExperimentSummary {
            x0: self.x0,
            exit: self.exit,
            exit_time: self.exit_time,
            exit_state: self.exit_state,
            failed_at: self.failed_at,
            periods: self.runs.len(),
            runs: self.runs.iter().map(|r| r.summary()).collect(),
        }
    }

    /// Solved periods back to back: `t,u,n,alpha,lambda1,lambda2` with a
    /// global time axis. The continuation is exported separately.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u,n,alpha,lambda1,lambda2")?;
        let mut t0 = 0.0;
        for (r, run) in self.runs.iter().enumerate() {
            for (i, (t, x)) in run.times.iter().zip(&run.states).enumerate() {
                if r > 0 && i == 0 {
                    continue;
                }
                let a = run.doses[i.min(run.doses.len() - 1)];
                let lam = run.adjoint[i];
                writeln!(
                    w,
                    "{:.16e},{:.16e},{:.16e},{a:.16e},{:.16e},{:.16e}",
                    t0 + t,
                    x.u,
                    x.n,
                    lam[0],
                    lam[1]
                )?;
            }
            t0 += run.horizon;
        }
        Ok(())
    }

    /// Time at which the continuation starts.
    pub fn continuation_start(&self) -> f64 {
        self.runs.iter().map(|r| r.horizon).sum()
    }
}

/// Solves consecutive periods from each end state. A failed period is
/// followed by maximal dosing. The exit side is taken from the first
/// departure from the classifier's set.
pub fn control_experiment(x0: State, range: (f64, f64), l: &Landscape, cls: &ExitClassifier, o: &ExperimentOptions) -> Result<Experiment> {
    let mut ex = Experiment {
        x0,
        runs: Vec::new(),
        failed_at: None,
        continuation: None,
        exit: Exit::None,
        exit_time: None,
        exit_state: None,
    };
    let mut x = x0;
    let mut t0 = 0.0;
    let mut after_exit = 0usize;
    for k in 0..o.max_cycles + o.settle_cycles {
        if ex.exit == Exit::None && k >= o.max_cycles {
            break;
        }
        let run = fbsm_solve(x, o.horizon, range, l, &o.fbsm)?;
        let ok = run.converged;
        if ex.exit == Exit::None {
            if let Some((t, s, side)) = cls.first_exit(&run.times, &run.states) {
                ex.exit = side;
                ex.exit_time = Some(t0 + t);
                ex.exit_state = Some(s);
            }
        }
        x = run.end();
        ex.runs.push(run);
        if !ok {
            ex.failed_at = Some(k);
            let traj = flow(
                x,
                &Schedule::constant(range.1, o.continuation),
                l,
                &FlowOptions::new(System::Full, o.continuation)
                    .with_tol(Tolerances::default())
                    .with_max_sample_dt(0.1),
            )?;
            if ex.exit == Exit::None {
                if let Some((t, s, side)) = cls.first_exit(&traj.times, &traj.states) {
                    ex.exit = side;
                    ex.exit_time = Some(t0 + o.horizon + t);
                    ex.exit_state = Some(s);
                }
            }
            ex.continuation = Some(traj);
            break;
        }
        t0 += o.horizon;
        if ex.exit != Exit::None {
            after_exit += 1;
            if after_exit > o.settle_cycles {
                break;
            }
        }
    }
    Ok(ex)
}

/// Classification at each start (in parallel).
pub fn classify_starts(starts: &[State], range: (f64, f64), l: &Landscape, cls: &ExitClassifier, o: &ExperimentOptions) -> Result<Vec<Experiment>> {
    use rayon::prelude::*;
    starts
        .par_iter()
        .map(|&x| control_experiment(x, range, l, cls, o))
        .collect()
}

/// Left/right split of the exit side along `u0` at fixed `n0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Split {
    pub horizon: f64,
    pub epsilon: f64,
    pub n0: f64,
    /// Bracket `(u, exit)` pairs with different exits, at most `tol` apart.
    pub lower: (f64, Exit),
    pub upper: (f64, Exit),
    pub split: Option<f64>,
    pub evaluations: usize,
}

/// Bisects `u0` between `u_lo` and `u_hi` for a change of exit side; only
/// the first exit matters, so no settling periods are solved.
pub fn find_split(
    n0: f64,
    bracket: (f64, f64),
    range: (f64, f64),
    l: &Landscape,
    cls: &ExitClassifier,
    o: &ExperimentOptions,
    tol: f64,
) -> Result<Split> {
    let eo = ExperimentOptions { settle_cycles: 0, ..*o };
    let side = |u: f64| -> Result<Exit> { Ok(control_experiment(State::new(u, n0), range, l, cls, &eo)?.exit) };
    let (mut a, mut b) = bracket;
    let (mut ea, eb) = (side(a)?, side(b)?);
    let mut evaluations = 2;
    let mut out = Split {
        horizon: o.horizon,
        epsilon: l.epsilon,
        n0,
        lower: (a, ea),
        upper: (b, eb),
        split: None,
        evaluations,
    };
    if ea == eb {
        return Ok(out);
    }
    while b - a > tol {
        let m = 0.5 * (a + b);
        let em = side(m)?;
        evaluations += 1;
        if em == ea {
            a = m;
            ea = em;
        } else if em == eb {
            b = m;
        } else {
            // a third outcome (no exit): keep the half that still changes side
            b = m;
        }
    }
    let eb = side(b)?;
    evaluations += 1;
    out.lower = (a, ea);
    out.upper = (b, eb);
    out.split = (ea != eb).then_some(0.5 * (a + b));
    out.evaluations = evaluations;
    Ok(out)
}

/// Scans `u0` over `grid` at fixed `n0` and bisects every adjacent pair
/// with different exits down to `tol`.
pub fn split_search(
    n0: f64,
    grid: &crate::landscape::Grid,
    range: (f64, f64),
    l: &Landscape,
    cls: &ExitClassifier,
    o: &ExperimentOptions,
    tol: f64,
) -> Result<Vec<Split>> {
    use rayon::prelude::*;
    let eo = ExperimentOptions { settle_cycles: 0, ..*o };
    let us = grid.values();
    let sides: Vec<Exit> = us
        .par_iter()
        .map(|&u| Ok(control_experiment(State::new(u, n0), range, l, cls, &eo)?.exit))
        .collect::<Result<_>>()?;
    let pairs: Vec<(f64, f64)> = (1..us.len()).filter(|&i| sides[i] != sides[i - 1]).map(|i| (us[i - 1], us[i])).collect();
    pairs.par_iter().map(|&b| find_split(n0, b, range, l, cls, &eo, tol)).collect()
}
