//! Boundary curves of controllable sets, assembled from extremal-dose orbits
//! and saddle invariant manifolds of the reduced system.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::{f_reduced, jacobian_reduced, State};
use crate::equilibria::{self, Component, ComponentType, Label};
use crate::error::{Error, Result};
use crate::geometry::{self, PolygonIndex};
use crate::landscape::{Grid, Landscape, Window};
use crate::ode::{self, Control, Step, Tolerances};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OmegaOptions {
    pub tol: Tolerances,
    pub window: Window,
    /// Extra room below/above the window for orbits of the reduced system,
    /// which may dip below the cemetery line.
    pub n_margin: f64,
    pub seed_offset: f64,
    pub stop_radius: f64,
    pub closure_tol: f64,
    /// Maximal distance between the polyline and the sampled orbit.
    pub chord_tol: f64,
    pub max_time: f64,
    pub eta: f64,
    pub u_grid: Grid,
    pub deriv_tol: f64,
}

impl Default for OmegaOptions {
    fn default() -> Self {
        OmegaOptions {
            tol: Tolerances::default(),
            window: Window::default(),
            n_margin: 0.5,
            seed_offset: 1e-6,
            stop_radius: 1e-7,
            closure_tol: 1e-6,
            chord_tol: 1e-9,
            max_time: 1e6,
            eta: crate::dynamics::DEFAULT_ETA,
            u_grid: equilibria::default_u_grid(),
            deriv_tol: equilibria::DEFAULT_DERIV_TOL,
        }
    }
}

impl OmegaOptions {
    fn trace_window(&self) -> Window {
        self.window.dilate(0.0, self.n_margin)
    }
}

/// How a traced orbit ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEnd {
    /// The stop predicate fired.
    Stopped,
    LeftWindow,
    MaxTime,
}

/// Adaptively sampled orbit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Traced {
    /// Integration time of each vertex (backward time for backward traces).
    pub times: Vec<f64>,
    pub points: Vec<State>,
    pub end: TraceEnd,
}

impl Traced {
    /// Time at parameter `s` along segment `j`.
    pub fn time_at(&self, j: usize, s: f64) -> f64 {
        self.times[j] + s * (self.times[j + 1] - self.times[j])
    }
}

fn sample_step(s: &Step<2>, t0: f64, y0: [f64; 2], t1: f64, y1: [f64; 2], chord: f64, depth: u32, out: &mut Vec<(f64, State)>) {
    let a = State::from_array(y0);
    let b = State::from_array(y1);
    let mut worst = 0.0f64;
    for frac in [0.25, 0.5, 0.75] {
        let p = State::from_array(s.eval(t0 + frac * (t1 - t0)));
        worst = worst.max(geometry::dist_point_segment(p, a, b));
    }
    if worst > chord && depth < 20 {
        let tm = 0.5 * (t0 + t1);
        let ym = s.eval(tm);
        sample_step(s, t0, y0, tm, ym, chord, depth + 1, out);
        sample_step(s, tm, ym, t1, y1, chord, depth + 1, out);
    } else {
        out.push((t1, b));
    }
}

/// Integrates the reduced system under a constant dose (backward in time if
/// asked) and returns a polyline whose chords stay within `chord_tol` of the
/// orbit. Stops when `stop(t, x)` holds at a vertex, on leaving the window
/// (extended by `n_margin`), or at `max_time`.
pub fn trace_orbit<S: FnMut(f64, &State) -> bool>(
    x0: State,
    dose: f64,
    backward: bool,
    l: &Landscape,
    o: &OmegaOptions,
    mut stop: S,
) -> Result<Traced> {
    let w = o.trace_window();
    let sign = if backward { -1.0 } else { 1.0 };
    let rhs = |_: f64, y: &[f64; 2]| match f_reduced(State::from_array(*y), dose, l) {
        Ok(v) => [sign * v[0], sign * v[1]],
        Err(_) => [f64::NAN, f64::NAN],
    };
    let inside = |y: &[f64; 2]| (y[0] - w.u.0).min(w.u.1 - y[0]).min(y[1] - w.n.0).min(w.n.1 - y[1]);

    let mut out = Traced {
        times: vec![0.0],
        points: vec![x0],
        end: TraceEnd::MaxTime,
    };
    if stop(0.0, &x0) {
        out.end = TraceEnd::Stopped;
        return Ok(out);
    }
    if inside(&x0.to_array()) < 0.0 {
        out.end = TraceEnd::LeftWindow;
        return Ok(out);
    }
    let mut buf = Vec::new();
    let mut end = TraceEnd::MaxTime;
    let (times, points) = (&mut out.times, &mut out.points);
    ode::integrate(rhs, 0.0, x0.to_array(), o.max_time, &o.tol, None, |s: &Step<2>| {
        buf.clear();
        let (t_end, y_end, left) = if inside(&s.y1) < 0.0 {
            let (te, ye) = s.bisect(|y| inside(y), 1e-13);
            (te, ye, true)
        } else {
            (s.t1, s.y1, false)
        };
        sample_step(s, s.t0, s.y0, t_end, y_end, o.chord_tol, 0, &mut buf);
        for &(t, x) in buf.iter() {
            times.push(t);
            points.push(x);
            if stop(t, &x) {
                end = TraceEnd::Stopped;
                return Control::StopAt(t, x.to_array());
            }
        }
        if left {
            end = TraceEnd::LeftWindow;
            return Control::StopAt(t_end, y_end);
        }
        Control::Continue
    })?;
    out.end = end;
    Ok(out)
}

fn nearest(nodes: &[State], x: State) -> usize {
    let mut best = 0;
    for (i, p) in nodes.iter().enumerate() {
        if p.dist(x) < nodes[best].dist(x) {
            best = i;
        }
    }
    best
}

fn near_any<'a>(nodes: &'a [State], r: f64) -> impl FnMut(f64, &State) -> bool + 'a {
    move |_, x| nodes.iter().any(|p| p.dist(*x) < r)
}

/// Stable nodes of `f~(., a)` on the grid.
pub fn attractors(a: f64, l: &Landscape, o: &OmegaOptions) -> Result<Vec<State>> {
    equilibria_with_label(a, l, o, Label::StableNode)
}

pub fn saddles(a: f64, l: &Landscape, o: &OmegaOptions) -> Result<Vec<State>> {
    equilibria_with_label(a, l, o, Label::Saddle)
}

fn equilibria_with_label(a: f64, l: &Landscape, o: &OmegaOptions, want: Label) -> Result<Vec<State>> {
    let mut out = Vec::new();
    for u in equilibria::preimages(a, l, &o.u_grid)? {
        if equilibria::classify(u, l, o.deriv_tol)? == want {
            out.push(State::new(u, l.h(u, a)?));
        }
    }
    Ok(out)
}

/// Orbit of the reduced flow under dose `a` from `p` until it enters the
/// stop ball of a stable node of `a`. The attractor is appended.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Orbit {
    pub points: Vec<State>,
    pub attractor: State,
    /// Distance between the last integrated point and the attractor.
    pub gap: f64,
}

pub fn forward_orbit_to_attractor(p: State, a: f64, l: &Landscape, o: &OmegaOptions) -> Result<Orbit> {
    let nodes = attractors(a, l, o)?;
    if nodes.is_empty() {
        return Err(Error::Orbit(format!("dose {a} has no stable node on the u-grid")));
    }
    let tr = trace_orbit(p, a, false, l, o, near_any(&nodes, o.stop_radius))?;
    let mut pts = tr.points;
    match tr.end {
        TraceEnd::Stopped => {
            let q = nodes[nearest(&nodes, *pts.last().unwrap())];
            let last = *pts.last().unwrap();
            let gap = last.dist(q);
            if pts.len() == 1 {
                return Ok(Orbit {
                    points: pts,
                    attractor: q,
                    gap,
                });
            }
            pts.push(q);
            Ok(Orbit {
                points: pts,
                attractor: q,
                gap,
            })
        }
        TraceEnd::LeftWindow => Err(Error::Orbit(format!(
            "orbit from ({}, {}) under dose {a} left the working window",
            p.u, p.n
        ))),
        TraceEnd::MaxTime => Err(Error::Orbit(format!(
            "orbit from ({}, {}) under dose {a} did not reach an attractor within t = {}",
            p.u, p.n, o.max_time
        ))),
    }
}

/// Half-manifolds of a saddle, each starting at the seed point next to it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleManifolds {
    pub saddle: State,
    pub dose: f64,
    /// Normalized eigenvectors; the stable one points to increasing `n`, the
    /// unstable one to increasing `u`.
    pub stable_dir: [f64; 2],
    pub unstable_dir: [f64; 2],
    /// `[along -v, along +v]`
    pub stable: [Vec<State>; 2],
    pub unstable: [Vec<State>; 2],
    pub unstable_end: [TraceEnd; 2],
}

fn eigvec(j: [[f64; 2]; 2], lam: f64) -> [f64; 2] {
    let c1 = [j[0][1], lam - j[0][0]];
    let c2 = [lam - j[1][1], j[1][0]];
    let v = if c1[0].hypot(c1[1]) >= c2[0].hypot(c2[1]) { c1 } else { c2 };
    let r = v[0].hypot(v[1]);
    [v[0] / r, v[1] / r]
}

pub fn saddle_manifolds(q: State, a: f64, l: &Landscape, o: &OmegaOptions) -> Result<SaddleManifolds> {
    let j = jacobian_reduced(q, a, l);
    let eig = equilibria::eig2(j).ok_or(Error::NotASaddle { u: q.u })?;
    if !(eig[0] < 0.0 && eig[1] > 0.0) {
        return Err(Error::NotASaddle { u: q.u });
    }
    let mut vs = eigvec(j, eig[0]);
    let mut vu = eigvec(j, eig[1]);
    if !(vs[0].is_finite() && vu[0].is_finite()) || (vs[0] * vu[1] - vs[1] * vu[0]).abs() < 1e-12 {
        return Err(Error::Orbit(format!("degenerate eigenvectors at saddle u = {}", q.u)));
    }
    if vs[1] < 0.0 {
        vs = [-vs[0], -vs[1]];
    }
    if vu[0] < 0.0 {
        vu = [-vu[0], -vu[1]];
    }
    let nodes = attractors(a, l, o)?;
    let seed = |v: [f64; 2], s: f64| State::new(q.u + s * o.seed_offset * v[0], q.n + s * o.seed_offset * v[1]);
    let mut stable: [Vec<State>; 2] = [Vec::new(), Vec::new()];
    let mut unstable: [Vec<State>; 2] = [Vec::new(), Vec::new()];
    let mut ends = [TraceEnd::MaxTime; 2];
    for (k, s) in [-1.0, 1.0].into_iter().enumerate() {
        stable[k] = trace_orbit(seed(vs, s), a, true, l, o, |_, _| false)?.points;
        let tr = trace_orbit(seed(vu, s), a, false, l, o, near_any(&nodes, o.stop_radius))?;
        let mut pts = tr.points;
        if tr.end == TraceEnd::Stopped {
            let i = nearest(&nodes, *pts.last().unwrap());
            pts.push(nodes[i]);
        }
        unstable[k] = pts;
        ends[k] = tr.end;
    }
    Ok(SaddleManifolds {
        saddle: q,
        dose: a,
        stable_dir: vs,
        unstable_dir: vu,
        stable,
        unstable,
        unstable_end: ends,
    })
}

/// Origin of one boundary piece.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    ForwardOrbit { origin: State, dose: f64 },
    StableManifold { saddle: State, dose: f64 },
    UnstableManifold { saddle: State, dose: f64 },
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::ForwardOrbit { .. } => "forward_orbit",
            Provenance::StableManifold { .. } => "stable_manifold",
            Provenance::UnstableManifold { .. } => "unstable_manifold",
        }
    }

    pub fn dose(&self) -> f64 {
        match *self {
            Provenance::ForwardOrbit { dose, .. }
            | Provenance::StableManifold { dose, .. }
            | Provenance::UnstableManifold { dose, .. } => dose,
        }
    }

    pub fn anchor(&self) -> State {
        match *self {
            Provenance::ForwardOrbit { origin, .. } => origin,
            Provenance::StableManifold { saddle, .. } | Provenance::UnstableManifold { saddle, .. } => saddle,
        }
    }
}

/// Vertices `start..end` of the curve; segment `i -> i + 1` belongs to the
/// piece containing `i` (the closing segment to the piece of the last vertex).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Piece {
    pub provenance: Provenance,
    pub start: usize,
    pub end: usize,
}

/// Closed boundary polyline of a controllable set; the closing edge from the
/// last to the first vertex is implicit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaCurve {
    pub kind: ComponentType,
    pub component: Component,
    pub points: Vec<State>,
    pub pieces: Vec<Piece>,
    pub intersects_e: bool,
    pub min_n: f64,
    pub closure_gap: f64,
    pub area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaSummary {
    pub component_id: usize,
    pub omega_type: u8,
    pub interval: (f64, f64),
    pub range: (f64, f64),
    pub intersects_e: bool,
    pub min_n: f64,
    pub area: f64,
    pub closure_gap: f64,
    pub vertices: usize,
    pub pieces: Vec<Piece>,
}

impl OmegaCurve {
    pub fn index(&self) -> PolygonIndex {
        PolygonIndex::new(&self.points)
    }

    /// Provenance of the segment starting at vertex `i`.
    pub fn provenance_at(&self, i: usize) -> Provenance {
        self.pieces
            .iter()
            .find(|p| i >= p.start && i < p.end)
            .or(self.pieces.last())
            .expect("curve has pieces")
            .provenance
    }

    pub fn summary(&self) -> OmegaSummary {
        OmegaSummary {
            component_id: self.component.id,
            omega_type: self.kind.number(),
            interval: self.component.interval,
            range: self.component.range,
            intersects_e: self.intersects_e,
            min_n: self.min_n,
            area: self.area,
            closure_gap: self.closure_gap,
            vertices: self.points.len(),
            pieces: self.pieces.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "u,n,piece,provenance,dose,anchor_u,anchor_n")?;
        let mut k = 0;
        for (i, x) in self.points.iter().enumerate() {
            while k + 1 < self.pieces.len() && i >= self.pieces[k].end {
                k += 1;
            }
            let p = self.pieces[k].provenance;
            let an = p.anchor();
            writeln!(
                w,
                "{:.16e},{:.16e},{},{},{:.16e},{:.16e},{:.16e}",
                x.u,
                x.n,
                k,
                p.tag(),
                p.dose(),
                an.u,
                an.n
            )?;
        }
        Ok(())
    }
}

/// Even-odd containment; builds a spatial index per call, so prefer
/// `OmegaCurve::index` for repeated queries.
pub fn encloses(omega: &OmegaCurve, x: State) -> bool {
    omega.index().contains(x)
}

struct Assembly {
    points: Vec<State>,
    pieces: Vec<Piece>,
}

impl Assembly {
    fn new() -> Self {
        Assembly {
            points: Vec::new(),
            pieces: Vec::new(),
        }
    }

    /// Appends a piece, dropping a leading vertex equal to the current last one.
    fn push(&mut self, prov: Provenance, pts: &[State]) {
        let start = self.points.len().saturating_sub(1);
        let skip = match (self.points.last(), pts.first()) {
            (Some(a), Some(b)) if a == b => 1,
            _ => 0,
        };
        self.points.extend_from_slice(&pts[skip..]);
        if let Some(last) = self.pieces.last_mut() {
            last.end = start;
        }
        self.pieces.push(Piece {
            provenance: prov,
            start,
            end: self.points.len(),
        });
    }

    fn finish(mut self) -> (Vec<State>, Vec<Piece>) {
        if self.points.len() > 1 && self.points.first() == self.points.last() {
            self.points.pop();
        }
        let m = self.points.len();
        if let Some(last) = self.pieces.last_mut() {
            last.end = m;
        }
        // The first piece starts at 0; fix ranges left from the chained pushes.
        if let Some(first) = self.pieces.first_mut() {
            first.start = 0;
        }
        (self.points, self.pieces)
    }
}

/// Earliest crossing of `path` with either stable branch of `m`, returning
/// the trimmed path `[path.., z]` and the branch part `[z, .., seed, saddle]`.
fn trim_at_stable(path: &[State], m: &SaddleManifolds) -> Option<(Vec<State>, Vec<State>)> {
    let mut best: Option<(usize, f64, usize, usize, State)> = None;
    for (b, branch) in m.stable.iter().enumerate() {
        if let Some((i, t, j, _, z)) = geometry::first_crossing(path, branch) {
            if best.map_or(true, |(bi, bt, ..)| (i, t) < (bi, bt)) {
                best = Some((i, t, b, j, z));
            }
        }
    }
    let (i, _, b, j, z) = best?;
    let mut head: Vec<State> = path[..=i].to_vec();
    if head.last() != Some(&z) {
        head.push(z);
    }
    let branch = &m.stable[b];
    let mut tail = vec![z];
    for k in (0..=j).rev() {
        if branch[k] != z {
            tail.push(branch[k]);
        }
    }
    tail.push(m.saddle);
    Some((head, tail))
}

/// Unstable branch of `m` heading towards trait value `toward`.
fn unstable_toward(m: &SaddleManifolds, toward: f64) -> Vec<State> {
    let k = if toward > m.saddle.u { 1 } else { 0 };
    let mut v = vec![m.saddle];
    v.extend_from_slice(&m.unstable[k]);
    v
}

fn not_closed(what: &str) -> Error {
    Error::NotClosed(what.to_string())
}

/// Builds the boundary curve for one component of a hyperbolic range.
pub fn build_omega(comp: &Component, l: &Landscape, o: &OmegaOptions) -> Result<OmegaCurve> {
    let (a_lo, a_hi) = comp.range;
    let mut asm = Assembly::new();
    let mut closure_gap = 0.0f64;
    match comp.kind {
        ComponentType::NodeNode => {
            let (p_lo, p_hi) = if comp.left.dose == a_lo {
                (comp.left.state, comp.right.state)
            } else {
                (comp.right.state, comp.left.state)
            };
            let leg_a = forward_orbit_to_attractor(p_lo, a_hi, l, o)?;
            if leg_a.attractor.dist(p_hi) > o.closure_tol {
                return Err(not_closed(&format!(
                    "orbit from the a- node converged to ({}, {}) instead of the a+ node ({}, {})",
                    leg_a.attractor.u, leg_a.attractor.n, p_hi.u, p_hi.n
                )));
            }
            let leg_b = forward_orbit_to_attractor(p_hi, a_lo, l, o)?;
            if leg_b.attractor.dist(p_lo) > o.closure_tol {
                return Err(not_closed(&format!(
                    "orbit from the a+ node converged to ({}, {}) instead of the a- node ({}, {})",
                    leg_b.attractor.u, leg_b.attractor.n, p_lo.u, p_lo.n
                )));
            }
            closure_gap = leg_a.gap.max(leg_b.gap);
            let mut a_pts = leg_a.points;
            *a_pts.last_mut().unwrap() = p_hi;
            let mut b_pts = leg_b.points;
            *b_pts.last_mut().unwrap() = p_lo;
            asm.push(
                Provenance::ForwardOrbit {
                    origin: p_lo,
                    dose: a_hi,
                },
                &a_pts,
            );
            asm.push(
                Provenance::ForwardOrbit {
                    origin: p_hi,
                    dose: a_lo,
                },
                &b_pts,
            );
        }
        ComponentType::SaddleSaddle => {
            let (p_hi, p_lo) = if comp.left.dose == a_hi {
                (comp.left.state, comp.right.state)
            } else {
                (comp.right.state, comp.left.state)
            };
            let m_hi = saddle_manifolds(p_hi, a_hi, l, o)?;
            let m_lo = saddle_manifolds(p_lo, a_lo, l, o)?;
            let u1 = unstable_toward(&m_hi, p_lo.u);
            let (u1, s1) = trim_at_stable(&u1, &m_lo)
                .ok_or_else(|| not_closed("unstable manifold of the a+ saddle misses the stable manifold of the a- saddle"))?;
            let u2 = unstable_toward(&m_lo, p_hi.u);
            let (u2, s2) = trim_at_stable(&u2, &m_hi)
                .ok_or_else(|| not_closed("unstable manifold of the a- saddle misses the stable manifold of the a+ saddle"))?;
            asm.push(
                Provenance::UnstableManifold {
                    saddle: p_hi,
                    dose: a_hi,
                },
                &u1,
            );
            asm.push(
                Provenance::StableManifold {
                    saddle: p_lo,
                    dose: a_lo,
                },
                &s1,
            );
            asm.push(
                Provenance::UnstableManifold {
                    saddle: p_lo,
                    dose: a_lo,
                },
                &u2,
            );
            asm.push(
                Provenance::StableManifold {
                    saddle: p_hi,
                    dose: a_hi,
                },
                &s2,
            );
        }
        ComponentType::NodeSaddle => {
            let (p, q) = if comp.left.label == Label::StableNode {
                (comp.left, comp.right)
            } else {
                (comp.right, comp.left)
            };
            let a_s = q.dose;
            let a_o = if a_s == a_lo { a_hi } else { a_lo };
            let m = saddle_manifolds(q.state, a_s, l, o)?;
            let nodes = attractors(a_o, l, o)?;
            let orbit = trace_orbit(p.state, a_o, false, l, o, near_any(&nodes, o.stop_radius))?.points;
            let (head, tail) = trim_at_stable(&orbit, &m)
                .ok_or_else(|| not_closed("extremal orbit from the node misses the stable manifold of the saddle"))?;
            let mut back = unstable_toward(&m, p.state.u);
            let last = *back.last().unwrap();
            if last.dist(p.state) > o.closure_tol {
                return Err(not_closed(&format!(
                    "unstable manifold of the saddle ends at ({}, {}), not at the node ({}, {})",
                    last.u, last.n, p.state.u, p.state.n
                )));
            }
            closure_gap = if back.len() >= 2 { back[back.len() - 2].dist(p.state) } else { 0.0 };
            *back.last_mut().unwrap() = p.state;
            asm.push(
                Provenance::ForwardOrbit {
                    origin: p.state,
                    dose: a_o,
                },
                &head,
            );
            asm.push(
                Provenance::StableManifold {
                    saddle: q.state,
                    dose: a_s,
                },
                &tail,
            );
            asm.push(
                Provenance::UnstableManifold {
                    saddle: q.state,
                    dose: a_s,
                },
                &back,
            );
        }
    }
    let (points, pieces) = asm.finish();
    if closure_gap > o.closure_tol {
        return Err(not_closed(&format!("closure gap {closure_gap:e} exceeds {:e}", o.closure_tol)));
    }
    let idx = PolygonIndex::new(&points);
    if let Some(&(i, j, x)) = idx.self_intersections(1).first() {
        return Err(not_closed(&format!(
            "boundary self-intersects between segments {i} and {j} near ({}, {})",
            x.u, x.n
        )));
    }
    let min_n = points.iter().map(|p| p.n).fold(f64::INFINITY, f64::min);
    Ok(OmegaCurve {
        kind: comp.kind,
        component: comp.clone(),
        area: geometry::signed_area(&points),
        intersects_e: min_n <= o.eta,
        min_n,
        closure_gap,
        points,
        pieces,
    })
}

/// Components of the range and one curve per component.
pub fn build_all(range: (f64, f64), l: &Landscape, o: &OmegaOptions) -> Result<Vec<OmegaCurve>> {
    let comps = equilibria::components(range, l, &o.u_grid, o.deriv_tol)?;
    comps.iter().map(|c| build_omega(c, l, o)).collect()
}

pub fn summaries_json(curves: &[OmegaCurve]) -> Result<String> {
    let s: Vec<OmegaSummary> = curves.iter().map(|c| c.summary()).collect();
    Ok(serde_json::to_string_pretty(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{dot, f_full, perp};
    use crate::landscape::preset;

    fn ex(name: &str) -> Landscape {
        preset(name).unwrap().landscape
    }

    fn types(c: &[OmegaCurve]) -> Vec<u8> {
        let mut v: Vec<u8> = c.iter().map(|c| c.kind.number()).collect();
        v.sort();
        v
    }

    #[test]
    fn degenerate_orbit_at_attractor() {
        let l = ex("a");
        let o = OmegaOptions::default();
        let node = attractors(1.0, &l, &o).unwrap()[0];
        let orb = forward_orbit_to_attractor(node, 1.0, &l, &o).unwrap();
        assert_eq!(orb.points.len(), 1);
    }

    #[test]
    fn preset_a_type1_curve() {
        let l = ex("a");
        let o = OmegaOptions::default();
        let curves = build_all((0.3, 1.75), &l, &o).unwrap();
        assert_eq!(types(&curves), vec![1]);
        let c = &curves[0];
        assert!(c.area > 0.0, "counter-clockwise");
        assert!(c.closure_gap <= 1e-6);
        assert!(!c.intersects_e);
        assert_eq!(c.pieces.len(), 2);
        // trapping: lower leg strictly below H*, upper leg strictly above
        let idx = c.index();
        for (k, piece) in c.pieces.iter().enumerate() {
            for x in &c.points[piece.start + 1..piece.end.saturating_sub(1)] {
                let hs = equilibria::h_star(x.u, &l).unwrap();
                if k == 0 {
                    assert!(x.n < hs, "leg A above H* at {x:?}");
                } else {
                    assert!(x.n > hs, "leg B below H* at {x:?}");
                }
            }
        }
        for s in [0.1, 0.5, 0.9] {
            assert!(idx.contains(c.component.interior_point(s, &l).unwrap()));
        }
        assert!(!idx.contains(State::new(-0.4, 1.1)));
        // subtangential: the extremal leg is never crossed outward by other doses
        let n_pts = c.points.len();
        let mut checked = 0;
        for (k, piece) in c.pieces.iter().enumerate() {
            let a_leg = piece.provenance.dose();
            for i in (piece.start + 1..piece.end.saturating_sub(1)).step_by(50) {
                let x = c.points[i];
                let fl = f_full(x, a_leg, &l).unwrap();
                for a in [0.3, 0.8, 1.2, 1.75] {
                    let v = dot(perp(fl), f_full(x, a, &l).unwrap());
                    let scale = fl[0].hypot(fl[1]) * 2.0;
                    assert!(v >= -1e-9 * scale, "leg {k} vertex {i}/{n_pts}: {v}");
                }
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn preset_c_range_a1_types() {
        let l = ex("c");
        let o = OmegaOptions::default();
        let curves = build_all((0.5, 0.95), &l, &o).unwrap();
        assert_eq!(types(&curves), vec![1, 1, 2]);
        for c in &curves {
            assert!(c.area > 0.0);
            assert!(c.closure_gap <= 1e-6);
            let idx = c.index();
            assert!(idx.is_simple());
            assert!(idx.contains(c.component.interior_point(0.5, &l).unwrap()));
        }
        let t2 = curves.iter().find(|c| c.kind == ComponentType::SaddleSaddle).unwrap();
        assert_eq!(t2.pieces.len(), 4);
    }

    #[test]
    fn saddle_manifold_structure() {
        let l = ex("c");
        let o = OmegaOptions::default();
        let comps = equilibria::components((0.15, 0.8), &l, &o.u_grid, o.deriv_tol).unwrap();
        let c3 = comps.iter().find(|c| c.kind == ComponentType::NodeSaddle).unwrap();
        let (p, q) = if c3.left.label == Label::Saddle {
            (c3.right, c3.left)
        } else {
            (c3.left, c3.right)
        };
        let m = saddle_manifolds(q.state, q.dose, &l, &o).unwrap();
        assert!(m.unstable_dir[0].abs() > 0.9);
        assert!(m.stable_dir[0].abs() < 0.05);
        let k = if p.state.u > q.state.u { 1 } else { 0 };
        assert_eq!(m.unstable_end[k], TraceEnd::Stopped);
        assert!(m.unstable[k].last().unwrap().dist(p.state) < 1e-6);
        // near q the unstable branches and the stable branches sit on opposite sides of H*
        let side = |x: &State| (x.n - equilibria::h_star(x.u, &l).unwrap()).signum();
        let su = side(&m.unstable[k][m.unstable[k].len() / 4]);
        assert!(m.stable.iter().any(|b| side(&b[b.len() / 10]) == -su));
        assert!(matches!(
            saddle_manifolds(p.state, p.dose, &l, &o),
            Err(Error::NotASaddle { .. })
        ));
    }

    #[test]
    fn csv_and_summary() {
        let l = ex("a");
        let o = OmegaOptions::default();
        let curves = build_all((0.3, 1.75), &l, &o).unwrap();
        let mut buf = Vec::new();
        curves[0].write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "u,n,piece,provenance,dose,anchor_u,anchor_n");
        assert_eq!(text.lines().count(), curves[0].points.len() + 1);
        assert!(text.contains(",1,forward_orbit,"));
        let js: serde_json::Value = serde_json::from_str(&summaries_json(&curves).unwrap()).unwrap();
        assert_eq!(js[0]["omega_type"], 1);
        assert_eq!(js[0]["intersects_e"], false);
    }
}
