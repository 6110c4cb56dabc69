//! Equilibrium graph `u -> (a*(u), h*(u))`, its stability labels and the
//! connected components of feasible equilibria over a dose range.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::landscape::{Grid, Landscape};

pub const DEFAULT_DERIV_TOL: f64 = 1e-8;
/// Endpoint refinement tolerance in trait units.
pub const REFINE_TOL: f64 = 1e-12;
/// Two doses closer than this are treated as equal when testing hyperbolicity.
pub const DOSE_TOL: f64 = 1e-9;

/// Default equilibrium grid: 2000 points over the default window.
pub fn default_u_grid() -> Grid {
    Grid::new(-0.5, 1.5, 2000)
}

struct Quotient {
    n: [f64; 3],
    d: [f64; 3],
}

fn quotient(u: f64, l: &Landscape) -> Quotient {
    let b = l.b0_jet(u);
    let p = l.b1_jet(u);
    let c = l.c_jet(u);
    Quotient {
        n: [
            b.d1 * c.v - c.d1 * b.v,
            b.d2 * c.v - c.d2 * b.v,
            b.d3 * c.v + b.d2 * c.d1 - c.d3 * b.v - c.d2 * b.d1,
        ],
        d: [
            p.d1 * c.v - c.d1 * p.v,
            p.d2 * c.v - c.d2 * p.v,
            p.d3 * c.v + p.d2 * c.d1 - c.d3 * p.v - c.d2 * p.d1,
        ],
    }
}

fn checked(u: f64, l: &Landscape) -> Result<Quotient> {
    let c = l.c(u);
    if !(c > 0.0) {
        return Err(Error::NonPositiveInteraction { u, value: c });
    }
    let q = quotient(u, l);
    if !(q.d[0] < -1e-14) {
        return Err(Error::H3Violation {
            u,
            denominator: q.d[0],
        });
    }
    Ok(q)
}

/// Unique dose making `(u, h(u, a))` an equilibrium.
pub fn a_star(u: f64, l: &Landscape) -> Result<f64> {
    let q = checked(u, l)?;
    Ok(q.n[0] / q.d[0])
}

/// `d a*/du`, from the quotient rule on the closed form.
pub fn a_star_prime(u: f64, l: &Landscape) -> Result<f64> {
    let q = checked(u, l)?;
    let (n, d) = (q.n, q.d);
    Ok((n[1] * d[0] - n[0] * d[1]) / (d[0] * d[0]))
}

/// Equivalent form `c (b'' - c'' h*) / D` used as a cross-check.
pub fn a_star_prime_alt(u: f64, l: &Landscape) -> Result<f64> {
    let q = checked(u, l)?;
    let a = q.n[0] / q.d[0];
    let b = l.b_jet(u, a);
    let c = l.c_jet(u);
    let hs = b.v / c.v;
    Ok(c.v * (b.d2 - c.d2 * hs) / q.d[0])
}

pub fn a_star_second(u: f64, l: &Landscape) -> Result<f64> {
    let q = checked(u, l)?;
    let (n, d) = (q.n, q.d);
    let first = n[1] * d[0] - n[0] * d[1];
    Ok((n[2] * d[0] - n[0] * d[2]) / (d[0] * d[0]) - 2.0 * d[1] * first / d[0].powi(3))
}

pub fn h_star(u: f64, l: &Landscape) -> Result<f64> {
    l.h(u, a_star(u, l)?)
}

/// Equilibrium point `(u, h*(u))` together with its dose.
pub fn equilibrium(u: f64, l: &Landscape) -> Result<(State, f64)> {
    let a = a_star(u, l)?;
    Ok((State::new(u, l.h(u, a)?), a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    StableNode,
    Saddle,
    FoldCandidate,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::StableNode => "stable_node",
            Label::Saddle => "saddle",
            Label::FoldCandidate => "fold_candidate",
        }
    }
}

fn label_of(slope: f64, deriv_tol: f64) -> Label {
    if slope > deriv_tol {
        Label::StableNode
    } else if slope < -deriv_tol {
        Label::Saddle
    } else {
        Label::FoldCandidate
    }
}

pub fn classify(u: f64, l: &Landscape, deriv_tol: f64) -> Result<Label> {
    Ok(label_of(a_star_prime(u, l)?, deriv_tol))
}

/// Eigenvalues of the reduced Jacobian at `(u, h*(u))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Eigs {
    /// `-c / k~(h*)`, eigenvector `(0, 1)`.
    pub fast: f64,
    /// `eps (b'' - c'' h*)`, eigenvector with nonzero u-component.
    pub slow: f64,
}

impl Eigs {
    pub fn sorted(self) -> [f64; 2] {
        if self.fast <= self.slow {
            [self.fast, self.slow]
        } else {
            [self.slow, self.fast]
        }
    }
}

/// Closed-form eigenvalues of the upper-triangular Jacobian on the graph.
pub fn jacobian_eigs(u: f64, l: &Landscape) -> Result<Eigs> {
    let (x, a) = equilibrium(u, l)?;
    let b = l.b_jet(u, a);
    let c = l.c_jet(u);
    Ok(Eigs {
        fast: -c.v / l.rate.k_tilde(x.n),
        slow: l.epsilon * (b.d2 - c.d2 * x.n),
    })
}

/// Real eigenvalues of a 2x2 matrix in ascending order, `None` if complex.
pub fn eig2(j: [[f64; 2]; 2]) -> Option<[f64; 2]> {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let half = 0.5 * (j[0][0] - j[1][1]);
    let disc = half * half + j[0][1] * j[1][0];
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // Avoid cancellation: compute the larger-magnitude root first.
    let m = 0.5 * tr;
    let big = if m >= 0.0 { m + s } else { m - s };
    let small = if big != 0.0 { det / big } else { m - s };
    let mut out = [big, small];
    out.sort_by(|a, b| a.total_cmp(b));
    Some(out)
}

/// Eigenvalues of the central-difference Jacobian of the reduced field.
pub fn fd_jacobian_eigs(u: f64, l: &Landscape, step: f64) -> Result<Option<[f64; 2]>> {
    let (x, a) = equilibrium(u, l)?;
    let mut j = [[0.0; 2]; 2];
    for col in 0..2 {
        let mut p = x.to_array();
        let mut m = x.to_array();
        p[col] += step;
        m[col] -= step;
        let fp = crate::dynamics::f_reduced(State::from_array(p), a, l)?;
        let fm = crate::dynamics::f_reduced(State::from_array(m), a, l)?;
        for row in 0..2 {
            j[row][col] = (fp[row] - fm[row]) / (2.0 * step);
        }
    }
    Ok(eig2(j))
}

/// All doses in `[a_lo, a_hi]` where `dh/du(u, .)` changes sign, located by a
/// uniform scan plus bisection. Independent of the closed form for `a*`.
pub fn scan_equilibrium_doses(u: f64, l: &Landscape, a_lo: f64, a_hi: f64, samples: usize) -> Result<Vec<f64>> {
    let g = |a: f64| l.dh_du(u, a);
    let grid = Grid::new(a_lo, a_hi, samples.max(2));
    let mut roots = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for a in grid.iter() {
        let v = g(a)?;
        if v == 0.0 {
            roots.push(a);
        } else if let Some((pa, pv)) = prev {
            if pv != 0.0 && (pv > 0.0) != (v > 0.0) {
                let (mut lo, mut hi, mut glo) = (pa, a, pv);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    let gm = g(mid)?;
                    if gm == 0.0 {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if (gm > 0.0) == (glo > 0.0) {
                        lo = mid;
                        glo = gm;
                    } else {
                        hi = mid;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
        }
        prev = Some((a, v));
    }
    Ok(roots)
}

/// Bisection for a sign change of `g` on `[lo, hi]`.
fn bisect<G: Fn(f64) -> Result<f64>>(g: G, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut glo = g(lo)?;
    if glo == 0.0 {
        return Ok(lo);
    }
    if g(hi)? == 0.0 {
        return Ok(hi);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let gm = g(mid)?;
        if gm == 0.0 {
            return Ok(mid);
        }
        if (gm > 0.0) == (glo > 0.0) {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sampled equilibrium graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumBranch {
    pub u: Vec<f64>,
    pub a_star: Vec<f64>,
    pub h_star: Vec<f64>,
    pub a_star_prime: Vec<f64>,
    pub labels: Vec<Label>,
    pub eigs: Vec<Eigs>,
}

impl EquilibriumBranch {
    pub fn compute(l: &Landscape, u_grid: &Grid, deriv_tol: f64) -> Result<Self> {
        let n = u_grid.points;
        let mut br = EquilibriumBranch {
            u: Vec::with_capacity(n),
            a_star: Vec::with_capacity(n),
            h_star: Vec::with_capacity(n),
            a_star_prime: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            eigs: Vec::with_capacity(n),
        };
        for u in u_grid.iter() {
            let a = a_star(u, l)?;
            let ap = a_star_prime(u, l)?;
            br.u.push(u);
            br.a_star.push(a);
            br.h_star.push(l.h(u, a)?);
            br.a_star_prime.push(ap);
            br.labels.push(label_of(ap, deriv_tol));
            br.eigs.push(jacobian_eigs(u, l)?);
        }
        Ok(br)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "u,a_star,h_star,a_star_prime,label")?;
        for i in 0..self.u.len() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{}",
                self.u[i],
                self.a_star[i],
                self.h_star[i],
                self.a_star_prime[i],
                self.labels[i].as_str()
            )?;
        }
        Ok(())
    }
}

/// Zero of `a*'` on the grid, refined by bisection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fold {
    pub u: f64,
    pub dose: f64,
    pub a_star_second: f64,
    /// `a*''` vanishes as well (flagged, not sub-classified).
    pub degenerate: bool,
}

pub fn folds(l: &Landscape, u_grid: &Grid) -> Result<Vec<Fold>> {
    let us = u_grid.values();
    let mut slopes = Vec::with_capacity(us.len());
    for &u in &us {
        slopes.push(a_star_prime(u, l)?);
    }
    let mut out = Vec::new();
    for i in 0..us.len() {
        let hit = if slopes[i] == 0.0 {
            Some(us[i])
        } else if i + 1 < us.len() && slopes[i + 1] != 0.0 && (slopes[i] > 0.0) != (slopes[i + 1] > 0.0) {
            Some(bisect(|u| a_star_prime(u, l), us[i], us[i + 1], REFINE_TOL)?)
        } else {
            None
        };
        if let Some(u) = hit {
            let s = a_star_second(u, l)?;
            out.push(Fold {
                u,
                dose: a_star(u, l)?,
                a_star_second: s,
                degenerate: s.abs() <= DEFAULT_DERIV_TOL,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HyperbolicityCheck {
    pub hyperbolic: bool,
    /// Trait values where an extremal equilibrium is degenerate.
    pub witnesses: Vec<f64>,
}

/// A dose range is hyperbolic iff no extremal-dose equilibrium has `a*' = 0`.
pub fn is_hyperbolic(range: (f64, f64), l: &Landscape, u_grid: &Grid, deriv_tol: f64) -> Result<HyperbolicityCheck> {
    let mut witnesses = Vec::new();
    for f in folds(l, u_grid)? {
        if (f.dose - range.0).abs() <= DOSE_TOL || (f.dose - range.1).abs() <= DOSE_TOL {
            witnesses.push(f.u);
        }
    }
    for bound in [range.0, range.1] {
        for u in preimages(bound, l, u_grid)? {
            if a_star_prime(u, l)?.abs() <= deriv_tol && !witnesses.iter().any(|w| (w - u).abs() < 1e-9) {
                witnesses.push(u);
            }
        }
    }
    witnesses.sort_by(|a, b| a.total_cmp(b));
    Ok(HyperbolicityCheck {
        hyperbolic: witnesses.is_empty(),
        witnesses,
    })
}

/// Solutions of `a*(u) = a` on the grid (sign changes, bisected).
pub fn preimages(a: f64, l: &Landscape, u_grid: &Grid) -> Result<Vec<f64>> {
    let us = u_grid.values();
    let mut vals = Vec::with_capacity(us.len());
    for &u in &us {
        vals.push(a_star(u, l)? - a);
    }
    let mut out = Vec::new();
    for i in 0..us.len() {
        if vals[i] == 0.0 {
            out.push(us[i]);
        } else if i + 1 < us.len() && vals[i + 1] != 0.0 && (vals[i] > 0.0) != (vals[i + 1] > 0.0) {
            out.push(bisect(|u| Ok(a_star(u, l)? - a), us[i], us[i + 1], REFINE_TOL)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComponentType {
    /// Both endpoints stable nodes.
    #[serde(rename = "1")]
    NodeNode,
    /// Both endpoints saddles.
    #[serde(rename = "2")]
    SaddleSaddle,
    /// One node, one saddle.
    #[serde(rename = "3")]
    NodeSaddle,
}

impl ComponentType {
    pub fn number(self) -> u8 {
        match self {
            ComponentType::NodeNode => 1,
            ComponentType::SaddleSaddle => 2,
            ComponentType::NodeSaddle => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Endpoint {
    pub state: State,
    pub dose: f64,
    pub label: Label,
}

/// Maximal u-interval with `a*(u)` inside the dose range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub id: usize,
    pub interval: (f64, f64),
    pub left: Endpoint,
    pub right: Endpoint,
    pub kind: ComponentType,
    pub range: (f64, f64),
}

impl Component {
    /// Equilibrium on the component at an interior trait value.
    pub fn interior_point(&self, s: f64, l: &Landscape) -> Result<State> {
        let u = self.interval.0 + s * (self.interval.1 - self.interval.0);
        Ok(equilibrium(u, l)?.0)
    }

    pub fn contains_u(&self, u: f64) -> bool {
        u >= self.interval.0 && u <= self.interval.1
    }
}

fn endpoint(u: f64, dose: f64, l: &Landscape, deriv_tol: f64) -> Result<Endpoint> {
    Ok(Endpoint {
        state: State::new(u, l.h(u, dose)?),
        dose,
        label: classify(u, l, deriv_tol)?,
    })
}

/// Connected components of feasible equilibria for `range = (a-, a+)`.
pub fn components(range: (f64, f64), l: &Landscape, u_grid: &Grid, deriv_tol: f64) -> Result<Vec<Component>> {
    let (lo, hi) = range;
    if !(lo <= hi) {
        return Err(Error::Config(format!("empty dose range [{lo}, {hi}]")));
    }
    let hyp = is_hyperbolic(range, l, u_grid, deriv_tol)?;
    if !hyp.hyperbolic {
        return Err(Error::NotHyperbolic {
            lo,
            hi,
            witnesses: hyp.witnesses,
        });
    }
    let us = u_grid.values();
    let mut a = Vec::with_capacity(us.len());
    for &u in &us {
        a.push(a_star(u, l)?);
    }
    let inside = |v: f64| v >= lo && v <= hi;

    // A local extremum of a* inside a cell whose feasibility differs from
    // both cell ends means a component (or gap) narrower than the grid.
    for f in folds(l, u_grid)? {
        let i = us.partition_point(|&u| u <= f.u).saturating_sub(1);
        if i + 1 >= us.len() {
            continue;
        }
        let (fi, fj) = (inside(a[i]), inside(a[i + 1]));
        let ff = inside(f.dose);
        if fi == fj && ff != fi {
            return Err(Error::GridTooCoarse(format!(
                "feasibility changes twice inside the cell [{}, {}] around the fold at u = {}",
                us[i],
                us[i + 1],
                f.u
            )));
        }
    }

    let mut comps = Vec::new();
    let mut i = 0;
    while i < us.len() {
        if !inside(a[i]) {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < us.len() && inside(a[i + 1]) {
            i += 1;
        }
        let end = i;
        i += 1;
        if start == 0 || end + 1 == us.len() {
            return Err(Error::GridTooCoarse(format!(
                "feasible equilibria reach the end of the u-grid [{}, {}]; widen the grid",
                u_grid.min, u_grid.max
            )));
        }
        let refine = |inner: usize, outer: usize| -> Result<(f64, f64)> {
            let bound = if a[outer] < lo { lo } else { hi };
            let (x0, x1) = if inner < outer {
                (us[inner], us[outer])
            } else {
                (us[outer], us[inner])
            };
            let u = bisect(|u| Ok(a_star(u, l)? - bound), x0, x1, REFINE_TOL)?;
            Ok((u, bound))
        };
        let (ul, al) = refine(start, start - 1)?;
        let (ur, ar) = refine(end, end + 1)?;
        let left = endpoint(ul, al, l, deriv_tol)?;
        let right = endpoint(ur, ar, l, deriv_tol)?;
        let kind = match (left.label, right.label) {
            (Label::StableNode, Label::StableNode) => ComponentType::NodeNode,
            (Label::Saddle, Label::Saddle) => ComponentType::SaddleSaddle,
            (Label::FoldCandidate, _) | (_, Label::FoldCandidate) => {
                return Err(Error::NotHyperbolic {
                    lo,
                    hi,
                    witnesses: vec![if left.label == Label::FoldCandidate { ul } else { ur }],
                })
            }
            _ => ComponentType::NodeSaddle,
        };
        comps.push(Component {
            id: comps.len(),
            interval: (ul, ur),
            left,
            right,
            kind,
            range,
        });
    }
    Ok(comps)
}

/// JSON summary of components.
pub fn components_json(comps: &[Component]) -> Result<String> {
    Ok(serde_json::to_string_pretty(comps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::f_reduced;
    use crate::landscape::{preset, Interaction, Sigmoid};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex(name: &str) -> Landscape {
        preset(name).unwrap().landscape
    }

    fn kinds(c: &[Component]) -> Vec<u8> {
        c.iter().map(|c| c.kind.number()).collect()
    }

    #[test]
    fn unit_interaction_simplifies() {
        let l = ex("a");
        for u in [-0.2, 0.1, 0.5, 1.2] {
            let expect = l.b0_jet(u).d1 / l.b1_jet(u).d1;
            let got = a_star(u, &l).unwrap();
            assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
            let hs = h_star(u, &l).unwrap();
            assert!((hs - (l.b0(u) - got * l.b1(u))).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_dose_at_critical_point_of_b0() {
        let l = ex("a");
        // b0' has a root between 0 and 0.3 for preset a.
        let u = bisect(|u| Ok(l.b0_jet(u).d1), -0.2, 0.3, 1e-14).unwrap();
        assert!(a_star(u, &l).unwrap().abs() < 1e-9);
        let f = f_reduced(State::new(u, h_star(u, &l).unwrap()), 0.0, &l).unwrap();
        assert!(f[0].abs() < 1e-10 && f[1].abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in ["a", "b", "c", "d"] {
            let l = ex(name);
            let mut checked_pts = 0;
            while checked_pts < 30 {
                let u: f64 = rng.gen_range(-0.5..1.5);
                let a = a_star(u, &l).unwrap();
                if a.abs() > 20.0 {
                    continue;
                }
                let roots = scan_equilibrium_doses(u, &l, -25.0, 25.0, 400).unwrap();
                assert_eq!(roots.len(), 1, "{name} u={u}");
                assert!((roots[0] - a).abs() < 1e-8, "{name} u={u}: {} vs {a}", roots[0]);
                checked_pts += 1;
            }
        }
    }

    #[test]
    fn analytic_slope_matches_alternative_and_fd() {
        for name in ["a", "b", "c", "d"] {
            let l = ex(name).with_interaction(Interaction::Exponential {
                scale: 1.0,
                rate: 0.2,
            });
            for u in [-0.3, 0.05, 0.25, 0.6, 0.9, 1.3] {
                let p = a_star_prime(u, &l).unwrap();
                let alt = a_star_prime_alt(u, &l).unwrap();
                assert!((p - alt).abs() <= 1e-9 * (1.0 + p.abs()), "{name} {u}: {p} vs {alt}");
                let d = 1e-5;
                let fd = (a_star(u + d, &l).unwrap() - a_star(u - d, &l).unwrap()) / (2.0 * d);
                assert!((p - fd).abs() <= 1e-5 * (1.0 + p.abs()), "{name} {u}: {p} vs {fd}");
                let s = a_star_second(u, &l).unwrap();
                let fd2 = (a_star_prime(u + d, &l).unwrap() - a_star_prime(u - d, &l).unwrap()) / (2.0 * d);
                assert!((s - fd2).abs() <= 1e-4 * (1.0 + s.abs()), "{name} {u}: {s} vs {fd2}");
            }
        }
    }

    #[test]
    fn equilibria_are_zeros_of_reduced_field() {
        for name in ["a", "c", "d"] {
            let l = ex(name);
            for u in Grid::new(-0.4, 1.4, 37).iter() {
                let (x, a) = equilibrium(u, &l).unwrap();
                let f = f_reduced(x, a, &l).unwrap();
                assert!(f[0].abs() < 1e-10 && f[1].abs() < 1e-10, "{name} {u} {f:?}");
            }
        }
    }

    #[test]
    fn preset_a_feasible_equilibria_are_nodes() {
        let l = ex("a");
        let comps = components((0.3, 1.75), &l, &default_u_grid(), DEFAULT_DERIV_TOL).unwrap();
        assert_eq!(kinds(&comps), vec![1]);
        let c = &comps[0];
        for u in Grid::new(c.interval.0, c.interval.1, 50).iter() {
            assert_eq!(classify(u, &l, DEFAULT_DERIV_TOL).unwrap(), Label::StableNode);
        }
        assert!((c.left.dose - 0.3).abs() < 1e-12 && (c.right.dose - 1.75).abs() < 1e-12);
        assert!((a_star(c.left.state.u, &l).unwrap() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn preset_c_two_components() {
        let l = ex("c");
        let comps = components((0.15, 0.8), &l, &default_u_grid(), DEFAULT_DERIV_TOL).unwrap();
        let mut k = kinds(&comps);
        k.sort();
        assert_eq!(k, vec![1, 3]);
        assert!(comps[0].interval.1 < comps[1].interval.0);
        assert!(!folds(&l, &default_u_grid()).unwrap().is_empty());
    }

    #[test]
    fn preset_d_three_homogeneous_components() {
        let l = ex("d");
        let comps = components((0.1, 0.45), &l, &default_u_grid(), DEFAULT_DERIV_TOL).unwrap();
        assert_eq!(comps.len(), 3);
        for c in &comps {
            assert!(matches!(c.kind, ComponentType::NodeNode | ComponentType::SaddleSaddle));
        }
    }

    #[test]
    fn empty_range_intersection_gives_no_components() {
        let l = ex("a");
        let comps = components((50.0, 60.0), &l, &default_u_grid(), DEFAULT_DERIV_TOL).unwrap();
        assert!(comps.is_empty());
    }

    #[test]
    fn fold_touching_range_is_not_hyperbolic() {
        let l = ex("c");
        let g = default_u_grid();
        let f = folds(&l, &g)
            .unwrap()
            .into_iter()
            .find(|f| f.u > 0.0 && f.u < 1.0)
            .unwrap();
        let chk = is_hyperbolic((f.dose, f.dose + 0.3), &l, &g, DEFAULT_DERIV_TOL).unwrap();
        assert!(!chk.hyperbolic);
        assert!(chk.witnesses.iter().any(|w| (w - f.u).abs() < 1e-9));
        assert!(matches!(
            components((f.dose, f.dose + 0.3), &l, &g, DEFAULT_DERIV_TOL),
            Err(Error::NotHyperbolic { .. })
        ));
        assert!(is_hyperbolic((0.15, 0.8), &l, &g, DEFAULT_DERIV_TOL).unwrap().hyperbolic);
        // degenerate range at a regular value
        assert!(is_hyperbolic((0.5, 0.5), &l, &g, DEFAULT_DERIV_TOL).unwrap().hyperbolic);
    }

    #[test]
    fn monotone_synthetic_landscape_has_no_folds() {
        // quadratic b0 and a nearly linear b1: a* = b0'/b1' is monotone
        let l = Landscape::from_arrays(&[0.0], &[0.0], &[0.0], [1.0, 0.5, 1.0], &[[1.0, 1.0, 1.0, 0.1, 1.0, 0.0, 0.0]])
            .unwrap();
        let g = default_u_grid();
        let br = EquilibriumBranch::compute(&l, &g, DEFAULT_DERIV_TOL).unwrap();
        assert!(br.labels.iter().all(|&x| x != Label::FoldCandidate));
        assert!(folds(&l, &g).unwrap().is_empty());
    }

    #[test]
    fn eigenvalues_match_finite_differences_and_labels() {
        for name in ["a", "c", "d"] {
            let l = ex(name);
            for u in Grid::new(-0.3, 1.3, 41).iter() {
                let e = jacobian_eigs(u, &l).unwrap();
                assert!(e.fast < 0.0);
                let fd = fd_jacobian_eigs(u, &l, 1e-6).unwrap().unwrap();
                let cf = e.sorted();
                for k in 0..2 {
                    assert!((fd[k] - cf[k]).abs() <= 1e-6 * cf[k].abs().max(1e-3), "{name} {u}: {fd:?} vs {cf:?}");
                }
                match classify(u, &l, DEFAULT_DERIV_TOL).unwrap() {
                    Label::StableNode => assert!(e.slow < 0.0),
                    Label::Saddle => assert!(e.slow > 0.0),
                    Label::FoldCandidate => assert!(e.slow.abs() < 1e-6),
                }
            }
        }
    }

    #[test]
    fn eig2_handles_triangular_and_complex() {
        assert_eq!(eig2([[2.0, 5.0], [0.0, -1.0]]), Some([-1.0, 2.0]));
        assert_eq!(eig2([[0.0, -1.0], [1.0, 0.0]]), None);
    }

    #[test]
    fn branch_invariants_and_csv() {
        let l = ex("c");
        let g = Grid::new(-0.5, 1.5, 101);
        let br = EquilibriumBranch::compute(&l, &g, DEFAULT_DERIV_TOL).unwrap();
        for i in 0..br.u.len() {
            assert!((br.h_star[i] - l.h(br.u[i], br.a_star[i]).unwrap()).abs() < 1e-10);
            assert_eq!(br.labels[i], label_of(br.a_star_prime[i], DEFAULT_DERIV_TOL));
        }
        let mut buf = Vec::new();
        br.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u,a_star,h_star,a_star_prime,label\n"));
        assert_eq!(text.lines().count(), 102);
    }

    #[test]
    fn h3_violation_reported() {
        let mut l = ex("a");
        l.sigmoids = vec![Sigmoid([0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0])];
        assert!(matches!(a_star(0.2, &l), Err(Error::H3Violation { .. })));
    }

    #[test]
    fn components_json_has_types() {
        let l = ex("c");
        let comps = components((0.15, 0.8), &l, &default_u_grid(), DEFAULT_DERIV_TOL).unwrap();
        let v: serde_json::Value = serde_json::from_str(&components_json(&comps).unwrap()).unwrap();
        let arr = v.as_array().unwrap();
        assert_eq!(arr.len(), 2);
        assert!(arr.iter().any(|c| c["kind"] == "3"));
    }

    proptest! {
        #[test]
        fn components_are_disjoint_and_cover_feasible_set(lo in 0.0f64..0.6, width in 0.05f64..0.8) {
            let l = ex("c");
            let g = default_u_grid();
            let range = (lo, lo + width);
            let comps = match components(range, &l, &g, DEFAULT_DERIV_TOL) {
                Ok(c) => c,
                Err(Error::NotHyperbolic { .. }) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            for w in comps.windows(2) {
                prop_assert!(w[0].interval.1 < w[1].interval.0);
            }
            for u in g.iter() {
                let a = a_star(u, &l).unwrap();
                let feas = a >= range.0 && a <= range.1;
                let covered = comps.iter().any(|c| c.contains_u(u));
                prop_assert_eq!(feas, covered, "u = {}", u);
            }
        }
    }
}
