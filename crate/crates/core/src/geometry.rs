//! Planar polyline and polygon utilities.

use crate::dynamics::State;

/// Endpoint snapping for segment intersections, in segment-parameter units.
pub const SNAP: f64 = 1e-10;

fn cross(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

/// Crossing of segments `p1p2` and `q1q2`. Returns `(t, s, point)` with
/// `point = p1 + t (p2 - p1) = q1 + s (q2 - q1)`. Parallel segments never
/// intersect here. Parameters within `SNAP` of `[0, 1]` are accepted and
/// clamped.
pub fn segment_intersection(p1: State, p2: State, q1: State, q2: State) -> Option<(f64, f64, State)> {
    let (rx, ry) = (p2.u - p1.u, p2.n - p1.n);
    let (sx, sy) = (q2.u - q1.u, q2.n - q1.n);
    let denom = cross(rx, ry, sx, sy);
    if denom == 0.0 {
        return None;
    }
    let (qx, qy) = (q1.u - p1.u, q1.n - p1.n);
    let t = cross(qx, qy, sx, sy) / denom;
    let s = cross(qx, qy, rx, ry) / denom;
    if t < -SNAP || t > 1.0 + SNAP || s < -SNAP || s > 1.0 + SNAP {
        return None;
    }
    let t = t.clamp(0.0, 1.0);
    let s = s.clamp(0.0, 1.0);
    Some((t, s, State::new(p1.u + t * rx, p1.n + t * ry)))
}

/// First crossing between two open polylines, scanning `a` in order.
/// Returns `(segment index in a, t, segment index in b, s, point)`.
pub fn first_crossing(a: &[State], b: &[State]) -> Option<(usize, f64, usize, f64, State)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let index = SegmentGrid::new(b, false);
    for i in 0..a.len() - 1 {
        let mut best: Option<(f64, usize, f64, State)> = None;
        index.visit_bbox(a[i], a[i + 1], |j| {
            if let Some((t, s, x)) = segment_intersection(a[i], a[i + 1], b[j], b[j + 1]) {
                if best.map_or(true, |bst| t < bst.0) {
                    best = Some((t, j, s, x));
                }
            }
        });
        if let Some((t, j, s, x)) = best {
            return Some((i, t, j, s, x));
        }
    }
    None
}

/// Shoelace area; positive for counter-clockwise vertex order. The closing
/// edge is implicit.
pub fn signed_area(poly: &[State]) -> f64 {
    let m = poly.len();
    if m < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..m {
        let a = poly[i];
        let b = poly[(i + 1) % m];
        s += a.u * b.n - b.u * a.n;
    }
    0.5 * s
}

pub fn dist_point_segment(x: State, a: State, b: State) -> f64 {
    let (dx, dy) = (b.u - a.u, b.n - a.n);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x.u - a.u) * dx + (x.n - a.n) * dy) / len2).clamp(0.0, 1.0)
    };
    (x.u - a.u - t * dx).hypot(x.n - a.n - t * dy)
}

/// Brute-force even-odd test; the closing edge is implicit.
pub fn point_in_polygon(poly: &[State], x: State) -> bool {
    let m = poly.len();
    let mut inside = false;
    for i in 0..m {
        let a = poly[i];
        let b = poly[(i + 1) % m];
        if (a.u > x.u) != (b.u > x.u) {
            let n_at = a.n + (x.u - a.u) * (b.n - a.n) / (b.u - a.u);
            if n_at > x.n {
                inside = !inside;
            }
        }
    }
    inside
}

/// Uniform 2-D bucket grid over segments of a polyline.
#[derive(Debug, Clone)]
struct SegmentGrid {
    lo: (f64, f64),
    cell: (f64, f64),
    dims: (usize, usize),
    cells: Vec<Vec<u32>>,
}

impl SegmentGrid {
    /// `closed` adds the implicit segment from the last to the first vertex.
    fn new(pts: &[State], closed: bool) -> Self {
        let m = pts.len();
        let n_seg = if closed { m } else { m.saturating_sub(1) };
        let (mut umin, mut umax, mut nmin, mut nmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            umin = umin.min(p.u);
            umax = umax.max(p.u);
            nmin = nmin.min(p.n);
            nmax = nmax.max(p.n);
        }
        let side = ((n_seg as f64).sqrt() as usize).clamp(1, 512);
        let span_u = (umax - umin).max(1e-12);
        let span_n = (nmax - nmin).max(1e-12);
        // square cells keep ring searches tight for elongated curves
        let h = span_u.max(span_n) / side as f64;
        let dims = (((span_u / h).ceil() as usize).clamp(1, side), ((span_n / h).ceil() as usize).clamp(1, side));
        let mut g = SegmentGrid {
            lo: (umin, nmin),
            cell: (h, h),
            dims,
            cells: vec![Vec::new(); dims.0 * dims.1],
        };
        for i in 0..n_seg {
            let (a, b) = (pts[i], pts[(i + 1) % m]);
            let (i0, j0) = g.cell_of(a.u.min(b.u), a.n.min(b.n));
            let (i1, j1) = g.cell_of(a.u.max(b.u), a.n.max(b.n));
            for ii in i0..=i1 {
                for jj in j0..=j1 {
                    g.cells[jj * g.dims.0 + ii].push(i as u32);
                }
            }
        }
        g
    }

    fn cell_of(&self, u: f64, n: f64) -> (usize, usize) {
        let fi = ((u - self.lo.0) / self.cell.0).floor();
        let fj = ((n - self.lo.1) / self.cell.1).floor();
        let ci = if fi.is_nan() || fi < 0.0 { 0 } else { (fi as usize).min(self.dims.0 - 1) };
        let cj = if fj.is_nan() || fj < 0.0 { 0 } else { (fj as usize).min(self.dims.1 - 1) };
        (ci, cj)
    }

    /// Calls `f` for every indexed segment whose cells overlap the bounding
    /// box of `ab` (possibly more than once).
    fn visit_bbox<F: FnMut(usize)>(&self, a: State, b: State, mut f: F) {
        let umax = self.lo.0 + self.cell.0 * self.dims.0 as f64;
        let nmax = self.lo.1 + self.cell.1 * self.dims.1 as f64;
        if a.u.max(b.u) < self.lo.0 || a.u.min(b.u) > umax || a.n.max(b.n) < self.lo.1 || a.n.min(b.n) > nmax {
            return;
        }
        let (i0, j0) = self.cell_of(a.u.min(b.u), a.n.min(b.n));
        let (i1, j1) = self.cell_of(a.u.max(b.u), a.n.max(b.n));
        for jj in j0..=j1 {
            for ii in i0..=i1 {
                for &s in &self.cells[jj * self.dims.0 + ii] {
                    f(s as usize);
                }
            }
        }
    }
}

/// Where a point lies relative to a closed polygon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Inside,
    Outside,
    Boundary,
}

/// Closed polygon with spatial indices for fast containment and distance
/// queries on large vertex counts.
#[derive(Debug, Clone)]
pub struct PolygonIndex {
    pts: Vec<State>,
    grid: SegmentGrid,
    // edges bucketed by u-range for the vertical ray test
    u_lo: f64,
    u_w: f64,
    u_bins: Vec<Vec<u32>>,
}

impl PolygonIndex {
    pub fn new(poly: &[State]) -> Self {
        let pts = poly.to_vec();
        let m = pts.len();
        let grid = SegmentGrid::new(&pts, true);
        let umin = pts.iter().map(|p| p.u).fold(f64::INFINITY, f64::min);
        let umax = pts.iter().map(|p| p.u).fold(f64::NEG_INFINITY, f64::max);
        let nb = (m / 2).clamp(1, 4096);
        let u_w = ((umax - umin) / nb as f64).max(1e-15);
        let mut u_bins = vec![Vec::new(); nb];
        for i in 0..m {
            let (a, b) = (pts[i], pts[(i + 1) % m]);
            let b0 = (((a.u.min(b.u) - umin) / u_w).floor().max(0.0) as usize).min(nb - 1);
            let b1 = (((a.u.max(b.u) - umin) / u_w).floor().max(0.0) as usize).min(nb - 1);
            for bin in &mut u_bins[b0..=b1] {
                bin.push(i as u32);
            }
        }
        PolygonIndex {
            pts,
            grid,
            u_lo: umin,
            u_w,
            u_bins,
        }
    }

    pub fn vertices(&self) -> &[State] {
        &self.pts
    }

    fn edge(&self, i: usize) -> (State, State) {
        (self.pts[i], self.pts[(i + 1) % self.pts.len()])
    }

    /// Even-odd test with an upward vertical ray.
    pub fn contains(&self, x: State) -> bool {
        if self.pts.len() < 3 {
            return false;
        }
        let f = ((x.u - self.u_lo) / self.u_w).floor();
        if !(f >= 0.0) || f as usize >= self.u_bins.len() + 1 {
            return false;
        }
        let bin = (f as usize).min(self.u_bins.len() - 1);
        let mut inside = false;
        for &i in &self.u_bins[bin] {
            let (a, b) = self.edge(i as usize);
            if (a.u > x.u) != (b.u > x.u) {
                let n_at = a.n + (x.u - a.u) * (b.n - a.n) / (b.u - a.u);
                if n_at > x.n {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Euclidean distance to the boundary.
    pub fn boundary_distance(&self, x: State) -> f64 {
        self.boundary_distance_below(x, f64::INFINITY)
    }

    /// Distance to the boundary when it is below `cap`; otherwise some value
    /// at least `cap` (possibly infinite). Much cheaper for far points.
    pub fn boundary_distance_below(&self, x: State, cap: f64) -> f64 {
        let g = &self.grid;
        if self.pts.is_empty() {
            return f64::INFINITY;
        }
        let (ci, cj) = g.cell_of(x.u, x.n);
        let umax = g.lo.0 + g.cell.0 * g.dims.0 as f64;
        let nmax = g.lo.1 + g.cell.1 * g.dims.1 as f64;
        let du = (g.lo.0 - x.u).max(x.u - umax).max(0.0);
        let dn = (g.lo.1 - x.n).max(x.n - nmax).max(0.0);
        let outside = du.hypot(dn);
        let step = g.cell.0.min(g.cell.1);
        let max_r = g.dims.0.max(g.dims.1);
        let mut best = f64::INFINITY;
        if outside >= cap {
            return outside;
        }
        for r in 0..=max_r {
            let bound = outside.hypot((r as f64 - 1.0).max(0.0) * step);
            if bound > best || bound >= cap {
                break;
            }
            let (i0, i1) = (ci as isize - r as isize, ci as isize + r as isize);
            let (j0, j1) = (cj as isize - r as isize, cj as isize + r as isize);
            for jj in j0..=j1 {
                if jj < 0 || jj as usize >= g.dims.1 {
                    continue;
                }
                for ii in i0..=i1 {
                    if ii < 0 || ii as usize >= g.dims.0 {
                        continue;
                    }
                    if jj != j0 && jj != j1 && ii != i0 && ii != i1 {
                        continue;
                    }
                    for &s in &g.cells[jj as usize * g.dims.0 + ii as usize] {
                        let (a, b) = self.edge(s as usize);
                        best = best.min(dist_point_segment(x, a, b));
                    }
                }
            }
        }
        best
    }

    /// Points within `tol` of the boundary are reported as boundary.
    pub fn locate(&self, x: State, tol: f64) -> Location {
        if self.boundary_distance(x) <= tol {
            Location::Boundary
        } else if self.contains(x) {
            Location::Inside
        } else {
            Location::Outside
        }
    }

    /// Distance to the closed region: zero inside.
    pub fn region_distance(&self, x: State) -> f64 {
        if self.contains(x) {
            0.0
        } else {
            self.boundary_distance(x)
        }
    }

    /// `region_distance` with the cap of `boundary_distance_below`.
    pub fn region_distance_below(&self, x: State, cap: f64) -> f64 {
        if self.contains(x) {
            0.0
        } else {
            self.boundary_distance_below(x, cap)
        }
    }

    /// Pairs of non-adjacent edges that intersect; empty iff the polygon is simple.
    pub fn self_intersections(&self, limit: usize) -> Vec<(usize, usize, State)> {
        let m = self.pts.len();
        let mut out = Vec::new();
        if m < 4 {
            return out;
        }
        let adjacent = |i: usize, j: usize| i == j || (i + 1) % m == j || (j + 1) % m == i;
        let mut seen = std::collections::HashSet::new();
        for cell in &self.grid.cells {
            for (k, &i) in cell.iter().enumerate() {
                for &j in &cell[k + 1..] {
                    let (i, j) = (i.min(j) as usize, i.max(j) as usize);
                    if adjacent(i, j) || !seen.insert((i, j)) {
                        continue;
                    }
                    let (a1, a2) = self.edge(i);
                    let (b1, b2) = self.edge(j);
                    if let Some((_, _, x)) = segment_intersection(a1, a2, b1, b2) {
                        out.push((i, j, x));
                        if out.len() >= limit {
                            return out;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn is_simple(&self) -> bool {
        self.self_intersections(1).is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(u: f64, n: f64) -> State {
        State::new(u, n)
    }

    fn square() -> Vec<State> {
        vec![s(0.0, 0.0), s(1.0, 0.0), s(1.0, 1.0), s(0.0, 1.0)]
    }

    #[test]
    fn crossing_segments() {
        let (t, sp, x) = segment_intersection(s(0.0, 0.0), s(2.0, 2.0), s(0.0, 2.0), s(2.0, 0.0)).unwrap();
        assert!((t - 0.5).abs() < 1e-15 && (sp - 0.5).abs() < 1e-15);
        assert_eq!(x, s(1.0, 1.0));
        assert!(segment_intersection(s(0.0, 0.0), s(1.0, 0.0), s(0.0, 1.0), s(1.0, 1.0)).is_none());
        assert!(segment_intersection(s(0.0, 0.0), s(1.0, 1.0), s(2.0, 0.0), s(3.0, -1.0)).is_none());
        // touching at an endpoint within the snap tolerance
        assert!(segment_intersection(s(0.0, 0.0), s(1.0, 0.0), s(1.0 + 1e-12, -1.0), s(1.0 + 1e-12, 1.0)).is_some());
    }

    #[test]
    fn area_and_orientation() {
        assert_eq!(signed_area(&square()), 1.0);
        let mut cw = square();
        cw.reverse();
        assert_eq!(signed_area(&cw), -1.0);
    }

    #[test]
    fn containment_and_distance() {
        let idx = PolygonIndex::new(&square());
        assert!(idx.contains(s(0.5, 0.5)));
        assert!(!idx.contains(s(1.5, 0.5)));
        assert!(!idx.contains(s(-3.0, 7.0)));
        assert!((idx.boundary_distance(s(0.5, 0.6)) - 0.4).abs() < 1e-15);
        assert!((idx.boundary_distance(s(4.0, 5.0)) - 5.0).abs() < 1e-12);
        assert_eq!(idx.locate(s(1.0, 0.5), 1e-9), Location::Boundary);
        assert_eq!(idx.region_distance(s(0.2, 0.2)), 0.0);
    }

    #[test]
    fn tiny_triangle_centroid_inside() {
        let tri = vec![s(0.3, 0.3), s(0.3 + 1e-6, 0.3), s(0.3, 0.3 + 1e-6)];
        let idx = PolygonIndex::new(&tri);
        assert!(idx.contains(s(0.3 + 1e-6 / 3.0, 0.3 + 1e-6 / 3.0)));
    }

    #[test]
    fn bowtie_is_not_simple() {
        let bow = vec![s(0.0, 0.0), s(1.0, 1.0), s(1.0, 0.0), s(0.0, 1.0)];
        let idx = PolygonIndex::new(&bow);
        assert!(!idx.is_simple());
        assert!(PolygonIndex::new(&square()).is_simple());
    }

    #[test]
    fn first_crossing_finds_earliest() {
        let a = vec![s(0.0, 0.0), s(1.0, 0.0), s(2.0, 0.0), s(3.0, 0.0)];
        let b = vec![s(2.5, -1.0), s(2.5, 1.0), s(1.5, 1.0), s(1.5, -1.0)];
        let (i, t, j, _, x) = first_crossing(&a, &b).unwrap();
        assert_eq!((i, j), (1, 2));
        assert!((t - 0.5).abs() < 1e-12);
        assert!((x.u - 1.5).abs() < 1e-12);
    }

    fn circle(m: usize, r: f64) -> Vec<State> {
        (0..m)
            .map(|k| {
                let th = std::f64::consts::TAU * k as f64 / m as f64;
                s(r * th.cos(), 0.3 * r * th.sin())
            })
            .collect()
    }

    proptest! {
        #[test]
        fn index_matches_brute_force(u in -1.5f64..1.5, n in -0.5f64..0.5) {
            let poly = circle(997, 1.0);
            let idx = PolygonIndex::new(&poly);
            let x = s(u, n);
            let brute_d = (0..poly.len())
                .map(|i| dist_point_segment(x, poly[i], poly[(i + 1) % poly.len()]))
                .fold(f64::INFINITY, f64::min);
            prop_assert!((idx.boundary_distance(x) - brute_d).abs() < 1e-14);
            if brute_d > 1e-12 {
                prop_assert_eq!(idx.contains(x), point_in_polygon(&poly, x));
            }
        }
    }
}
