//! Growth landscape of a model instance: the intrinsic growth `b0`, the
//! drug efficacy `b1`, the interaction `c`, the evolutionary rate `k` and
//! the timescale separation `epsilon`.
//!
//! All profile functions come with closed-form derivatives up to third
//! order, since equilibrium classification depends on derivative signs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value of a scalar function together with its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl Jet {
    fn add(self, o: Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
            d3: self.d3 + o.d3,
        }
    }

    fn sub(self, o: Jet) -> Jet {
        Jet {
            v: self.v - o.v,
            d1: self.d1 - o.d1,
            d2: self.d2 - o.d2,
            d3: self.d3 - o.d3,
        }
    }
}

/// One term `rate * exp(-width * (u - center)^2)` of the intrinsic growth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBump {
    pub rate: f64,
    pub width: f64,
    pub center: f64,
}

impl GaussianBump {
    pub fn jet(&self, u: f64) -> Jet {
        let d = u - self.center;
        let g = self.width;
        let v = self.rate * (-g * d * d).exp();
        Jet {
            v,
            d1: -2.0 * g * d * v,
            d2: (4.0 * g * g * d * d - 2.0 * g) * v,
            d3: (-8.0 * g * g * g * d * d * d + 12.0 * g * g * d) * v,
        }
    }
}

/// Dissipative term `coeff * (u - center)^(2 * half_power)`, subtracted from `b0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolynomialDecay {
    pub coeff: f64,
    pub center: f64,
    pub half_power: u32,
}

impl PolynomialDecay {
    pub fn jet(&self, u: f64) -> Jet {
        let d = u - self.center;
        let m = 2 * self.half_power as i32;
        let mf = m as f64;
        let pow = |e: i32| if e < 0 { 0.0 } else { d.powi(e) };
        Jet {
            v: self.coeff * pow(m),
            d1: self.coeff * mf * pow(m - 1),
            d2: self.coeff * mf * (mf - 1.0) * pow(m - 2),
            d3: self.coeff * mf * (mf - 1.0) * (mf - 2.0) * pow(m - 3),
        }
    }
}

/// Sigmoid term `c1 / (c2 + c3 * exp(c4 * (c5 * u - c6))) + c7` of the drug efficacy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigmoid(pub [f64; 7]);

impl Sigmoid {
    /// Evaluated through `q = 1/(c2 + c3 e)` and `s = c3 e q`, both bounded,
    /// so large exponent arguments saturate instead of overflowing.
    pub fn jet(&self, u: f64) -> Jet {
        let [c1, c2, c3, c4, c5, c6, c7] = self.0;
        let z = c4 * (c5 * u - c6);
        let (q, s) = if z <= 0.0 {
            let e = z.exp();
            let den = c2 + c3 * e;
            (1.0 / den, c3 * e / den)
        } else {
            let w = (-z).exp();
            let den = c2 * w + c3;
            (w / den, c3 / den)
        };
        let kappa = c4 * c5;
        Jet {
            v: c1 * q + c7,
            d1: -c1 * kappa * q * s,
            d2: -c1 * kappa * kappa * q * s * (1.0 - 2.0 * s),
            d3: -c1 * kappa.powi(3) * q * s * (1.0 - 6.0 * s + 6.0 * s * s),
        }
    }
}

/// Higher order interaction `c(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Interaction {
    Constant { value: f64 },
    /// `scale * exp(rate * u)`
    Exponential { scale: f64, rate: f64 },
    /// `c0 + c1 u + c2 u^2`; may fail positivity, which the audit reports.
    Quadratic { c0: f64, c1: f64, c2: f64 },
}

impl Default for Interaction {
    fn default() -> Self {
        Interaction::Constant { value: 1.0 }
    }
}

impl Interaction {
    pub fn jet(&self, u: f64) -> Jet {
        match *self {
            Interaction::Constant { value } => Jet {
                v: value,
                ..Jet::default()
            },
            Interaction::Exponential { scale, rate } => {
                let v = scale * (rate * u).exp();
                Jet {
                    v,
                    d1: rate * v,
                    d2: rate * rate * v,
                    d3: rate.powi(3) * v,
                }
            }
            Interaction::Quadratic { c0, c1, c2 } => Jet {
                v: c0 + c1 * u + c2 * u * u,
                d1: c1 + 2.0 * c2 * u,
                d2: 2.0 * c2,
                d3: 0.0,
            },
        }
    }
}

/// Evolutionary rate function `k(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvolutionRate {
    #[default]
    Identity,
    Linear {
        slope: f64,
    },
    /// `n K / (K + n)`, continued smoothly for `n > -K`.
    Saturating {
        half: f64,
    },
    /// Constant rate; violates H1 and has no reduced form.
    Constant {
        value: f64,
    },
}

impl EvolutionRate {
    pub fn k(&self, n: f64) -> f64 {
        match *self {
            EvolutionRate::Identity => n,
            EvolutionRate::Linear { slope } => slope * n,
            EvolutionRate::Saturating { half } => n * half / (half + n),
            EvolutionRate::Constant { value } => value,
        }
    }

    pub fn dk(&self, n: f64) -> f64 {
        match *self {
            EvolutionRate::Identity => 1.0,
            EvolutionRate::Linear { slope } => slope,
            EvolutionRate::Saturating { half } => half * half / ((half + n) * (half + n)),
            EvolutionRate::Constant { .. } => 0.0,
        }
    }

    /// `k(n)/n`, extended at `n = 0` by `k'(0)`.
    pub fn k_tilde(&self, n: f64) -> f64 {
        match *self {
            EvolutionRate::Identity => 1.0,
            EvolutionRate::Linear { slope } => slope,
            EvolutionRate::Saturating { half } => half / (half + n),
            EvolutionRate::Constant { value } => {
                if n == 0.0 {
                    f64::INFINITY
                } else {
                    value / n
                }
            }
        }
    }

    pub fn dk_tilde(&self, n: f64) -> f64 {
        match *self {
            EvolutionRate::Identity | EvolutionRate::Linear { .. } => 0.0,
            EvolutionRate::Saturating { half } => -half / ((half + n) * (half + n)),
            EvolutionRate::Constant { value } => -value / (n * n),
        }
    }
}

/// One model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub bumps: Vec<GaussianBump>,
    pub decay: PolynomialDecay,
    pub sigmoids: Vec<Sigmoid>,
    pub interaction: Interaction,
    pub rate: EvolutionRate,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 0.01;

impl Landscape {
    /// Builds a landscape from the parameter arrays used by the presets:
    /// `r`, `g`, `u_bar` for the Gaussian mixture, `p = (p1, p2, p3)` for the
    /// decay polynomial, one 7-tuple per sigmoid.
    pub fn from_arrays(
        r: &[f64],
        g: &[f64],
        u_bar: &[f64],
        p: [f64; 3],
        sigmoids: &[[f64; 7]],
    ) -> Result<Self> {
        if r.len() != g.len() || r.len() != u_bar.len() {
            return Err(Error::InvalidLandscape(format!(
                "r, g, u_bar lengths differ ({}, {}, {})",
                r.len(),
                g.len(),
                u_bar.len()
            )));
        }
        if p[2] < 1.0 || p[2].fract() != 0.0 {
            return Err(Error::InvalidLandscape(format!(
                "p3 must be a positive integer, got {}",
                p[2]
            )));
        }
        let bumps = r
            .iter()
            .zip(g)
            .zip(u_bar)
            .map(|((&rate, &width), &center)| GaussianBump {
                rate,
                width,
                center,
            })
            .collect();
        let l = Landscape {
            bumps,
            decay: PolynomialDecay {
                coeff: p[0],
                center: p[1],
                half_power: p[2] as u32,
            },
            sigmoids: sigmoids.iter().map(|&c| Sigmoid(c)).collect(),
            interaction: Interaction::default(),
            rate: EvolutionRate::Identity,
            epsilon: DEFAULT_EPSILON,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_interaction(mut self, c: Interaction) -> Self {
        self.interaction = c;
        self
    }

    pub fn with_rate(mut self, k: EvolutionRate) -> Self {
        self.rate = k;
        self
    }

    /// Structural checks that do not need a grid.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidLandscape(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.decay.half_power < 1 {
            return Err(Error::InvalidLandscape("p3 must be >= 1".into()));
        }
        if let Some(b) = self.bumps.iter().find(|b| b.width < 0.0) {
            return Err(Error::InvalidLandscape(format!(
                "Gaussian width must be non-negative, got {}",
                b.width
            )));
        }
        for s in &self.sigmoids {
            let [_, c2, c3, ..] = s.0;
            if c2 < 0.0 || c3 < 0.0 || c2 + c3 <= 0.0 {
                return Err(Error::InvalidLandscape(format!(
                    "sigmoid denominator coefficients must be non-negative and not both zero: {:?}",
                    s.0
                )));
            }
        }
        let all_finite = self
            .bumps
            .iter()
            .all(|b| b.rate.is_finite() && b.width.is_finite() && b.center.is_finite())
            && self.sigmoids.iter().all(|s| s.0.iter().all(|c| c.is_finite()))
            && self.decay.coeff.is_finite()
            && self.decay.center.is_finite();
        if !all_finite {
            return Err(Error::InvalidLandscape("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn b0_jet(&self, u: f64) -> Jet {
        self.bumps
            .iter()
            .fold(Jet::default(), |acc, b| acc.add(b.jet(u)))
            .sub(self.decay.jet(u))
    }

    pub fn b1_jet(&self, u: f64) -> Jet {
        self.sigmoids
            .iter()
            .fold(Jet::default(), |acc, s| acc.add(s.jet(u)))
    }

    pub fn c_jet(&self, u: f64) -> Jet {
        self.interaction.jet(u)
    }

    pub fn b0(&self, u: f64) -> f64 {
        self.b0_jet(u).v
    }

    pub fn b1(&self, u: f64) -> f64 {
        self.b1_jet(u).v
    }

    pub fn c(&self, u: f64) -> f64 {
        self.c_jet(u).v
    }

    /// Growth rate `b(u, a) = b0(u) - a b1(u)` and its u-derivatives.
    pub fn b_jet(&self, u: f64, a: f64) -> Jet {
        let b0 = self.b0_jet(u);
        let b1 = self.b1_jet(u);
        Jet {
            v: b0.v - a * b1.v,
            d1: b0.d1 - a * b1.d1,
            d2: b0.d2 - a * b1.d2,
            d3: b0.d3 - a * b1.d3,
        }
    }

    /// Landscape `h(u, a) = b(u, a) / c(u)`.
    pub fn h(&self, u: f64, a: f64) -> Result<f64> {
        let c = self.c(u);
        if c <= 0.0 {
            return Err(Error::NonPositiveInteraction { u, value: c });
        }
        Ok((self.b0(u) - a * self.b1(u)) / c)
    }

    /// `dh/du` at fixed dose.
    pub fn dh_du(&self, u: f64, a: f64) -> Result<f64> {
        let c = self.c_jet(u);
        if c.v <= 0.0 {
            return Err(Error::NonPositiveInteraction { u, value: c.v });
        }
        let b = self.b_jet(u, a);
        Ok((b.d1 * c.v - b.v * c.d1) / (c.v * c.v))
    }
}

/// Rectangular working window in (u, n).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub u: (f64, f64),
    pub n: (f64, f64),
}

impl Default for Window {
    fn default() -> Self {
        Window {
            u: (-0.5, 1.5),
            n: (0.0, 1.2),
        }
    }
}

impl Window {
    pub fn contains(&self, u: f64, n: f64) -> bool {
        u >= self.u.0 && u <= self.u.1 && n >= self.n.0 && n <= self.n.1
    }

    pub fn dilate(&self, du: f64, dn: f64) -> Window {
        Window {
            u: (self.u.0 - du, self.u.1 + du),
            n: (self.n.0 - dn, self.n.1 + dn),
        }
    }
}

/// Uniform 1-D grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Grid {
    pub fn new(min: f64, max: f64, points: usize) -> Self {
        Grid { min, max, points }
    }

    pub fn step(&self) -> f64 {
        if self.points < 2 {
            0.0
        } else {
            (self.max - self.min) / (self.points - 1) as f64
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        let h = self.step();
        (0..self.points).map(move |i| {
            if i + 1 == self.points {
                self.max
            } else {
                self.min + h * i as f64
            }
        })
    }

    pub fn values(&self) -> Vec<f64> {
        self.iter().collect()
    }
}

/// Built-in example landscapes "a" through "d".
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub landscape: Landscape,
    /// Maximal tolerated dose used for the landscape plots.
    pub max_dose: f64,
    /// Dose range used for the equilibrium-structure plots.
    pub equilibrium_range: (f64, f64),
}

pub const PRESET_NAMES: [&str; 4] = ["a", "b", "c", "d"];

pub fn preset(name: &str) -> Result<Preset> {
    let (l, max_dose, range) = match name {
        "a" => (
            Landscape::from_arrays(
                &[0.0, 0.41, 0.86],
                &[0.0, 1.9, 2.5],
                &[0.0, 0.8, 0.0],
                [0.1, 0.65, 3.0],
                &[[1.0, 0.9, 1.0, 0.5, 1.0, 0.3, 0.0]],
            )?,
            1.75,
            (0.3, 1.75),
        ),
        "b" => (
            Landscape::from_arrays(
                &[0.26, 0.4, 0.96],
                &[13.0, 8.9, 7.9],
                &[-0.01, 0.35, 0.87],
                [2.8, 0.6, 6.0],
                &[[1.0, 0.9, 1.0, 11.0, 1.0, 0.5, 0.0]],
            )?,
            0.7,
            (0.0, 0.7),
        ),
        "c" => (
            Landscape::from_arrays(
                &[0.5, 0.7, 0.35],
                &[18.6, 9.8, 8.8],
                &[0.0, 0.25, 0.68],
                [10.0, 0.55, 5.0],
                &[
                    [-0.462, 1.0, 10.1, -1.44, 10.0, 0.0, 0.0],
                    [-0.633, 1.0, 10.1, -1.44, 10.0, 3.7, 1.1],
                ],
            )?,
            0.7,
            (0.15, 0.8),
        ),
        "d" => (
            Landscape::from_arrays(
                &[0.6, 0.4, 0.95],
                &[14.3, 13.7, 13.8],
                &[0.0, 0.47, 0.87],
                [1.0, 0.46, 6.0],
                &[[1.0, 0.9, 1.0, 6.7, 1.0, 0.2, 0.0]],
            )?,
            1.3,
            (0.1, 0.45),
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (expected one of a, b, c, d)"
            )))
        }
    };
    let name = PRESET_NAMES.iter().find(|&&p| p == name).copied().unwrap_or("?");
    Ok(Preset {
        name,
        landscape: l,
        max_dose,
        equilibrium_range: range,
    })
}

/// Landscape-level hypothesis audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub u: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub passed: bool,
    pub witnesses: Vec<Witness>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
    pub u_grid: Grid,
    pub a_grid: Grid,
}

impl HypothesisReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

const MAX_WITNESSES: usize = 16;

struct CheckBuilder {
    name: &'static str,
    note: String,
    witnesses: Vec<Witness>,
    failures: usize,
}

impl CheckBuilder {
    fn new(name: &'static str, note: impl Into<String>) -> Self {
        CheckBuilder {
            name,
            note: note.into(),
            witnesses: Vec::new(),
            failures: 0,
        }
    }

    fn fail(&mut self, w: Witness) {
        self.failures += 1;
        if self.witnesses.len() < MAX_WITNESSES {
            self.witnesses.push(w);
        }
    }

    fn finish(self) -> HypothesisCheck {
        let note = if self.failures > 0 {
            format!("{} ({} failing samples)", self.note, self.failures)
        } else {
            self.note
        };
        HypothesisCheck {
            name: self.name.to_string(),
            passed: self.failures == 0,
            witnesses: self.witnesses,
            note,
        }
    }
}

/// Tail length checked beyond each end of the u-grid for radial unboundedness.
pub const TAIL_LENGTH: f64 = 1.0;

/// Audits H1-H4 and positivity of `c` on the given grids.
///
/// H4 is checked as: critical points of `h(., a)` are isolated on the grid
/// (no run of three or more consecutive samples with vanishing slope) and
/// `h` decays outward on both tails.
pub fn check_hypotheses(l: &Landscape, u_grid: &Grid, a_grid: &Grid) -> HypothesisReport {
    let us = u_grid.values();
    let as_ = a_grid.values();

    let mut cpos = CheckBuilder::new("c_positive", "c(u) > 0 on the u-grid");
    for &u in &us {
        let c = l.c(u);
        if !(c > 0.0) {
            cpos.fail(Witness {
                u,
                a: None,
                n: None,
                value: c,
            });
        }
    }

    let mut h1 = CheckBuilder::new("H1", "k(0) = 0 and k'(0) > 0");
    let k0 = l.rate.k(0.0);
    let dk0 = l.rate.dk(0.0);
    let fd = 1e-6;
    let dk0_fd = (l.rate.k(fd) - l.rate.k(-fd)) / (2.0 * fd);
    if k0.abs() > 1e-14 || !(dk0 > 0.0) || (dk0 - dk0_fd).abs() > 1e-6 * (1.0 + dk0.abs()) {
        h1.fail(Witness {
            u: 0.0,
            a: None,
            n: Some(0.0),
            value: if k0.abs() > 1e-14 { k0 } else { dk0 },
        });
    }

    let mut h2 = CheckBuilder::new("H2", "b1(u) > 0 and b1'(u) < 0 on the u-grid");
    let mut h3 = CheckBuilder::new("H3", "c'(u)/c(u) > b1'(u)/b1(u) on the u-grid");
    for &u in &us {
        let b1 = l.b1_jet(u);
        let c = l.c_jet(u);
        if !(b1.v > 0.0 && b1.d1 < 0.0) {
            h2.fail(Witness {
                u,
                a: None,
                n: None,
                value: if b1.v > 0.0 { b1.d1 } else { b1.v },
            });
        }
        let lhs = c.d1 / c.v;
        let rhs = b1.d1 / b1.v;
        if !(lhs > rhs) {
            h3.fail(Witness {
                u,
                a: None,
                n: None,
                value: lhs - rhs,
            });
        }
    }

    let mut h4 = CheckBuilder::new(
        "H4",
        format!(
            "isolated critical points of h(., a) and outward decay on tails of length {TAIL_LENGTH}"
        ),
    );
    let flat_tol = 1e-12;
    let tail_pts = 200usize;
    for &a in &as_ {
        let mut flat_run = 0usize;
        for &u in &us {
            let s = l.dh_du(u, a).unwrap_or(f64::NAN);
            if !s.is_finite() {
                h4.fail(Witness {
                    u,
                    a: Some(a),
                    n: None,
                    value: s,
                });
                continue;
            }
            if s.abs() < flat_tol {
                flat_run += 1;
                if flat_run == 3 {
                    h4.fail(Witness {
                        u,
                        a: Some(a),
                        n: None,
                        value: s,
                    });
                }
            } else {
                flat_run = 0;
            }
        }
        let left = Grid::new(u_grid.min - TAIL_LENGTH, u_grid.min, tail_pts);
        for u in left.iter() {
            let s = l.dh_du(u, a).unwrap_or(f64::NAN);
            if !(s > 0.0) {
                h4.fail(Witness {
                    u,
                    a: Some(a),
                    n: None,
                    value: s,
                });
            }
        }
        let right = Grid::new(u_grid.max, u_grid.max + TAIL_LENGTH, tail_pts);
        for u in right.iter() {
            let s = l.dh_du(u, a).unwrap_or(f64::NAN);
            if !(s < 0.0) {
                h4.fail(Witness {
                    u,
                    a: Some(a),
                    n: None,
                    value: s,
                });
            }
        }
    }

    HypothesisReport {
        checks: vec![cpos.finish(), h1.finish(), h2.finish(), h3.finish(), h4.finish()],
        u_grid: *u_grid,
        a_grid: *a_grid,
    }
}
