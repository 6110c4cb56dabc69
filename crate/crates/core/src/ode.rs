//! Dormand-Prince 5(4) integrator with dense output.
//!
//! The integrator hands every accepted step to an observer together with
//! its continuous extension, so callers can sample, locate events and stop
//! mid-step without re-integrating.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step size.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rtol: 1e-9,
            atol: 1e-12,
            h_max: f64::INFINITY,
            max_steps: 5_000_000,
        }
    }
}

impl Tolerances {
    pub fn with_rtol(mut self, rtol: f64) -> Self {
        self.rtol = rtol;
        self.atol = rtol * 1e-3;
        self
    }

    pub fn with_h_max(mut self, h_max: f64) -> Self {
        self.h_max = h_max;
        self
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with its continuous extension.
#[derive(Debug, Clone, Copy)]
pub struct Step<const N: usize> {
    pub t0: f64,
    pub t1: f64,
    pub y0: [f64; N],
    pub y1: [f64; N],
    r: [[f64; N]; 4],
}

impl<const N: usize> Step<N> {
    /// Dense-output state at `t` in `[t0, t1]`.
    pub fn eval(&self, t: f64) -> [f64; N] {
        let h = self.t1 - self.t0;
        let th = if h == 0.0 { 1.0 } else { (t - self.t0) / h };
        let th1 = 1.0 - th;
        let mut y = [0.0; N];
        for i in 0..N {
            y[i] = self.y0[i]
                + th * (self.r[0][i]
                    + th1 * (self.r[1][i] + th * (self.r[2][i] + th1 * self.r[3][i])));
        }
        y
    }

    /// Locates the first root of `g` along the step by bisection, assuming a
    /// sign change between `t0` and `t1`. Returns `(t, y)`.
    pub fn bisect<G: Fn(&[f64; N]) -> f64>(&self, g: G, tol: f64) -> (f64, [f64; N]) {
        let mut lo = self.t0;
        let mut hi = self.t1;
        let g_lo = g(&self.y0);
        for _ in 0..200 {
            if hi - lo <= tol.max(f64::EPSILON * hi.abs().max(1.0)) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let gm = g(&self.eval(mid));
            if (gm > 0.0) == (g_lo > 0.0) && gm != 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (hi, self.eval(hi))
    }
}

/// Observer verdict after each accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Control<const N: usize> {
    Continue,
    /// Stop at the given time and state (usually a located event).
    StopAt(f64, [f64; N]),
}

#[derive(Debug, Clone, Copy)]
pub struct End<const N: usize> {
    pub t: f64,
    pub y: [f64; N],
    pub steps: usize,
    pub rejected: usize,
    pub stopped: bool,
}

fn finite<const N: usize>(y: &[f64; N]) -> bool {
    y.iter().all(|v| v.is_finite())
}

fn non_finite_error<const N: usize>(y: &[f64; N]) -> Error {
    Error::NonFinite {
        u: y[0],
        n: if N > 1 { y[1] } else { f64::NAN },
    }
}

/// Integrates `y' = f(t, y)` from `t0` to `t_end >= t0`.
///
/// `h0` is an optional initial step; a heuristic is used otherwise.
pub fn integrate<const N: usize, F, O>(
    mut f: F,
    t0: f64,
    y0: [f64; N],
    t_end: f64,
    tol: &Tolerances,
    h0: Option<f64>,
    mut observer: O,
) -> Result<End<N>>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
    O: FnMut(&Step<N>) -> Control<N>,
{
    let mut t = t0;
    let mut y = y0;
    if t_end <= t0 {
        return Ok(End {
            t,
            y,
            steps: 0,
            rejected: 0,
            stopped: false,
        });
    }
    let mut k1 = f(t, &y);
    if !finite(&k1) {
        return Err(non_finite_error(&y));
    }
    let span = t_end - t0;
    let scale = |y: &[f64; N], i: usize| tol.atol + tol.rtol * y[i].abs();
    let mut h = match h0 {
        Some(h) => h,
        None => {
            let d0 = (0..N).map(|i| (y[i] / scale(&y, i)).powi(2)).sum::<f64>().sqrt();
            let d1 = (0..N).map(|i| (k1[i] / scale(&y, i)).powi(2)).sum::<f64>().sqrt();
            if d0 < 1e-5 || d1 < 1e-5 {
                1e-6
            } else {
                0.01 * d0 / d1
            }
        }
    }
    .min(span)
    .min(tol.h_max)
    .max(1e-12 * span);

    let mut steps = 0usize;
    let mut rejected = 0usize;
    let mut last_rejected = false;
    loop {
        if steps + rejected >= tol.max_steps {
            return Err(Error::StepUnderflow {
                t,
                u: y[0],
                n: if N > 1 { y[1] } else { f64::NAN },
            });
        }
        let remaining = t_end - t;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let mut tmp = [0.0; N];
        for i in 0..N {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        let k2 = f(t + C2 * h, &tmp);
        for i in 0..N {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        let k3 = f(t + C3 * h, &tmp);
        for i in 0..N {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        let k4 = f(t + C4 * h, &tmp);
        for i in 0..N {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        let k5 = f(t + C5 * h, &tmp);
        for i in 0..N {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let k6 = f(t + h, &tmp);
        let mut y1 = [0.0; N];
        for i in 0..N {
            y1[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        let k7 = f(t + h, &y1);

        let mut err = 0.0;
        let mut ok = finite(&y1) && finite(&k7);
        if ok {
            for i in 0..N {
                let e = h
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                let sc = tol.atol + tol.rtol * y[i].abs().max(y1[i].abs());
                err += (e / sc).powi(2);
            }
            err = (err / N as f64).sqrt();
            ok = err.is_finite();
        }

        if ok && err <= 1.0 {
            let mut r = [[0.0; N]; 4];
            for i in 0..N {
                let ydiff = y1[i] - y[i];
                let bspl = h * k1[i] - ydiff;
                r[0][i] = ydiff;
                r[1][i] = bspl;
                r[2][i] = ydiff - h * k7[i] - bspl;
                r[3][i] = h
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            let t1 = if last { t_end } else { t + h };
            let step = Step {
                t0: t,
                t1,
                y0: y,
                y1,
                r,
            };
            steps += 1;
            match observer(&step) {
                Control::Continue => {}
                Control::StopAt(ts, ys) => {
                    return Ok(End {
                        t: ts,
                        y: ys,
                        steps,
                        rejected,
                        stopped: true,
                    })
                }
            }
            t = t1;
            y = y1;
            k1 = k7;
            if last {
                return Ok(End {
                    t,
                    y,
                    steps,
                    rejected,
                    stopped: false,
                });
            }
            let mut fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
            fac = fac.clamp(0.2, 5.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            h = (h * fac).min(tol.h_max);
        } else {
            rejected += 1;
            last_rejected = true;
            let fac = if ok { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.25 };
            h *= fac;
            if h < 1e-14 * t.abs().max(1.0) {
                if !finite(&y1) && steps == 0 {
                    return Err(non_finite_error(&y));
                }
                return Err(Error::StepUnderflow {
                    t,
                    u: y[0],
                    n: if N > 1 { y[1] } else { f64::NAN },
                });
            }
        }
    }
}
