//! Noise-free baseline: limit cycle, adjoint phase response and Malkin
//! averaging.

use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Oscillator, State};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleOptions {
    /// Shooting tolerance on `‖P(x) − x‖`.
    pub tol: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_iter: usize,
    /// Longest integration between section crossings.
    pub max_time: f64,
    /// Samples per period on the output grid.
    pub n_samples: usize,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            rtol: 1e-12,
            atol: 1e-14,
            max_iter: 200,
            max_time: 200.0,
            n_samples: 2048,
        }
    }
}

type Rhs<'a> = dyn Fn(&State) -> State + 'a;

/// One Dormand–Prince 5(4) step; returns the fifth-order update and the
/// embedded error estimate.
fn dp45_step(f: &Rhs, y: &State, h: f64) -> (State, State) {
    let k1 = f(y);
    let k2 = f(&(y + h * (k1 / 5.0)));
    let k3 = f(&(y + h * (3.0 / 40.0 * k1 + 9.0 / 40.0 * k2)));
    let k4 = f(&(y + h * (44.0 / 45.0 * k1 - 56.0 / 15.0 * k2 + 32.0 / 9.0 * k3)));
    let k5 = f(&(y + h * (19372.0 / 6561.0 * k1 - 25360.0 / 2187.0 * k2 + 64448.0 / 6561.0 * k3 - 212.0 / 729.0 * k4)));
    let k6 = f(&(y + h
        * (9017.0 / 3168.0 * k1 - 355.0 / 33.0 * k2 + 46732.0 / 5247.0 * k3 + 49.0 / 176.0 * k4
            - 5103.0 / 18656.0 * k5)));
    let y5 = y + h
        * (35.0 / 384.0 * k1 + 500.0 / 1113.0 * k3 + 125.0 / 192.0 * k4 - 2187.0 / 6784.0 * k5 + 11.0 / 84.0 * k6);
    let k7 = f(&y5);
    let e = h
        * ((35.0 / 384.0 - 5179.0 / 57600.0) * k1
            + (500.0 / 1113.0 - 7571.0 / 16695.0) * k3
            + (125.0 / 192.0 - 393.0 / 640.0) * k4
            + (-2187.0 / 6784.0 + 92097.0 / 339200.0) * k5
            + (11.0 / 84.0 - 187.0 / 2100.0) * k6
            - 1.0 / 40.0 * k7);
    (y5, e)
}

fn rk4_step(f: &Rhs, y: &State, h: f64) -> State {
    let k1 = f(y);
    let k2 = f(&(y + 0.5 * h * k1));
    let k3 = f(&(y + 0.5 * h * k2));
    let k4 = f(&(y + h * k3));
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Integrates from `x0` until `s` crosses zero upward after at least
/// `t_min`; returns the crossing time and state.
fn integrate_to_section(
    f: &Rhs,
    s: &dyn Fn(&State) -> f64,
    x0: &State,
    t_min: f64,
    opts: &CycleOptions,
) -> Result<(f64, State)> {
    let mut t = 0.0;
    let mut y = *x0;
    let mut h = 1e-3;
    let f0 = f(x0).norm();
    while t < opts.max_time {
        let (y1, e) = dp45_step(f, &y, h);
        let sc = opts.atol + opts.rtol * y.norm().max(y1.norm());
        let err = e.norm() / sc;
        if err > 1.0 {
            h *= (0.9 * err.powf(-0.2)).max(0.1);
            continue;
        }
        let (s0, s1) = (s(&y), s(&y1));
        if t + h >= t_min && s0 < 0.0 && s1 >= 0.0 {
            // Illinois root finding on the step length.
            let (mut a, mut b) = (0.0, h);
            let (mut fa, mut fb) = (s0, s1);
            let mut side = 0;
            for _ in 0..100 {
                let c = (a * fb - b * fa) / (fb - fa);
                let fc = s(&dp45_step(f, &y, c).0);
                if fc.abs() < 1e-15 || (b - a).abs() < 1e-15 * (1.0 + t) {
                    a = c;
                    b = c;
                    break;
                }
                if fc < 0.0 {
                    a = c;
                    fa = fc;
                    if side == -1 {
                        fb *= 0.5;
                    }
                    side = -1;
                } else {
                    b = c;
                    fb = fc;
                    if side == 1 {
                        fa *= 0.5;
                    }
                    side = 1;
                }
            }
            let tau = 0.5 * (a + b);
            return Ok((t + tau, dp45_step(f, &y, tau).0));
        }
        t += h;
        y = y1;
        h *= (0.9 * err.max(1e-10).powf(-0.2)).min(5.0);
    }
    if f(&y).norm() < 0.1 * f0 {
        Err(Error::FixedPoint { x: y[0], y: y[1] })
    } else {
        Err(Error::NonConvergence(format!("no section crossing within {} time units", opts.max_time)))
    }
}

/// A periodic orbit sampled at `n + 1` uniform times over one period.
#[derive(Debug, Clone, Serialize)]
pub struct LimitCycle {
    pub period: f64,
    pub times: Vec<f64>,
    pub states: Vec<[f64; 2]>,
    /// `‖U(0) − U(T)‖` of the sampled orbit.
    pub closure: f64,
    /// Last shooting update `‖P(x) − x‖`.
    pub shooting_residual: f64,
    pub iterations: usize,
}

impl LimitCycle {
    pub fn state(&self, k: usize) -> State {
        State::new(self.states[k][0], self.states[k][1])
    }

    pub fn mean_radius(&self, center: [f64; 2]) -> f64 {
        let n = self.states.len() - 1;
        self.states[..n].iter().map(|s| (s[0] - center[0]).hypot(s[1] - center[1])).sum::<f64>() / n as f64
    }
}

/// Poincaré shooting on the line through `guess` normal to `F(guess)`.
pub fn find_limit_cycle<M: Oscillator + ?Sized>(model: &M, guess: State, opts: &CycleOptions) -> Result<LimitCycle> {
    let f = |x: &State| model.drift(x);
    let n0 = f(&guess);
    if !(n0.norm() > 0.0) {
        return Err(Error::FixedPoint { x: guess[0], y: guess[1] });
    }
    let section = |x: &State| n0.dot(&(x - guess));
    let mut x = guess;
    let mut period = f64::NAN;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    // First pass: let the orbit settle, then iterate the return map.
    let t_min = 0.1;
    for it in 0..opts.max_iter {
        let (t, y) = integrate_to_section(&f, &section, &x, t_min, opts)?;
        residual = (y - x).norm();
        period = t;
        x = y;
        iterations = it + 1;
        if residual < opts.tol {
            break;
        }
    }
    if !(residual < opts.tol) {
        return Err(Error::NonConvergence(format!(
            "shooting residual {residual:.3e} after {} iterations",
            opts.max_iter
        )));
    }
    if f(&x).norm() < 1e-8 * n0.norm().max(1.0) {
        return Err(Error::FixedPoint { x: x[0], y: x[1] });
    }
    let n = opts.n_samples.max(8);
    let h = period / n as f64;
    let mut states = Vec::with_capacity(n + 1);
    let mut y = x;
    states.push([y[0], y[1]]);
    for _ in 0..n {
        // Two half steps per sample keep the orbit accurate for the adjoint.
        y = rk4_step(&f, &rk4_step(&f, &y, 0.5 * h), 0.5 * h);
        states.push([y[0], y[1]]);
    }
    let closure = (y - x).norm();
    Ok(LimitCycle {
        period,
        times: (0..=n).map(|k| k as f64 * h).collect(),
        states,
        closure,
        shooting_residual: residual,
        iterations,
    })
}

/// Phase velocity convention for the adjoint normalisation `Z·F = ω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseNormalization {
    /// `ω = 2π/T`.
    Angular,
    /// A given natural frequency.
    Frequency(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjointSolution {
    /// `Z(t)` on the cycle's time grid.
    pub z: Vec<[f64; 2]>,
    pub omega: f64,
    /// `max |Z·F − ω| / ω` over the grid.
    pub normalization_residual: f64,
    /// `‖Z(0) − Z(T)‖` before periodic closure.
    pub periodicity: f64,
    pub sweeps: usize,
}

impl AdjointSolution {
    pub fn at(&self, k: usize) -> Vector2<f64> {
        Vector2::new(self.z[k][0], self.z[k][1])
    }
}

/// Integrates `dZ/dt = −∇F(U)ᵀZ` backwards over whole periods until `Z`
/// repeats, then scales so `Z·F(U) = ω`.
pub fn adjoint_prc<M: Oscillator + ?Sized>(cycle: &LimitCycle, model: &M, norm: PhaseNormalization) -> Result<AdjointSolution> {
    let n = cycle.states.len() - 1;
    let h = cycle.period / n as f64;
    let omega = match norm {
        PhaseNormalization::Angular => TAU / cycle.period,
        PhaseNormalization::Frequency(w) => w,
    };
    let u = |k: usize| cycle.state(k);
    let jac_t: Vec<nalgebra::Matrix2<f64>> = (0..=n).map(|k| model.jacobian(&u(k)).transpose()).collect();
    // Midpoint Jacobians from the average of neighbouring samples' states.
    let jac_mid: Vec<nalgebra::Matrix2<f64>> = (0..n)
        .map(|k| {
            let um = midpoint_state(model, &u(k), h);
            model.jacobian(&um).transpose()
        })
        .collect();
    let mut z_end = model.drift(&u(n));
    z_end *= omega / z_end.norm_squared();
    let mut z = vec![Vector2::zeros(); n + 1];
    let mut periodicity = f64::INFINITY;
    let mut sweeps = 0;
    for sweep in 0..100 {
        z[n] = z_end;
        for k in (0..n).rev() {
            // Backward RK4: dZ/ds = +∇Fᵀ Z with s = −t.
            let zk = z[k + 1];
            let k1 = jac_t[k + 1] * zk;
            let k2 = jac_mid[k] * (zk + 0.5 * h * k1);
            let k3 = jac_mid[k] * (zk + 0.5 * h * k2);
            let k4 = jac_t[k] * (zk + h * k3);
            z[k] = zk + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        // Rescale using the conserved pairing.
        let pair = z[0].dot(&model.drift(&u(0)));
        if !(pair.abs() > 0.0) || !pair.is_finite() {
            return Err(Error::NonConvergence("adjoint pairing vanished".into()));
        }
        let scale = omega / pair;
        for v in z.iter_mut() {
            *v *= scale;
        }
        periodicity = (z[0] - z[n]).norm();
        sweeps = sweep + 1;
        let change = (z[0] - z_end).norm();
        z_end = z[0];
        if change < 1e-12 * z_end.norm() {
            break;
        }
    }
    if !(periodicity < 1e-4 * z_end.norm().max(1.0)) {
        return Err(Error::NonConvergence(format!("adjoint is not periodic: ‖Z(0) − Z(T)‖ = {periodicity:.3e}")));
    }
    let normalization_residual = (0..=n)
        .map(|k| (z[k].dot(&model.drift(&u(k))) - omega).abs() / omega)
        .fold(0.0, f64::max);
    Ok(AdjointSolution {
        z: z.iter().map(|v| [v[0], v[1]]).collect(),
        omega,
        normalization_residual,
        periodicity,
        sweeps,
    })
}

/// State half a step ahead of `x` along the flow.
fn midpoint_state<M: Oscillator + ?Sized>(model: &M, x: &State, h: f64) -> State {
    let f = |y: &State| model.drift(y);
    rk4_step(&f, x, 0.5 * h)
}

/// `(1/T) ∫₀ᵀ Z(t)·G(U(t), t) dt` by the trapezoid rule on the cycle grid.
pub fn malkin_average(cycle: &LimitCycle, adj: &AdjointSolution, g: &dyn Fn(&State, f64) -> Vector2<f64>) -> f64 {
    let n = cycle.states.len() - 1;
    let vals: Vec<f64> = (0..=n).map(|k| adj.at(k).dot(&g(&cycle.state(k), cycle.times[k]))).collect();
    let inner: f64 = vals[1..n].iter().sum();
    (inner + 0.5 * (vals[0] + vals[n])) / n as f64
}

/// CSV `t,ux,uy,zx,zy`.
pub fn write_prc_csv<W: Write>(out: W, cycle: &LimitCycle, adj: &AdjointSolution) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "t,ux,uy,zx,zy")?;
    for k in 0..cycle.states.len() {
        let (u, z) = (cycle.states[k], adj.z[k]);
        writeln!(out, "{},{},{},{},{}", cycle.times[k], u[0], u[1], z[0], z[1])?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_stuart_landau, Model, StuartLandauParams};

    fn sl(a: f64, b: f64) -> Model {
        make_stuart_landau(StuartLandauParams { a, b, sigma: 0.0 }).unwrap()
    }

    #[test]
    fn dp45_is_fifth_order_on_rotation() {
        let f = |y: &State| State::new(-y[1], y[0]);
        let err = |h: f64| {
            let (y, _) = dp45_step(&f, &State::new(1.0, 0.0), h);
            (y - State::new(h.cos(), h.sin())).norm()
        };
        let r = err(0.2) / err(0.1);
        assert!(r > 40.0 && r < 80.0, "{r}");
    }

    #[test]
    fn unit_cycle_radius_and_period() {
        let c = find_limit_cycle(&sl(1.0, 1.0), State::new(0.5, 0.1), &CycleOptions::default()).unwrap();
        assert!((c.period - TAU).abs() < 1e-6, "{}", c.period);
        for s in &c.states {
            assert!((s[0].hypot(s[1]) - 1.0).abs() < 1e-8);
        }
        assert!(c.closure < 1e-8);
    }

    #[test]
    fn larger_cycle_for_a4() {
        let c = find_limit_cycle(&sl(4.0, 1.0), State::new(1.0, 0.0), &CycleOptions::default()).unwrap();
        assert!((c.period - TAU).abs() < 1e-6);
        assert!((c.mean_radius([0.0, 0.0]) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn no_cycle_below_hopf() {
        for a in [-0.5, 0.0] {
            // The model constructor refuses a ≤ 0, so build the struct directly.
            let m = Model::StuartLandau(crate::model::StuartLandau { a, b: 1.0, sigma: 0.0 });
            let r = find_limit_cycle(&m, State::new(1.0, 0.0), &CycleOptions::default());
            assert!(matches!(r, Err(Error::FixedPoint { .. })), "a = {a}: {r:?}");
        }
    }

    #[test]
    fn prc_of_stuart_landau() {
        let (a, b) = (1.0, 1.0);
        let c = find_limit_cycle(&sl(a, b), State::new(1.0, 0.0), &CycleOptions::default()).unwrap();
        let z = adjoint_prc(&c, &sl(a, b), PhaseNormalization::Frequency(b)).unwrap();
        // The section through (1, 0) starts the cycle at θ = 0.
        let mut worst: f64 = 0.0;
        for (k, t) in c.times.iter().enumerate() {
            let want = Vector2::new(-(b * t).sin(), (b * t).cos()) / a.sqrt();
            worst = worst.max((z.at(k) - want).norm());
        }
        assert!(worst < 1e-3, "{worst}");
        assert!(z.normalization_residual < 1e-6);
        assert!(z.periodicity < 1e-6);
    }

    #[test]
    fn prc_scales_with_amplitude() {
        let m = sl(4.0, 1.0);
        let c = find_limit_cycle(&m, State::new(2.0, 0.0), &CycleOptions::default()).unwrap();
        let z = adjoint_prc(&c, &m, PhaseNormalization::Angular).unwrap();
        for k in 0..c.states.len() {
            assert!((z.at(k).norm() - 0.5).abs() < 1e-6);
            assert!(z.at(k).dot(&c.state(k)).abs() < 1e-6);
        }
    }

    #[test]
    fn malkin_averages() {
        let m = sl(1.0, 1.0);
        let c = find_limit_cycle(&m, State::new(1.0, 0.0), &CycleOptions::default()).unwrap();
        let z = adjoint_prc(&c, &m, PhaseNormalization::Angular).unwrap();
        assert_eq!(malkin_average(&c, &z, &|_, _| Vector2::zeros()), 0.0);
        let az = malkin_average(&c, &z, &|x, _| Vector2::new(-x[1], x[0]));
        assert!((az - 1.0).abs() < 1e-6, "{az}");
        let rad = malkin_average(&c, &z, &|x, _| *x);
        assert!(rad.abs() < 1e-6);
        // Linearity in the perturbation.
        let g1 = |x: &State, t: f64| Vector2::new(x[0] * t.cos(), 1.0);
        let g2 = |x: &State, _t: f64| Vector2::new(x[1], x[0] * x[0]);
        let sum = malkin_average(&c, &z, &|x, t| 2.0 * g1(x, t) - 3.0 * g2(x, t));
        let parts = 2.0 * malkin_average(&c, &z, &g1) - 3.0 * malkin_average(&c, &z, &g2);
        assert!((sum - parts).abs() < 1e-12);
    }

    #[test]
    fn prc_csv_header() {
        let m = sl(1.0, 1.0);
        let o = CycleOptions {
            n_samples: 64,
            ..Default::default()
        };
        let c = find_limit_cycle(&m, State::new(1.0, 0.0), &o).unwrap();
        let z = adjoint_prc(&c, &m, PhaseNormalization::Angular).unwrap();
        let mut buf = Vec::new();
        write_prc_csv(&mut buf, &c, &z).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,ux,uy,zx,zy\n"));
        assert_eq!(s.lines().count(), 66);
    }
}
