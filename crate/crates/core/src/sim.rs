//! Seeded Euler–Maruyama ensembles and first-return times.
//!
//! Trajectory `i` draws from its own ChaCha stream keyed by `(seed, i)`, so
//! results do not depend on thread count or ensemble size.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{wrap_angle, ScalarField};
use crate::model::{Oscillator, State};

/// Where trajectories start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initial {
    Fixed { state: [f64; 2] },
    /// Uniform in area on `r_min ≤ |x − center| ≤ r_max`.
    UniformAnnulus { center: [f64; 2], r_min: f64, r_max: f64 },
}

/// Reflecting walls at `|x − center| ∈ {r_in, r_out}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflect {
    pub center: [f64; 2],
    pub r_in: f64,
    pub r_out: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub initial: Initial,
    /// Keep every `record_every`-th state.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_blowup")]
    pub blowup_radius: f64,
    #[serde(default)]
    pub reflect: Option<Reflect>,
}

fn default_record_every() -> usize {
    1
}

fn default_blowup() -> f64 {
    1e6
}

impl SimConfig {
    pub fn new(dt: f64, n_steps: usize, n_samples: usize, seed: u64, initial: Initial) -> Self {
        Self {
            dt,
            n_steps,
            n_samples,
            seed,
            initial,
            record_every: 1,
            blowup_radius: default_blowup(),
            reflect: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ParameterDomain(m));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.n_steps == 0 || self.n_samples == 0 || self.record_every == 0 {
            return bad("n_steps, n_samples and record_every must be at least 1".into());
        }
        if !(self.blowup_radius > 0.0) {
            return bad("blowup_radius must be positive".into());
        }
        if let Initial::UniformAnnulus { r_min, r_max, .. } = self.initial {
            if !(0.0 <= r_min && r_min <= r_max) {
                return bad(format!("initial annulus needs 0 ≤ r_min ≤ r_max, got [{r_min}, {r_max}]"));
            }
        }
        if let Some(w) = self.reflect {
            if !(0.0 <= w.r_in && w.r_in < w.r_out) {
                return bad(format!("reflecting annulus needs 0 ≤ r_in < r_out, got [{}, {}]", w.r_in, w.r_out));
            }
        }
        Ok(())
    }

    /// Total simulated time `dt · n_steps`.
    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }
}

/// Single-path integrator with its own random stream.
pub struct Stepper<'a, M: Oscillator + ?Sized> {
    model: &'a M,
    dt: f64,
    sqrt_dt: f64,
    blowup: f64,
    reflect: Option<Reflect>,
    rng: ChaCha8Rng,
    stream: u64,
    step: usize,
}

impl<'a, M: Oscillator + ?Sized> Stepper<'a, M> {
    pub fn new(model: &'a M, cfg: &SimConfig, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        Self {
            model,
            dt: cfg.dt,
            sqrt_dt: cfg.dt.sqrt(),
            blowup: cfg.blowup_radius,
            reflect: cfg.reflect,
            rng,
            stream,
            step: 0,
        }
    }

    pub fn initial(&mut self, initial: &Initial) -> State {
        match *initial {
            Initial::Fixed { state } => State::new(state[0], state[1]),
            Initial::UniformAnnulus { center, r_min, r_max } => {
                let u: f64 = self.rng.random();
                let a: f64 = self.rng.random::<f64>() * TAU;
                let r = (r_min * r_min + u * (r_max * r_max - r_min * r_min)).sqrt();
                State::new(center[0] + r * a.cos(), center[1] + r * a.sin())
            }
        }
    }

    /// `x + f(x) dt + g(x) √dt ξ`, then reflection if configured.
    pub fn advance(&mut self, x: &State) -> Result<State> {
        let xi = State::new(self.rng.sample(StandardNormal), self.rng.sample(StandardNormal));
        let mut y = x + self.model.drift(x) * self.dt + self.model.noise(x) * xi * self.sqrt_dt;
        self.step += 1;
        if let Some(w) = self.reflect {
            y = reflect(&y, &w);
        }
        let r = y.norm();
        if !(r <= self.blowup) {
            return Err(Error::Divergence {
                trajectory: self.stream as usize,
                step: self.step,
                radius: r,
            });
        }
        Ok(y)
    }
}

fn reflect(y: &State, w: &Reflect) -> State {
    let c = State::new(w.center[0], w.center[1]);
    let d = y - c;
    let r = d.norm();
    if r >= w.r_in && r <= w.r_out {
        return *y;
    }
    if r == 0.0 {
        return c + State::new(w.r_in, 0.0);
    }
    let width = w.r_out - w.r_in;
    // Fold the radius back into [r_in, r_out].
    let mut t = (r - w.r_in).rem_euclid(2.0 * width);
    if t > width {
        t = 2.0 * width - t;
    }
    c + d * ((w.r_in + t) / r)
}

/// Recorded paths on a shared time grid.
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    /// `states[i][k]` is trajectory `i` at `times[k]`.
    pub states: Vec<Vec<State>>,
    pub seed: u64,
    pub streams: Vec<u64>,
}

impl TrajectoryEnsemble {
    pub fn n_samples(&self) -> usize {
        self.states.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Spacing of the recorded times.
    pub fn record_dt(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// States of every trajectory at record index `k`.
    pub fn slice(&self, k: usize) -> Vec<State> {
        self.states.iter().map(|s| s[k]).collect()
    }

    pub fn terminal(&self) -> Vec<State> {
        self.slice(self.n_times() - 1)
    }

    /// Same paths traversed backwards in time.
    pub fn time_reversed(&self) -> Self {
        let mut out = self.clone();
        for s in out.states.iter_mut() {
            s.reverse();
        }
        out
    }

    /// CSV with columns `traj_id,t,x,y`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "traj_id,t,x,y")?;
        for (i, s) in self.states.iter().enumerate() {
            for (t, x) in self.times.iter().zip(s) {
                writeln!(out, "{i},{t},{},{}", x[0], x[1])?;
            }
        }
        out.flush()
    }
}

/// Integrates `cfg.n_samples` independent paths.
pub fn euler_maruyama<M: Oscillator + ?Sized>(model: &M, cfg: &SimConfig) -> Result<TrajectoryEnsemble> {
    cfg.validate()?;
    let n_rec = cfg.n_steps / cfg.record_every + 1;
    let states = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut st = Stepper::new(model, cfg, i as u64);
            let mut x = st.initial(&cfg.initial);
            let mut path = Vec::with_capacity(n_rec);
            path.push(x);
            for k in 1..=cfg.n_steps {
                x = st.advance(&x)?;
                if k % cfg.record_every == 0 {
                    path.push(x);
                }
            }
            Ok(path)
        })
        .collect::<Result<Vec<_>>>()?;
    let rec_dt = cfg.dt * cfg.record_every as f64;
    Ok(TrajectoryEnsemble {
        times: (0..n_rec).map(|k| k as f64 * rec_dt).collect(),
        states,
        seed: cfg.seed,
        streams: (0..cfg.n_samples as u64).collect(),
    })
}

/// An angle-valued function whose level sets serve as sections.
pub trait PhaseFunction: Sync {
    fn phase(&self, x: &State) -> f64;
}

impl PhaseFunction for ScalarField {
    fn phase(&self, x: &State) -> f64 {
        self.interpolate_angle(x)
    }
}

/// The polar angle about `center`; its level sets are rays.
#[derive(Debug, Clone, Copy)]
pub struct PolarAngle {
    pub center: [f64; 2],
}

impl PhaseFunction for PolarAngle {
    fn phase(&self, x: &State) -> f64 {
        (x[1] - self.center[1]).atan2(x[0] - self.center[0])
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReturnStats {
    pub start: [f64; 2],
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Time until the lifted phase has advanced by one full turn, starting from
/// `x0`. The crossing time is linearly interpolated between steps. Returns
/// are only accepted after the polar angle about `center` has turned by
/// more than π.
pub fn first_return<M: Oscillator + ?Sized, P: PhaseFunction + ?Sized>(
    stepper: &mut Stepper<'_, M>,
    section: &P,
    center: [f64; 2],
    x0: State,
    horizon: f64,
) -> Result<f64> {
    let dt = stepper.dt;
    let max_steps = (horizon / dt).ceil() as usize;
    let polar = PolarAngle { center };
    let mut x = x0;
    let mut lifted = 0.0;
    let mut phase = section.phase(&x);
    let mut angle = polar.phase(&x);
    let mut winding = 0.0;
    for k in 0..max_steps {
        let y = stepper.advance(&x)?;
        let p = section.phase(&y);
        let a = polar.phase(&y);
        let next = lifted + wrap_angle(p - phase);
        winding += wrap_angle(a - angle);
        if next >= TAU && winding.abs() > PI {
            let frac = (TAU - lifted) / (next - lifted);
            return Ok((k as f64 + frac.clamp(0.0, 1.0)) * dt);
        }
        lifted = next;
        phase = p;
        angle = a;
        x = y;
    }
    Err(Error::Timeout { horizon })
}

/// Mean and standard error of the return time from each start over
/// `repeats` independent runs.
pub fn first_return_times<M: Oscillator + ?Sized, P: PhaseFunction + ?Sized>(
    model: &M,
    cfg: &SimConfig,
    section: &P,
    center: [f64; 2],
    starts: &[State],
    repeats: usize,
    horizon: f64,
) -> Result<Vec<ReturnStats>> {
    cfg.validate()?;
    if starts.is_empty() || repeats == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let jobs: Vec<(usize, usize)> = (0..starts.len()).flat_map(|s| (0..repeats).map(move |r| (s, r))).collect();
    let times = jobs
        .par_iter()
        .map(|&(s, r)| {
            let mut st = Stepper::new(model, cfg, (s * repeats + r) as u64);
            first_return(&mut st, section, center, starts[s], horizon)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(starts
        .iter()
        .enumerate()
        .map(|(s, x)| {
            let t = &times[s * repeats..(s + 1) * repeats];
            let (mean, stderr) = mean_stderr(t);
            ReturnStats {
                start: [x[0], x[1]],
                mean,
                stderr,
                count: t.len(),
            }
        })
        .collect())
}

pub(crate) fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Largest pairwise `|mᵢ − mⱼ| / √(seᵢ² + seⱼ²)`.
pub fn max_pairwise_z(stats: &[ReturnStats]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in stats.iter().enumerate() {
        for b in &stats[i + 1..] {
            let z = (a.mean - b.mean).abs() / (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
            worst = worst.max(z);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_linear_focus, make_stuart_landau, LinearFocusParams, StuartLandauParams};
    use proptest::prelude::*;

    fn sl(a: f64, b: f64, sigma: f64) -> crate::model::Model {
        make_stuart_landau(StuartLandauParams { a, b, sigma }).unwrap()
    }

    fn fixed(x: f64, y: f64) -> Initial {
        Initial::Fixed { state: [x, y] }
    }

    #[test]
    fn deterministic_cycle_returns_to_start() {
        let dt = 1e-3;
        let n = (TAU / dt).ceil() as usize;
        let cfg = SimConfig::new(dt, n, 1, 0, fixed(1.0, 0.0));
        let e = euler_maruyama(&sl(1.0, 1.0, 0.0), &cfg).unwrap();
        let end = e.terminal()[0];
        assert!((end - State::new(1.0, 0.0)).norm() < 0.02, "{end}");
    }

    #[test]
    fn zero_noise_is_forward_euler() {
        let m = sl(1.0, 1.3, 0.0);
        let cfg = SimConfig::new(0.01, 300, 2, 9, fixed(0.4, -0.2));
        let e = euler_maruyama(&m, &cfg).unwrap();
        let mut x = State::new(0.4, -0.2);
        for k in 1..=300 {
            x = x + m.drift(&x) * 0.01;
            assert_eq!(e.states[1][k], x);
        }
    }

    #[test]
    fn lyapunov_covariance() {
        let m = make_linear_focus(LinearFocusParams {
            a: [-1.0, -1.0, 1.0, -1.0],
            sigma: 1.0,
        })
        .unwrap();
        let cfg = SimConfig::new(0.005, 4000, 4000, 3, fixed(0.0, 0.0));
        let e = euler_maruyama(&m, &cfg).unwrap();
        // AΣ + ΣAᵀ + σ²I = 0 with A = −I + rotation gives Σ = σ²/2 · I.
        let mut s = [[0.0; 2]; 2];
        let mut n = 0.0;
        for path in &e.states {
            for x in &path[1000..] {
                for a in 0..2 {
                    for b in 0..2 {
                        s[a][b] += x[a] * x[b];
                    }
                }
                n += 1.0;
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let want = if a == b { 0.5 } else { 0.0 };
                assert!((s[a][b] / n - want).abs() < 0.05, "{a}{b}: {}", s[a][b] / n);
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        // Forward Euler with a large step overshoots the cycle and blows up.
        let cfg = SimConfig::new(1.0, 50, 1, 0, fixed(3.0, 0.0));
        assert!(matches!(euler_maruyama(&sl(1.0, 1.0, 0.0), &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn deterministic_return_time_is_period() {
        let m = sl(1.0, 1.0, 0.0);
        let cfg = SimConfig::new(1e-3, 1, 1, 0, fixed(1.0, 0.0));
        let stats = first_return_times(&m, &cfg, &PolarAngle { center: [0.0, 0.0] }, [0.0, 0.0], &[State::new(1.0, 0.0)], 1, 20.0).unwrap();
        assert!((stats[0].mean - TAU).abs() < 2e-3, "{}", stats[0].mean);
    }

    #[test]
    fn reflection_keeps_paths_in_annulus() {
        let mut cfg = SimConfig::new(0.01, 2000, 20, 1, fixed(1.0, 0.0));
        cfg.reflect = Some(Reflect {
            center: [0.0, 0.0],
            r_in: 0.8,
            r_out: 1.2,
        });
        let e = euler_maruyama(&sl(1.0, 1.0, 1.0), &cfg).unwrap();
        for p in &e.states {
            for x in p {
                assert!(x.norm() >= 0.8 - 1e-12 && x.norm() <= 1.2 + 1e-12);
            }
        }
    }

    #[test]
    fn initial_annulus_sampling_stays_inside() {
        let cfg = SimConfig::new(
            0.01,
            1,
            500,
            5,
            Initial::UniformAnnulus {
                center: [1.0, 2.0],
                r_min: 0.5,
                r_max: 1.5,
            },
        );
        let e = euler_maruyama(&sl(1.0, 1.0, 0.0), &cfg).unwrap();
        for x in e.slice(0) {
            let r = (x - State::new(1.0, 2.0)).norm();
            assert!((0.5..=1.5).contains(&r));
        }
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let mut cfg = SimConfig::new(0.01, 10, 3, 0, fixed(1.0, 0.0));
        cfg.record_every = 5;
        let e = euler_maruyama(&sl(1.0, 1.0, 0.2), &cfg).unwrap();
        let mut buf = Vec::new();
        e.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("traj_id,t,x,y"));
        assert_eq!(text.lines().count(), 1 + 3 * 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn streams_are_independent_of_ensemble_size(seed in any::<u64>(), n in 1usize..6) {
            let m = sl(1.0, 1.0, 0.4);
            let small = euler_maruyama(&m, &SimConfig::new(0.01, 50, n, seed, fixed(1.0, 0.0))).unwrap();
            let large = euler_maruyama(&m, &SimConfig::new(0.01, 50, n + 3, seed, fixed(1.0, 0.0))).unwrap();
            for i in 0..n {
                prop_assert_eq!(&small.states[i], &large.states[i]);
            }
        }

        #[test]
        fn parallel_matches_serial(seed in any::<u64>()) {
            let m = sl(1.0, 1.0, 0.4);
            let cfg = SimConfig::new(0.01, 40, 4, seed, fixed(1.0, 0.0));
            let par = euler_maruyama(&m, &cfg).unwrap();
            for i in 0..4 {
                let mut st = Stepper::new(&m, &cfg, i as u64);
                let mut x = st.initial(&cfg.initial);
                for k in 1..=40 {
                    x = st.advance(&x).unwrap();
                    prop_assert_eq!(par.states[i][k], x);
                }
            }
        }

        #[test]
        fn reflection_is_idempotent_inside(r in 0.8f64..1.2, a in 0.0f64..TAU) {
            let w = Reflect { center: [0.0, 0.0], r_in: 0.8, r_out: 1.2 };
            let x = State::new(r * a.cos(), r * a.sin());
            prop_assert_eq!(reflect(&x, &w), x);
        }
    }
}
