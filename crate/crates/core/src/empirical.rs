//! Monte Carlo estimators: kernel density, binned probability current,
//! eigenfunction autocorrelation and the empirical mean period.

use std::f64::consts::TAU;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{wrap_angle, AnnulusGrid, ComplexField, ScalarField};
use crate::model::State;
use crate::sim::{mean_stderr, TrajectoryEnsemble};

/// Fraction of each trajectory discarded before stationary estimates.
pub const DEFAULT_BURN_IN: f64 = 0.2;

impl TrajectoryEnsemble {
    /// First record index kept after discarding `burn_in` of each path.
    pub fn burn_in_index(&self, burn_in: f64) -> usize {
        ((self.n_times() as f64) * burn_in.clamp(0.0, 1.0)).floor() as usize
    }

    /// All states after burn-in, taking every `stride`-th record.
    pub fn pooled(&self, burn_in: f64, stride: usize) -> Vec<State> {
        let k0 = self.burn_in_index(burn_in);
        self.states
            .iter()
            .flat_map(|s| s[k0..].iter().step_by(stride.max(1)).copied())
            .collect()
    }
}

/// Silverman's rule per coordinate: `σ̂ · n^{-1/6}` in two dimensions.
pub fn silverman_bandwidth(samples: &[State]) -> [f64; 2] {
    let n = samples.len() as f64;
    let mut h = [0.0; 2];
    for (d, hd) in h.iter_mut().enumerate() {
        let mean = samples.iter().map(|x| x[d]).sum::<f64>() / n;
        let var = samples.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        *hd = var.sqrt() * n.powf(-1.0 / 6.0);
    }
    h
}

/// Gaussian kernel density estimate on the grid nodes, renormalised to
/// unit mass by grid quadrature.
pub fn kde_density(samples: &[State], grid: &AnnulusGrid, bandwidth: Option<[f64; 2]>) -> Result<ScalarField> {
    if samples.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(samples));
    let h = [h[0].max(1e-12), h[1].max(1e-12)];
    let norm = 1.0 / (TAU * h[0] * h[1] * samples.len() as f64);
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let p = grid.node_xy(k);
            let mut acc = 0.0;
            for s in samples {
                let zx = (p[0] - s[0]) / h[0];
                let zy = (p[1] - s[1]) / h[1];
                let q = zx * zx + zy * zy;
                if q < 64.0 {
                    acc += (-0.5 * q).exp();
                }
            }
            acc * norm
        })
        .collect();
    let mut field = ScalarField::new(*grid, "density", "1/area", values);
    let mass = field.integral();
    if !(mass > 0.0) {
        return Err(Error::Degenerate("density estimate has no mass on the grid".into()));
    }
    if mass < 0.9 {
        log::warn!("only {:.1}% of the kernel mass falls on the annulus", 100.0 * mass);
    }
    for v in field.values.iter_mut() {
        *v /= mass;
    }
    Ok(field)
}

/// `m(r) = ∫ p(r, α) r dα` at each grid radius.
pub fn radial_marginal(density: &ScalarField) -> Vec<(f64, f64)> {
    let g = &density.grid;
    (0..g.n_beta)
        .map(|j| {
            let r = g.radius(j);
            let s: f64 = (0..g.n_alpha).map(|i| density.value(i, j)).sum();
            (r, s * r * g.h_alpha())
        })
        .collect()
}

/// Radius at which the radial marginal peaks.
pub fn radial_peak(density: &ScalarField) -> f64 {
    radial_marginal(density)
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, _)| r)
        .unwrap_or(f64::NAN)
}

/// Polar bins over an annulus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolarBins {
    pub center: [f64; 2],
    pub r_in: f64,
    pub r_out: f64,
    pub n_angle: usize,
    pub n_radius: usize,
}

impl PolarBins {
    pub fn new(center: [f64; 2], r_in: f64, r_out: f64, n_angle: usize, n_radius: usize) -> Result<Self> {
        if !(0.0 <= r_in && r_in < r_out) || n_angle == 0 || n_radius == 0 {
            return Err(Error::InvalidGrid(format!(
                "polar bins need 0 ≤ r_in < r_out and positive counts, got [{r_in}, {r_out}] {n_angle}×{n_radius}"
            )));
        }
        Ok(Self {
            center,
            r_in,
            r_out,
            n_angle,
            n_radius,
        })
    }

    pub fn len(&self) -> usize {
        self.n_angle * self.n_radius
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn locate(&self, x: &State) -> Option<usize> {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        let r = dx.hypot(dy);
        if r < self.r_in || r >= self.r_out {
            return None;
        }
        let a = dy.atan2(dx).rem_euclid(TAU);
        let ia = ((a / TAU * self.n_angle as f64) as usize).min(self.n_angle - 1);
        let ir = (((r - self.r_in) / (self.r_out - self.r_in) * self.n_radius as f64) as usize).min(self.n_radius - 1);
        Some(ir * self.n_angle + ia)
    }

    pub fn center_of(&self, b: usize) -> State {
        let (ir, ia) = (b / self.n_angle, b % self.n_angle);
        let a = (ia as f64 + 0.5) * TAU / self.n_angle as f64;
        let r = self.r_in + (ir as f64 + 0.5) * (self.r_out - self.r_in) / self.n_radius as f64;
        State::new(self.center[0] + r * a.cos(), self.center[1] + r * a.sin())
    }

    pub fn area(&self, b: usize) -> f64 {
        let ir = b / self.n_angle;
        let dr = (self.r_out - self.r_in) / self.n_radius as f64;
        let r0 = self.r_in + ir as f64 * dr;
        let r1 = r0 + dr;
        0.5 * (r1 * r1 - r0 * r0) * TAU / self.n_angle as f64
    }
}

/// Stationary current estimate per bin.
#[derive(Debug, Clone)]
pub struct BinnedCurrent {
    pub bins: PolarBins,
    pub jx: Vec<f64>,
    pub jy: Vec<f64>,
    pub se_x: Vec<f64>,
    pub se_y: Vec<f64>,
    pub count: Vec<usize>,
    /// Bins with fewer than the minimum count.
    pub masked: Vec<bool>,
}

impl BinnedCurrent {
    /// Angular component `J · e_θ` at each bin centre.
    pub fn angular(&self) -> Vec<f64> {
        (0..self.bins.len())
            .map(|b| {
                let c = self.bins.center_of(b);
                let d = c - State::new(self.bins.center[0], self.bins.center[1]);
                let e = State::new(-d[1], d[0]) / d.norm();
                self.jx[b] * e[0] + self.jy[b] * e[1]
            })
            .collect()
    }

    /// Quiver CSV `x,y,jx,jy,count`; masked bins are omitted.
    pub fn write_quiver_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "x,y,jx,jy,count")?;
        for b in 0..self.bins.len() {
            if self.masked[b] {
                continue;
            }
            let c = self.bins.center_of(b);
            writeln!(out, "{},{},{},{},{}", c[0], c[1], self.jx[b], self.jy[b], self.count[b])?;
        }
        out.flush()
    }
}

/// `J ≈ Σ Δx/Δt / (N · area)` with each displacement attributed to the bin
/// holding its midpoint; `N` counts all displacements after burn-in.
pub fn binned_current(ens: &TrajectoryEnsemble, bins: &PolarBins, burn_in: f64, min_count: usize) -> Result<BinnedCurrent> {
    if ens.n_samples() == 0 || ens.n_times() < 2 {
        return Err(Error::EmptyEnsemble);
    }
    let dt = ens.record_dt().abs();
    let k0 = ens.burn_in_index(burn_in);
    let nb = bins.len();
    let mut sum = vec![[0.0f64; 2]; nb];
    let mut sq = vec![[0.0f64; 2]; nb];
    let mut count = vec![0usize; nb];
    let mut total = 0usize;
    for path in &ens.states {
        for w in path[k0..].windows(2) {
            total += 1;
            let mid = (w[0] + w[1]) * 0.5;
            if let Some(b) = bins.locate(&mid) {
                let v = (w[1] - w[0]) / dt;
                for d in 0..2 {
                    sum[b][d] += v[d];
                    sq[b][d] += v[d] * v[d];
                }
                count[b] += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut out = BinnedCurrent {
        bins: *bins,
        jx: vec![0.0; nb],
        jy: vec![0.0; nb],
        se_x: vec![0.0; nb],
        se_y: vec![0.0; nb],
        count: count.clone(),
        masked: vec![false; nb],
    };
    for b in 0..nb {
        if count[b] < min_count.max(1) {
            out.masked[b] = true;
            continue;
        }
        let s = total as f64 * bins.area(b);
        out.jx[b] = sum[b][0] / s;
        out.jy[b] = sum[b][1] / s;
        out.se_x[b] = sq[b][0].sqrt() / s;
        out.se_y[b] = sq[b][1].sqrt() / s;
    }
    Ok(out)
}

/// Net counterclockwise crossings of the ray at `angle` per unit time and
/// trajectory, with standard error over trajectories.
pub fn ray_flux(ens: &TrajectoryEnsemble, center: [f64; 2], angle: f64, burn_in: f64) -> Result<(f64, f64)> {
    if ens.n_samples() == 0 || ens.n_times() < 2 {
        return Err(Error::EmptyEnsemble);
    }
    let k0 = ens.burn_in_index(burn_in);
    let span = ens.times[ens.n_times() - 1] - ens.times[k0];
    if !(span > 0.0) {
        return Err(Error::Degenerate("no time left after burn-in".into()));
    }
    let rates: Vec<f64> = ens
        .states
        .iter()
        .map(|p| {
            let rel = |x: &State| wrap_angle((x[1] - center[1]).atan2(x[0] - center[0]) - angle);
            let mut net = 0i64;
            for w in p[k0..].windows(2) {
                let (a, b) = (rel(&w[0]), rel(&w[1]));
                if (b - a).abs() >= std::f64::consts::PI {
                    continue;
                }
                if a < 0.0 && b >= 0.0 {
                    net += 1;
                } else if a >= 0.0 && b < 0.0 {
                    net -= 1;
                }
            }
            net as f64 / span
        })
        .collect();
    Ok(mean_stderr(&rates))
}

/// `C(τ) = ⟨Q(x(t+τ)) · conj Q(x(t))⟩` over times after burn-in and all
/// trajectories. Lags are in record steps and may be negative.
pub fn autocorrelation(ens: &TrajectoryEnsemble, q: &ComplexField, lags: &[i64], burn_in: f64) -> Result<Vec<Complex64>> {
    if ens.n_samples() == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let k0 = ens.burn_in_index(burn_in);
    let len = ens.n_times() - k0;
    for &l in lags {
        if l.unsigned_abs() as usize >= len {
            return Err(Error::LagTooLong {
                lag: l.unsigned_abs() as usize,
                len,
            });
        }
    }
    let mut outside = 0usize;
    let values: Vec<Vec<Complex64>> = ens
        .states
        .iter()
        .map(|p| {
            p[k0..]
                .iter()
                .map(|x| match q.interpolate(x) {
                    Some(v) => v,
                    None => {
                        outside += 1;
                        q.interpolate_clamped(x)
                    }
                })
                .collect()
        })
        .collect();
    let total = ens.n_samples() * len;
    let frac = outside as f64 / total as f64;
    if frac > 0.1 {
        return Err(Error::ExcessiveMasking {
            masked_fraction: 100.0 * frac,
        });
    }
    Ok(lags
        .par_iter()
        .map(|&l| {
            let lag = l.unsigned_abs() as usize;
            let mut acc = Complex64::new(0.0, 0.0);
            let mut n = 0usize;
            for v in &values {
                for t in 0..len - lag {
                    let (a, b) = if l >= 0 { (v[t + lag], v[t]) } else { (v[t], v[t + lag]) };
                    acc += a * b.conj();
                    n += 1;
                }
            }
            acc / n as f64
        })
        .collect())
}

/// Least-squares rates from `ln|C(τ)| ≈ c + μτ` and unwrapped
/// `arg C(τ) ≈ c' + ωτ`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AutocorrelationFit {
    pub mu: f64,
    pub omega: f64,
}

pub fn fit_autocorrelation(taus: &[f64], c: &[Complex64]) -> Result<AutocorrelationFit> {
    if taus.len() != c.len() || taus.len() < 2 {
        return Err(Error::Degenerate("autocorrelation fit needs at least two matching points".into()));
    }
    let logs: Vec<f64> = c.iter().map(|z| z.norm().ln()).collect();
    let mut args = Vec::with_capacity(c.len());
    let mut prev = c[0].arg();
    args.push(prev);
    for z in &c[1..] {
        prev += wrap_angle(z.arg() - prev);
        args.push(prev);
    }
    Ok(AutocorrelationFit {
        mu: slope(taus, &logs),
        omega: slope(taus, &args),
    })
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EmpiricalPeriod {
    pub period: f64,
    pub stderr: f64,
    /// Mean angular velocity and its standard error.
    pub omega: f64,
    pub omega_stderr: f64,
}

/// Total unwrapped angle about `center` divided by total time, over
/// records after burn-in. The standard error comes from the spread of
/// per-trajectory rates.
pub fn empirical_mean_period(ens: &TrajectoryEnsemble, center: [f64; 2], burn_in: f64) -> Result<EmpiricalPeriod> {
    if ens.n_samples() == 0 || ens.n_times() < 2 {
        return Err(Error::EmptyEnsemble);
    }
    let k0 = ens.burn_in_index(burn_in);
    let span = ens.times[ens.n_times() - 1] - ens.times[k0];
    let angles: Vec<f64> = ens
        .states
        .iter()
        .map(|p| {
            let ang = |x: &State| (x[1] - center[1]).atan2(x[0] - center[0]);
            p[k0..].windows(2).map(|w| wrap_angle(ang(&w[1]) - ang(&w[0]))).sum()
        })
        .collect();
    let total: f64 = angles.iter().sum();
    if total.abs() < TAU {
        return Err(Error::Degenerate(format!("total winding {total:.3} is below one turn")));
    }
    let rates: Vec<f64> = angles.iter().map(|a| a / span).collect();
    let omega = total / (span * ens.n_samples() as f64);
    let (_, se) = mean_stderr(&rates);
    let se = if se.is_finite() { se } else { 0.0 };
    Ok(EmpiricalPeriod {
        period: TAU / omega,
        stderr: TAU * se / (omega * omega),
        omega,
        omega_stderr: se,
    })
}
