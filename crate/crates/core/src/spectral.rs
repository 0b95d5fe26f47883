//! Stochastic asymptotic phase from the slowest decaying complex
//! eigenfunction of the backward operator.
//!
//! With `L†Q = λ₁Q`, `λ₁ = μ₁ + iω₁` and `Q = u e^{iψ}`, dividing by `Q`
//! splits into
//!
//! ```text
//! L†ψ + Ω = ω₁,             Ω = 2 ∇ln u · D∇ψ
//! L†u / u − ∇ψ · D∇ψ = μ₁
//! ```
//!
//! and with `L†Θ = 2π/T̄` the two phases differ in rate by
//! `Δω = 2π/T̄ − ω₁`.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{wrap_angle, AnnulusGrid, ComplexField, ScalarField};
use crate::linalg::{inverse_iteration, shift_invert_arnoldi, ArnoldiOptions, RitzPair};
use crate::model::Oscillator;
use crate::operator::{d_beta, node_coefficients, SparseOperator};
use crate::sim::{mean_stderr, TrajectoryEnsemble};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralOptions {
    pub krylov_dim: usize,
    /// Target for `‖L†Q − λQ‖ / ‖Q‖` after polishing.
    pub tol: f64,
    /// Relative modulus below which `Q` counts as vanishing.
    pub zero_eps: f64,
    /// Relative amplitude below which Ω is masked.
    pub mask_eps: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            krylov_dim: 40,
            tol: 1e-8,
            zero_eps: 1e-6,
            mask_eps: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Eigenpair {
    pub lambda: Complex64,
    /// Unit grid-L² norm, `arg Q = 0` at node `(0, 0)`.
    pub q: ComplexField,
    /// `‖L†Q − λQ‖ / ‖Q‖` in the grid norm.
    pub residual: f64,
    /// Eigenvalue nearest zero and the residual of the constant field.
    pub lambda0: Complex64,
    pub lambda0_residual: f64,
    /// Converged eigenvalues seen by the solver.
    pub spectrum: Vec<Complex64>,
}

fn weighted_residual(op: &SparseOperator, grid: &AnnulusGrid, lambda: Complex64, v: &[Complex64]) -> f64 {
    let w = grid.weights();
    let lv = op.apply_complex(v);
    let num: f64 = (0..v.len()).map(|k| w[k] * (lv[k] - lambda * v[k]).norm_sqr()).sum();
    let den: f64 = (0..v.len()).map(|k| w[k] * v[k].norm_sqr()).sum();
    (num / den).sqrt()
}

/// The eigenvalue with largest real part among eigenvalues with nonzero
/// imaginary part, excluding `λ₀ = 0`, resolved to `ω₁ = Im λ₁ > 0`.
///
/// `omega_guess` positions the complex shift; `2π/T̄` from the flux formula
/// is a good choice.
pub fn leading_eigenpair(
    backward: &SparseOperator,
    grid: &AnnulusGrid,
    omega_guess: f64,
    opts: &SpectralOptions,
) -> Result<Eigenpair> {
    if backward.len() != grid.len() {
        return Err(Error::GridMismatch);
    }
    if !(omega_guess > 0.0) || !omega_guess.is_finite() {
        return Err(Error::Eigen(format!("frequency guess must be positive, got {omega_guess}")));
    }
    let n = grid.len();
    let scale = backward.max_abs_diagonal().max(1.0);
    let c = grid.center();
    let start: Vec<Complex64> = (0..n)
        .map(|k| {
            let x = grid.node_xy(k) - c;
            Complex64::new(x[0] + 0.1, x[1] - 0.05) + 0.01 * ((k * 7919) % 101) as f64 / 101.0
        })
        .collect();
    let arnoldi = ArnoldiOptions {
        krylov_dim: opts.krylov_dim,
        n_eigs: opts.krylov_dim,
    };
    let converged = |pairs: Vec<RitzPair>| -> Vec<RitzPair> {
        pairs.into_iter().filter(|p| p.residual < 1e-6 * scale).collect()
    };
    let near_rotation = converged(shift_invert_arnoldi(
        backward,
        Complex64::new(0.0, omega_guess),
        &start,
        arnoldi,
    )?);
    let real_start: Vec<Complex64> = start.iter().map(|z| Complex64::new(z.re + 1.0, 0.0)).collect();
    let near_zero = converged(shift_invert_arnoldi(
        backward,
        Complex64::new(1e-3 * omega_guess, 0.0),
        &real_start,
        arnoldi,
    )?);

    let zero_tol = 1e-8 * scale;
    let lambda0 = near_zero
        .iter()
        .map(|p| p.value)
        .min_by(|a, b| a.norm().total_cmp(&b.norm()))
        .ok_or_else(|| Error::Eigen("no eigenvalue converged near zero".into()))?;
    let lambda0_residual = weighted_residual(backward, grid, Complex64::new(0.0, 0.0), &vec![Complex64::new(1.0, 0.0); n]);

    // Merge both runs, dropping duplicates and the trivial eigenvalue.
    let mut cands: Vec<RitzPair> = Vec::new();
    for p in near_rotation.into_iter().chain(near_zero) {
        if p.value.norm() <= zero_tol.max(1e-9) {
            continue;
        }
        if cands.iter().any(|q| (q.value - p.value).norm() < 1e-7 * (1.0 + p.value.norm())) {
            continue;
        }
        cands.push(p);
    }
    let spectrum: Vec<Complex64> = std::iter::once(lambda0).chain(cands.iter().map(|p| p.value)).collect();
    let lead = cands
        .iter()
        .max_by(|a, b| a.value.re.total_cmp(&b.value.re))
        .ok_or_else(|| Error::Eigen("no nontrivial eigenvalue converged".into()))?;
    let imag_tol = 1e-6 * (1.0 + lead.value.norm());
    if lead.value.im.abs() <= imag_tol {
        return Err(Error::NonOscillatory(format!(
            "leading nontrivial eigenvalue {:.6} is real",
            lead.value.re
        )));
    }
    let mut pair = lead.clone();
    if pair.value.im < 0.0 {
        pair.value = pair.value.conj();
        for v in pair.vector.iter_mut() {
            *v = v.conj();
        }
    }
    // Multiplicity: another eigenvalue indistinguishable from λ₁.
    let dup = cands
        .iter()
        .filter(|q| (q.value - pair.value).norm() < 1e-6 * (1.0 + pair.value.norm()))
        .count();
    if dup > 1 {
        return Err(Error::Eigen(format!("eigenvalue {} is not simple", pair.value)));
    }

    let polished = inverse_iteration(backward, &pair, opts.tol * 1e-3, 20)?;
    let mut q = polished.vector;
    let lambda = polished.value;
    let w = grid.weights();
    let norm: f64 = (0..n).map(|k| w[k] * q[k].norm_sqr()).sum::<f64>().sqrt();
    let anchor = q[0];
    let phase = if anchor.norm() > 0.0 { anchor.conj() / anchor.norm() } else { Complex64::new(1.0, 0.0) };
    for v in q.iter_mut() {
        *v = *v * phase / norm;
    }
    q[0].im = 0.0;
    let residual = weighted_residual(backward, grid, lambda, &q);
    if residual > opts.tol {
        log::warn!("eigen residual {residual:.3e} exceeds the target {:.1e}", opts.tol);
    }
    Ok(Eigenpair {
        lambda,
        q: ComplexField::new(*grid, "Q", q),
        residual,
        lambda0,
        lambda0_residual,
        spectrum,
    })
}

/// Polar decomposition `Q = u e^{iψ}`.
#[derive(Debug, Clone)]
pub struct PhaseAmplitude {
    pub u: ScalarField,
    /// Unwrapped along each β row starting from `α = 0`; the starting
    /// values are unwrapped along β.
    pub psi: ScalarField,
    /// Winding of ψ per counterclockwise revolution.
    pub winding: i64,
}

pub fn phase_amplitude(q: &ComplexField, zero_eps: f64) -> Result<PhaseAmplitude> {
    let g = q.grid;
    let umax = q.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(umax > 0.0) {
        return Err(Error::ZeroCrossing { node: 0, modulus: 0.0 });
    }
    for (k, v) in q.values.iter().enumerate() {
        if v.norm() < zero_eps * umax {
            return Err(Error::ZeroCrossing {
                node: k,
                modulus: v.norm(),
            });
        }
    }
    let u: Vec<f64> = q.values.iter().map(|v| v.norm()).collect();
    let raw: Vec<f64> = q.values.iter().map(|v| v.arg()).collect();
    let mut psi = vec![0.0; g.len()];
    let mut start = raw[g.index(0, 0)];
    let mut winding = None;
    for j in 0..g.n_beta {
        if j > 0 {
            start += wrap_angle(raw[g.index(0, j)] - start);
        }
        let mut cur = start;
        psi[g.index(0, j)] = cur;
        for i in 1..g.n_alpha {
            cur += wrap_angle(raw[g.index(i, j)] - cur);
            psi[g.index(i, j)] = cur;
        }
        let total = cur + wrap_angle(raw[g.index(0, j)] - cur) - start;
        let w = (total / TAU).round() as i64;
        match winding {
            None => winding = Some(w),
            Some(w0) if w0 != w => {
                return Err(Error::ZeroCrossing {
                    node: g.index(0, j),
                    modulus: q.values[g.index(0, j)].norm(),
                });
            }
            _ => {}
        }
    }
    Ok(PhaseAmplitude {
        u: ScalarField::new(g, "u", "", u),
        psi: ScalarField::new(g, "psi", "rad", psi),
        winding: winding.unwrap_or(0),
    })
}

fn d_alpha_wrapped(g: &AnnulusGrid, v: &[f64], k: usize) -> f64 {
    let (i, j) = g.indices(k);
    let na = g.n_alpha;
    wrap_angle(v[g.index((i + 1) % na, j)] - v[g.index((i + na - 1) % na, j)]) / (2.0 * g.h_alpha())
}

fn d_alpha_plain(g: &AnnulusGrid, v: &[f64], k: usize) -> f64 {
    let (i, j) = g.indices(k);
    let na = g.n_alpha;
    (v[g.index((i + 1) % na, j)] - v[g.index((i + na - 1) % na, j)]) / (2.0 * g.h_alpha())
}

/// β-derivative of an angle field from wrapped neighbour differences.
fn d_beta_wrapped(g: &AnnulusGrid, v: &[f64], k: usize) -> f64 {
    let (i, j) = g.indices(k);
    let nb = g.n_beta;
    let h = g.h_beta();
    let at = |jj: usize| v[k] + wrap_angle(v[g.index(i, jj)] - v[k]);
    if j == 0 {
        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
    } else if j + 1 == nb {
        (3.0 * at(nb - 1) - 4.0 * at(nb - 2) + at(nb - 3)) / (2.0 * h)
    } else {
        (at(j + 1) - at(j - 1)) / (2.0 * h)
    }
}

/// Grid-coordinate gradients of `ln u` and of the angle field `ψ`.
fn log_and_angle_gradients(u: &ScalarField, psi: &ScalarField, k: usize, ln_u: &[f64]) -> ([f64; 2], [f64; 2]) {
    let g = &u.grid;
    (
        [d_alpha_plain(g, ln_u, k), d_beta(g, ln_u, k)],
        [d_alpha_wrapped(g, &psi.values, k), d_beta_wrapped(g, &psi.values, k)],
    )
}

/// `Ω = 2 ∇ln u · D∇ψ`, masked where `u < mask_eps · max u`.
pub fn omega_field<M: Oscillator + ?Sized>(
    u: &ScalarField,
    psi: &ScalarField,
    model: &M,
    grid: &AnnulusGrid,
    mask_eps: f64,
) -> Result<ScalarField> {
    if u.grid != *grid || psi.grid != *grid {
        return Err(Error::GridMismatch);
    }
    let coef = node_coefficients(model, grid)?;
    let umax = u.values.iter().copied().fold(0.0, f64::max);
    let ln_u: Vec<f64> = u.values.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let mut mask = vec![true; grid.len()];
    let values = (0..grid.len())
        .map(|k| {
            if !(u.values[k] >= mask_eps * umax) {
                mask[k] = false;
                return 0.0;
            }
            let (gl, gp) = log_and_angle_gradients(u, psi, k, &ln_u);
            let c = coef[k];
            2.0 * (c.g_aa * gl[0] * gp[0] + c.g_ab * (gl[0] * gp[1] + gl[1] * gp[0]) + c.g_bb * gl[1] * gp[1])
        })
        .collect();
    Ok(ScalarField::new(*grid, "Omega", "rad/time", values).with_mask(mask))
}

/// `∇ψ · D∇ψ` on the grid.
pub fn phase_energy<M: Oscillator + ?Sized>(psi: &ScalarField, model: &M) -> Result<Vec<f64>> {
    let g = &psi.grid;
    let coef = node_coefficients(model, g)?;
    Ok((0..g.len())
        .map(|k| {
            let a = d_alpha_wrapped(g, &psi.values, k);
            let b = d_beta_wrapped(g, &psi.values, k);
            let c = coef[k];
            c.g_aa * a * a + 2.0 * c.g_ab * a * b + c.g_bb * b * b
        })
        .collect())
}

/// Cartesian gradient of an angle field at node `k`.
pub fn angle_gradient(psi: &ScalarField, k: usize) -> nalgebra::Vector2<f64> {
    let g = &psi.grid;
    let cd = g.coordinate_derivatives(k);
    cd.grad_alpha * d_alpha_wrapped(g, &psi.values, k) + cd.grad_beta * d_beta_wrapped(g, &psi.values, k)
}

/// Cartesian `∇ψ` at `x`, interpolated bilinearly from nodal gradients.
pub fn phase_gradient_at(psi: &ScalarField, x: &crate::model::State) -> Result<nalgebra::Vector2<f64>> {
    let s = psi.grid.stencil(x).ok_or(Error::OutOfCoverage { x: x[0], y: x[1] })?;
    Ok(s.nodes
        .iter()
        .zip(s.weights)
        .map(|(&n, w)| angle_gradient(psi, n) * w)
        .sum())
}

/// `Δω = 2π/T̄ − ω₁`.
pub fn delta_omega(tbar: f64, omega1: f64) -> f64 {
    TAU / tbar - omega1
}

#[derive(Debug, Clone)]
pub struct SpectralSolution {
    pub lambda1: Complex64,
    pub q: ComplexField,
    pub u: ScalarField,
    pub psi: ScalarField,
    pub omega: ScalarField,
    pub winding: i64,
    pub residual: f64,
    pub lambda0: Complex64,
    pub lambda0_residual: f64,
    pub spectrum: Vec<Complex64>,
}

impl SpectralSolution {
    pub fn mu1(&self) -> f64 {
        self.lambda1.re
    }

    pub fn omega1(&self) -> f64 {
        self.lambda1.im
    }

    /// `arg λ₁`, reported next to `ω₁ = Im λ₁`.
    pub fn lambda1_arg(&self) -> f64 {
        self.lambda1.arg()
    }

    /// `L†_h ψ + Ω − ω₁` at every node (masked nodes give 0).
    pub fn imaginary_identity_residual(&self, backward: &SparseOperator) -> Vec<f64> {
        let lpsi = backward.apply_angular(&self.psi.values);
        (0..lpsi.len())
            .map(|k| if self.omega.is_valid(k) { lpsi[k] + self.omega.values[k] - self.omega1() } else { 0.0 })
            .collect()
    }

    /// `L†_h u / u − ∇ψ·D∇ψ − μ₁` at every node.
    pub fn real_identity_residual<M: Oscillator + ?Sized>(&self, backward: &SparseOperator, model: &M) -> Result<Vec<f64>> {
        let lu = backward.apply(&self.u.values);
        let energy = phase_energy(&self.psi, model)?;
        Ok((0..lu.len())
            .map(|k| lu[k] / self.u.values[k] - energy[k] - self.mu1())
            .collect())
    }
}

/// Eigenpair, polar fields and Ω in one call.
pub fn compute_spectral<M: Oscillator + ?Sized>(
    model: &M,
    backward: &SparseOperator,
    grid: &AnnulusGrid,
    omega_guess: f64,
    opts: &SpectralOptions,
) -> Result<SpectralSolution> {
    let eig = leading_eigenpair(backward, grid, omega_guess, opts)?;
    let pa = phase_amplitude(&eig.q, opts.zero_eps)?;
    let omega = omega_field(&pa.u, &pa.psi, model, grid, opts.mask_eps)?;
    Ok(SpectralSolution {
        lambda1: eig.lambda,
        q: eig.q,
        u: pa.u,
        psi: pa.psi,
        omega,
        winding: pa.winding,
        residual: eig.residual,
        lambda0: eig.lambda0,
        lambda0_residual: eig.lambda0_residual,
        spectrum: eig.spectrum,
    })
}

/// Ensemble means of the three angular velocities along recorded paths.
#[derive(Debug, Clone, Serialize)]
pub struct PhaseDecomposition {
    /// Unwrapped ψ increments per unit time.
    pub total: (f64, f64),
    /// Time average of `L†ψ`.
    pub dynamical: (f64, f64),
    /// Time average of `Ω`.
    pub geometric: (f64, f64),
    /// `mean(dynamical) + mean(geometric) − ω₁`.
    pub identity_gap: f64,
    pub masked_fraction: f64,
    /// `[total, dynamical, geometric]` for each trajectory.
    pub per_trajectory: Vec<[f64; 3]>,
}

/// Evaluates `L†ψ` and `Ω` along each path by grid interpolation, with
/// trapezoid time averages over records after `burn_in`.
pub fn phase_decomposition(
    ens: &TrajectoryEnsemble,
    sol: &SpectralSolution,
    backward: &SparseOperator,
    burn_in: f64,
) -> Result<PhaseDecomposition> {
    if ens.n_samples() == 0 || ens.n_times() < 2 {
        return Err(Error::EmptyEnsemble);
    }
    let g = sol.psi.grid;
    let lpsi = ScalarField::new(g, "Lpsi", "rad/time", backward.apply_angular(&sol.psi.values));
    let k0 = ens.burn_in_index(burn_in);
    let dt = ens.record_dt();
    let span = dt * (ens.n_times() - 1 - k0) as f64;
    if !(span > 0.0) {
        return Err(Error::Degenerate("no time left after burn-in".into()));
    }
    let mut masked = 0usize;
    let mut seen = 0usize;
    let mut per = Vec::with_capacity(ens.n_samples());
    for path in &ens.states {
        let pts = &path[k0..];
        let mut total = 0.0;
        let mut dynamic = 0.0;
        let mut geometric = 0.0;
        let mut prev: Option<(f64, f64, f64)> = None;
        for x in pts {
            seen += 1;
            let valid = g.stencil(x).map(|s| s.nodes.iter().all(|&n| sol.omega.is_valid(n))).unwrap_or(false);
            if !valid {
                masked += 1;
            }
            let p = sol.psi.interpolate_angle(x);
            let l = lpsi.interpolate(x).unwrap_or_else(|| apply_clamped(&lpsi, x));
            let o = sol.omega.interpolate(x).unwrap_or_else(|| apply_clamped(&sol.omega, x));
            if let Some((p0, l0, o0)) = prev {
                total += wrap_angle(p - p0);
                dynamic += 0.5 * (l + l0) * dt;
                geometric += 0.5 * (o + o0) * dt;
            }
            prev = Some((p, l, o));
        }
        per.push([total / span, dynamic / span, geometric / span]);
    }
    let frac = masked as f64 / seen as f64;
    if frac > 0.1 {
        return Err(Error::ExcessiveMasking {
            masked_fraction: 100.0 * frac,
        });
    }
    let col = |c: usize| mean_stderr(&per.iter().map(|r| r[c]).collect::<Vec<_>>());
    let (total, dynamical, geometric) = (col(0), col(1), col(2));
    Ok(PhaseDecomposition {
        total,
        dynamical,
        geometric,
        identity_gap: dynamical.0 + geometric.0 - sol.omega1(),
        masked_fraction: frac,
        per_trajectory: per,
    })
}

fn apply_clamped(f: &ScalarField, x: &crate::model::State) -> f64 {
    let s = f.grid.stencil_clamped(x);
    s.nodes.iter().zip(s.weights).map(|(n, w)| w * f.values[*n]).sum()
}

/// Quadrature average `Σ w p₀ Ω` of the geometric term.
pub fn stationary_average(field: &ScalarField, p0: &ScalarField) -> Result<f64> {
    if field.grid != p0.grid {
        return Err(Error::GridMismatch);
    }
    let w = field.grid.weights();
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..w.len() {
        if field.is_valid(k) {
            num += w[k] * p0.values[k] * field.values[k];
            den += w[k] * p0.values[k];
        }
    }
    Ok(num / den)
}
