//! Finite-difference generators on the annulus grid.
//!
//! In grid coordinates `q = (α, β)` the backward operator reads
//!
//! ```text
//! L†U = Bᵅ U_α + Bᵝ U_β + Gᵅᵅ U_αα + 2 Gᵅᵝ U_αβ + Gᵝᵝ U_ββ,
//! Bᵃ = L†[qᵃ],   Gᵃᵇ = ∇qᵃ · D ∇qᵇ,
//! ```
//!
//! and is discretised with second-order central differences, periodic in α
//! and reflecting at `β = ±1`. The forward operator is the exact discrete
//! adjoint `L = W⁻¹ (L†)ᵀ W` with respect to the trapezoid quadrature `W`,
//! so mass conservation and adjointness hold to rounding error. The
//! boundary rows of `L†` are chosen so that this adjoint is a zero-flux
//! finite-volume closure of the Fokker-Planck equation; in the backward
//! picture they impose `∂_β U = 0` to second order.

use std::io::Write;

use nalgebra::Vector2;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{wrap_angle, AnnulusGrid, ScalarField};
use crate::linalg::{shift_invert_arnoldi, ArnoldiOptions, LinearOperator, SparseLu};
use crate::model::{Oscillator, TestFunction};
use crate::probe::truncation_probes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Backward,
    Forward,
    Doob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero normal derivative at both circles.
    Reflecting,
}

/// Sparse square matrix over grid nodes.
///
/// Off-diagonal entries are stored row-wise; the diagonal is kept
/// implicitly as `excess − Σ off-diagonals`, where `excess` is the row sum.
/// Applying the operator evaluates `Σ_c a_kc (u_c − u_k) + excess_k u_k`,
/// so a row with zero excess maps every constant field to exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    pub kind: OperatorKind,
    pub boundary: Boundary,
    pub(crate) row_ptr: Vec<usize>,
    pub(crate) cols: Vec<usize>,
    pub(crate) vals: Vec<f64>,
    pub(crate) excess: Vec<f64>,
}

impl SparseOperator {
    pub(crate) fn from_rows(kind: OperatorKind, rows: Vec<Vec<(usize, f64)>>, excess: Vec<f64>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            kind,
            boundary: Boundary::Reflecting,
            row_ptr,
            cols,
            vals,
            excess,
        }
    }

    pub fn len(&self) -> usize {
        self.excess.len()
    }

    pub fn is_empty(&self) -> bool {
        self.excess.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len() + self.len()
    }

    /// Off-diagonal entries of row `k` as `(column, value)`.
    pub fn row(&self, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[k]..self.row_ptr[k + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn diagonal(&self, k: usize) -> f64 {
        let off: f64 = self.row(k).map(|(_, v)| v).sum();
        self.excess[k] - off
    }

    /// Row sums. Exactly zero for conservative rows.
    pub fn row_sums(&self) -> &[f64] {
        &self.excess
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        (0..self.len()).map(|k| self.diagonal(k).abs()).fold(0.0, f64::max)
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.len());
        (0..self.len())
            .map(|k| {
                let uk = u[k];
                let acc: f64 = self.row(k).map(|(c, v)| v * (u[c] - uk)).sum();
                acc + self.excess[k] * uk
            })
            .collect()
    }

    pub fn apply_complex(&self, u: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(u.len(), self.len());
        (0..self.len())
            .map(|k| {
                let uk = u[k];
                let acc: Complex64 = self.row(k).map(|(c, v)| (u[c] - uk) * v).sum();
                acc + uk * self.excess[k]
            })
            .collect()
    }

    /// Applies the operator to an angle-valued field defined modulo 2π:
    /// neighbour differences are wrapped into `(−π, π]` first. Only
    /// meaningful for conservative rows, where adding `2π` to any node
    /// value leaves the result unchanged.
    pub fn apply_angular(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.len());
        (0..self.len())
            .map(|k| {
                let pk = phi[k];
                self.row(k).map(|(c, v)| v * wrap_angle(phi[c] - pk)).sum::<f64>() + self.excess[k] * pk
            })
            .collect()
    }

    /// All entries including the diagonal, `A − shift·I`.
    pub fn triplets(&self, shift: f64) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for k in 0..self.len() {
            out.push((k, k, self.diagonal(k) - shift));
            out.extend(self.row(k).map(|(c, v)| (k, c, v)));
        }
        out
    }

    /// `W⁻¹ Aᵀ W` for diagonal positive weights `W`.
    pub fn weighted_adjoint(&self, weights: &[f64], kind: OperatorKind) -> Self {
        let n = self.len();
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for k in 0..n {
            for (c, v) in self.row(k) {
                rows[c].push((k, weights[k] * v / weights[c]));
            }
        }
        let diag: Vec<f64> = (0..n).map(|k| self.diagonal(k)).collect();
        let excess = rows
            .iter()
            .zip(&diag)
            .map(|(row, d)| d + row.iter().map(|e| e.1).sum::<f64>())
            .collect();
        Self::from_rows(kind, rows, excess)
    }

    /// Coordinate listing `row,col,value` including the diagonal.
    pub fn write_coo_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "row,col,value")?;
        for (r, c, v) in self.triplets(0.0) {
            writeln!(out, "{r},{c},{v:.17e}")?;
        }
        out.flush()
    }
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        self.len()
    }

    fn apply_c(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.apply_complex(x)
    }

    fn shifted_entries(&self, shift: Complex64) -> Vec<(usize, usize, Complex64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for k in 0..self.len() {
            out.push((k, k, Complex64::new(self.diagonal(k), 0.0) - shift));
            out.extend(self.row(k).map(|(c, v)| (k, c, Complex64::new(v, 0.0))));
        }
        out
    }
}

/// Curvilinear coefficients of the generator at one node.
#[derive(Debug, Clone, Copy)]
pub struct NodeCoefficients {
    pub b_alpha: f64,
    pub b_beta: f64,
    pub g_aa: f64,
    pub g_ab: f64,
    pub g_bb: f64,
}

pub fn node_coefficients<M: Oscillator + ?Sized>(model: &M, grid: &AnnulusGrid) -> Result<Vec<NodeCoefficients>> {
    (0..grid.len())
        .map(|k| {
            let x = grid.node_xy(k);
            let f = model.drift(&x);
            let d = model.diffusion_tensor(&x);
            let cd = grid.coordinate_derivatives(k);
            let c = NodeCoefficients {
                b_alpha: cd.grad_alpha.dot(&f) + d.component_mul(&cd.hess_alpha).sum(),
                b_beta: cd.grad_beta.dot(&f) + d.component_mul(&cd.hess_beta).sum(),
                g_aa: cd.grad_alpha.dot(&(d * cd.grad_alpha)),
                g_ab: cd.grad_alpha.dot(&(d * cd.grad_beta)),
                g_bb: cd.grad_beta.dot(&(d * cd.grad_beta)),
            };
            let all = [c.b_alpha, c.b_beta, c.g_aa, c.g_ab, c.g_bb];
            if all.iter().any(|v| !v.is_finite()) {
                return Err(Error::Assembly(format!(
                    "non-finite drift or diffusion at ({:.4}, {:.4})",
                    x[0], x[1]
                )));
            }
            Ok(c)
        })
        .collect()
}

/// Discrete backward operator `L†` with reflecting radial boundaries.
pub fn assemble_backward<M: Oscillator + ?Sized>(model: &M, grid: &AnnulusGrid) -> Result<SparseOperator> {
    let coef = node_coefficients(model, grid)?;
    let (na, nb) = (grid.n_alpha, grid.n_beta);
    let (ha, hb) = (grid.h_alpha(), grid.h_beta());
    let mut rows = Vec::with_capacity(grid.len());
    let mut peclet_max: f64 = 0.0;
    for k in 0..grid.len() {
        let (i, j) = grid.indices(k);
        let c = coef[k];
        let east = grid.index((i + 1) % na, j);
        let west = grid.index((i + na - 1) % na, j);
        let mut row = vec![
            (east, c.b_alpha / (2.0 * ha) + c.g_aa / (ha * ha)),
            (west, -c.b_alpha / (2.0 * ha) + c.g_aa / (ha * ha)),
        ];
        if c.g_aa > 0.0 {
            peclet_max = peclet_max.max(c.b_alpha.abs() * ha / c.g_aa);
        }
        if c.g_bb > 0.0 {
            peclet_max = peclet_max.max(c.b_beta.abs() * hb / c.g_bb);
        }
        if j == 0 || j + 1 == nb {
            if !(c.g_bb > 0.0) {
                let x = grid.node_xy(k);
                return Err(Error::Assembly(format!(
                    "normal diffusion vanishes at boundary node ({:.4}, {:.4}); reflecting boundary is undefined",
                    x[0], x[1]
                )));
            }
            // Quadrature adjoint of a zero-flux half-cell closure of the
            // forward operator. For smooth U it enforces ∂_β U = O(h²).
            let (inner, drift) = if j == 0 {
                (grid.index(i, 1), c.b_beta / hb)
            } else {
                (grid.index(i, nb - 2), -c.b_beta / hb)
            };
            row.push((inner, drift + 2.0 * c.g_bb / (hb * hb)));
        } else {
            let north = grid.index(i, j + 1);
            let south = grid.index(i, j - 1);
            row.push((north, c.b_beta / (2.0 * hb) + c.g_bb / (hb * hb)));
            row.push((south, -c.b_beta / (2.0 * hb) + c.g_bb / (hb * hb)));
            if c.g_ab != 0.0 {
                let m = 2.0 * c.g_ab / (4.0 * ha * hb);
                let ip = (i + 1) % na;
                let im = (i + na - 1) % na;
                row.push((grid.index(ip, j + 1), m));
                row.push((grid.index(im, j - 1), m));
                row.push((grid.index(im, j + 1), -m));
                row.push((grid.index(ip, j - 1), -m));
            }
        }
        rows.push(row);
    }
    if peclet_max > 2.0 {
        log::warn!(
            "cell Peclet number reaches {peclet_max:.2} (> 2); central differences may oscillate, consider refining the grid"
        );
    }
    Ok(SparseOperator::from_rows(OperatorKind::Backward, rows, vec![0.0; grid.len()]))
}

/// Discrete forward (Fokker-Planck) operator, the quadrature adjoint of
/// [`assemble_backward`].
pub fn assemble_forward<M: Oscillator + ?Sized>(model: &M, grid: &AnnulusGrid) -> Result<SparseOperator> {
    Ok(forward_from_backward(&assemble_backward(model, grid)?, grid))
}

pub fn forward_from_backward(backward: &SparseOperator, grid: &AnnulusGrid) -> SparseOperator {
    backward.weighted_adjoint(&grid.weights(), OperatorKind::Forward)
}

/// Eigenvalues of `op` nearest zero, found with a small real shift.
pub fn spectrum_near_zero(op: &SparseOperator, count: usize) -> Result<Vec<Complex64>> {
    let scale = op.max_abs_diagonal().max(1.0);
    let n = op.len();
    let start: Vec<Complex64> = (0..n)
        .map(|k| Complex64::new(1.0 + 0.25 * ((k * 7919) % 113) as f64 / 113.0, 0.0))
        .collect();
    let pairs = shift_invert_arnoldi(
        op,
        Complex64::new(1e-7 * scale, 0.0),
        &start,
        ArnoldiOptions {
            krylov_dim: 30,
            n_eigs: count,
        },
    )?;
    Ok(pairs.into_iter().map(|p| p.value).collect())
}

/// Stationary density `P₀`: the null vector of the forward operator,
/// normalised so that the grid quadrature of `P₀` equals one.
pub fn stationary_density(forward: &SparseOperator, grid: &AnnulusGrid) -> Result<ScalarField> {
    let n = forward.len();
    if n != grid.len() {
        return Err(Error::GridMismatch);
    }
    let w = grid.weights();
    // Pinning one row keeps the factorisation sparse; since wᵀL = 0 the
    // dropped equation holds automatically once the others do.
    let pin = n / 2;
    let lu = SparseLu::factor_pinned(n, &forward.triplets(0.0), pin)?;
    let mut rhs = vec![0.0; n];
    rhs[pin] = 1.0;
    let mut p = lu.solve(&rhs);
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NullSpace { second: 0.0 });
    }
    let mass: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
    if !(mass.abs() > 0.0) {
        return Err(Error::NullSpace { second: 0.0 });
    }
    for v in p.iter_mut() {
        *v /= mass;
    }

    let scale = forward.max_abs_diagonal().max(1.0);
    let near_zero = spectrum_near_zero(forward, 3)?;
    let mut mags: Vec<f64> = near_zero.iter().map(|z| z.norm()).collect();
    mags.sort_by(f64::total_cmp);
    if let Some(&second) = mags.get(1) {
        if second < 1e-9 * scale {
            return Err(Error::NullSpace { second });
        }
    }

    let pmax = p.iter().fold(0.0f64, |a, &b| a.max(b));
    let pmin = p.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if pmin < 0.0 {
        if pmin < -1e-10 * pmax.max(1.0) {
            log::warn!(
                "stationary density has negative values down to {pmin:.3e} (max {pmax:.3e}); clipping to zero"
            );
        }
        for v in p.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let mass: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
        for v in p.iter_mut() {
            *v /= mass;
        }
    }
    Ok(ScalarField::new(*grid, "P0", "1/area", p))
}

/// Stationary probability current on the grid.
///
/// `j_alpha` and `j_beta` are coordinate flux densities (probability per
/// unit time per unit β across an α-section, and per unit α across a
/// β-circle); `jx`, `jy` are the Cartesian components of `J = fP − ∇·(DP)`.
#[derive(Debug, Clone)]
pub struct Current {
    pub grid: AnnulusGrid,
    pub j_alpha: Vec<f64>,
    pub j_beta: Vec<f64>,
    pub jx: Vec<f64>,
    pub jy: Vec<f64>,
}

fn d_alpha(grid: &AnnulusGrid, v: &[f64], k: usize) -> f64 {
    let (i, j) = grid.indices(k);
    let na = grid.n_alpha;
    (v[grid.index((i + 1) % na, j)] - v[grid.index((i + na - 1) % na, j)]) / (2.0 * grid.h_alpha())
}

/// Central difference in β, second-order one-sided on the boundary rows.
pub(crate) fn d_beta(grid: &AnnulusGrid, v: &[f64], k: usize) -> f64 {
    let (i, j) = grid.indices(k);
    let nb = grid.n_beta;
    let h = grid.h_beta();
    let at = |jj: usize| v[grid.index(i, jj)];
    if j == 0 {
        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
    } else if j + 1 == nb {
        (3.0 * at(nb - 1) - 4.0 * at(nb - 2) + at(nb - 3)) / (2.0 * h)
    } else {
        (at(j + 1) - at(j - 1)) / (2.0 * h)
    }
}

pub fn probability_current<M: Oscillator + ?Sized>(model: &M, grid: &AnnulusGrid, p0: &ScalarField) -> Result<Current> {
    if p0.grid != *grid {
        return Err(Error::GridMismatch);
    }
    let coef = node_coefficients(model, grid)?;
    let n = grid.len();
    // Density per unit coordinate area.
    let pt: Vec<f64> = (0..n).map(|k| grid.jacobian(grid.indices(k).1) * p0.values[k]).collect();
    let gaa: Vec<f64> = (0..n).map(|k| coef[k].g_aa * pt[k]).collect();
    let gab: Vec<f64> = (0..n).map(|k| coef[k].g_ab * pt[k]).collect();
    let gbb: Vec<f64> = (0..n).map(|k| coef[k].g_bb * pt[k]).collect();
    let mut out = Current {
        grid: *grid,
        j_alpha: vec![0.0; n],
        j_beta: vec![0.0; n],
        jx: vec![0.0; n],
        jy: vec![0.0; n],
    };
    let rho = grid.dr_dbeta();
    for k in 0..n {
        let c = coef[k];
        let ja = c.b_alpha * pt[k] - d_alpha(grid, &gaa, k) - d_beta(grid, &gab, k);
        let jb = c.b_beta * pt[k] - d_alpha(grid, &gab, k) - d_beta(grid, &gbb, k);
        let (i, j) = grid.indices(k);
        let (s, co) = grid.alpha(i).sin_cos();
        let r = grid.radius(j);
        let e_alpha = Vector2::new(-s, co) * r;
        let e_beta = Vector2::new(co, s) * rho;
        let cart = (e_alpha * ja + e_beta * jb) / grid.jacobian(j);
        out.j_alpha[k] = ja;
        out.j_beta[k] = jb;
        out.jx[k] = cart[0];
        out.jy[k] = cart[1];
    }
    Ok(out)
}

impl Current {
    /// `∇·J` at each node, from the coordinate fluxes.
    pub fn divergence(&self) -> Vec<f64> {
        let g = &self.grid;
        (0..g.len())
            .map(|k| (d_alpha(g, &self.j_alpha, k) + d_beta(g, &self.j_beta, k)) / g.jacobian(g.indices(k).1))
            .collect()
    }

    /// Probability flux through each section `α = α_i`, by the trapezoid
    /// rule in β.
    pub fn section_fluxes(&self) -> Vec<f64> {
        let g = &self.grid;
        let hb = g.h_beta();
        (0..g.n_alpha)
            .map(|i| {
                (0..g.n_beta)
                    .map(|j| {
                        let edge = if j == 0 || j + 1 == g.n_beta { 0.5 } else { 1.0 };
                        edge * hb * self.j_alpha[g.index(i, j)]
                    })
                    .sum()
            })
            .collect()
    }

    /// Quiver listing `x,y,jx,jy,count` at grid nodes; `count` is left at 0
    /// because grid values are not sample based.
    pub fn write_quiver_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(out, "x,y,jx,jy,count")?;
        for k in 0..self.grid.len() {
            let p = self.grid.node_xy(k);
            writeln!(out, "{:.17e},{:.17e},{:.17e},{:.17e},0", p[0], p[1], self.jx[k], self.jy[k])?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanPeriod {
    pub tbar: f64,
    /// Mean flux `1/T̄`.
    pub flux: f64,
    pub section_fluxes: Vec<f64>,
    /// `(max − min)/mean` of the section fluxes.
    pub spread: f64,
}

/// `T̄ = 1 / ∫ j_α dβ`, averaged over all α sections.
pub fn mean_period(current: &Current) -> Result<MeanPeriod> {
    let sections = current.section_fluxes();
    let flux = sections.iter().sum::<f64>() / sections.len() as f64;
    if !(flux > 0.0) {
        return Err(Error::NonOscillatory(format!(
            "mean angular probability flux is {flux:.3e}; no counterclockwise rotation"
        )));
    }
    let max = sections.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = sections.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (max - min) / flux;
    if spread > 0.05 {
        return Err(Error::NonOscillatory(format!(
            "section fluxes vary by {:.1}% (limit 5%)",
            100.0 * spread
        )));
    }
    Ok(MeanPeriod {
        tbar: 1.0 / flux,
        flux,
        section_fluxes: sections,
        spread,
    })
}

/// Interior sup-norm over rows `1..Nβ−1`.
pub fn interior_sup(grid: &AnnulusGrid, v: &[f64]) -> f64 {
    let mut m: f64 = 0.0;
    for j in 1..grid.n_beta - 1 {
        for i in 0..grid.n_alpha {
            m = m.max(v[grid.index(i, j)].abs());
        }
    }
    m
}

/// Pointwise error of the discrete backward operator on one test function,
/// `L†_h φ − L† φ`, using wrapped differences when `angular`.
pub fn truncation_error<M: Oscillator + ?Sized>(
    model: &M,
    grid: &AnnulusGrid,
    op: &SparseOperator,
    f: &dyn TestFunction,
    angular: bool,
) -> Vec<f64> {
    let values: Vec<f64> = (0..grid.len()).map(|k| f.value(&grid.node_xy(k))).collect();
    let discrete = if angular { op.apply_angular(&values) } else { op.apply(&values) };
    (0..grid.len())
        .map(|k| discrete[k] - crate::model::eval_generator_symbolic(model, f, &grid.node_xy(k)))
        .collect()
}

/// Measured truncation estimate `τ`: the largest interior sup-norm of
/// `L†_h φ − L† φ` over the built-in probe functions.
pub fn truncation_estimate<M: Oscillator + ?Sized>(model: &M, grid: &AnnulusGrid, op: &SparseOperator) -> f64 {
    truncation_probes(grid.center)
        .iter()
        .map(|(name, f)| {
            let err = truncation_error(model, grid, op, f.as_ref(), name.starts_with("angle"));
            interior_sup(grid, &err)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::model::{make_linear_focus, make_stuart_landau, LinearFocusParams, Model, State, StuartLandauParams};
    use crate::probe::Quadratic;
    use nalgebra::Matrix2;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn focus(a: [f64; 4], sigma: f64) -> crate::model::Model {
        make_linear_focus(LinearFocusParams { a, sigma }).unwrap()
    }

    fn sl(a: f64, b: f64, sigma: f64) -> crate::model::Model {
        make_stuart_landau(StuartLandauParams { a, b, sigma }).unwrap()
    }

    struct Laplace;
    impl Oscillator for Laplace {
        fn drift(&self, _x: &State) -> State {
            State::zeros()
        }
        fn noise(&self, _x: &State) -> Matrix2<f64> {
            Matrix2::identity() * 2f64.sqrt()
        }
        fn name(&self) -> &str {
            "laplace"
        }
        fn params(&self) -> Vec<(&'static str, f64)> {
            vec![]
        }
    }

    /// Gaussian density with covariance Σ solving AΣ + ΣAᵀ + σ²I = 0.
    fn lyapunov(a: Matrix2<f64>, sigma: f64) -> Matrix2<f64> {
        // Vectorised: (I⊗A + A⊗I) vec Σ = −σ² vec I, solved densely.
        let i2 = Matrix2::<f64>::identity();
        let mut k = nalgebra::Matrix4::<f64>::zeros();
        for r in 0..2 {
            for c in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        k[(2 * c + r, 2 * q + p)] += a[(r, p)] * i2[(c, q)] + i2[(r, p)] * a[(c, q)];
                    }
                }
            }
        }
        let rhs = nalgebra::Vector4::new(-sigma * sigma, 0.0, 0.0, -sigma * sigma);
        let v = k.lu().solve(&rhs).unwrap();
        Matrix2::new(v[0], v[2], v[1], v[3])
    }

    fn gaussian(cov: Matrix2<f64>, x: &State) -> f64 {
        let inv = cov.try_inverse().unwrap();
        (-0.5 * x.dot(&(inv * x))).exp() / (2.0 * PI * cov.determinant().sqrt())
    }

    #[test]
    fn lyapunov_oracle_solves_its_equation() {
        let a = Matrix2::new(-1.0, -1.0, 1.0, -1.0);
        let s = lyapunov(a, 1.0);
        let res = a * s + s * a.transpose() + Matrix2::identity();
        assert!(res.abs().max() < 1e-12);
        assert!((s - Matrix2::identity() * 0.5).abs().max() < 1e-12);
    }

    #[test]
    fn backward_annihilates_constants_exactly() {
        let g = build_grid(0.2, 2.5, 32, 16, [0.0, 0.0]).unwrap();
        for m in [sl(1.0, 1.0, 0.3), focus([-1.0, -3.0, 1.0, -1.0], 0.7)] {
            let op = assemble_backward(&m, &g).unwrap();
            assert!(op.apply(&vec![1.0; g.len()]).iter().all(|&v| v == 0.0));
            assert!(op.apply(&vec![-3.7; g.len()]).iter().all(|&v| v == 0.0));
            assert!(op.row_sums().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_on_linear_eigenfunction() {
        let Model::LinearFocus(f) = focus([-1.0, -2.0, 2.0, -1.0], 0.5) else { unreachable!() };
        let g = build_grid(0.3, 2.0, 128, 64, [0.0, 0.0]).unwrap();
        let op = assemble_backward(&f, &g).unwrap();
        let w = f.left_eigenvector();
        let lam = f.eigenvalue();
        let q: Vec<Complex64> = (0..g.len())
            .map(|k| {
                let x = g.node_xy(k);
                w[0] * x[0] + w[1] * x[1]
            })
            .collect();
        let lq = op.apply_complex(&q);
        let mut err: f64 = 0.0;
        for j in 1..g.n_beta - 1 {
            for i in 0..g.n_alpha {
                let k = g.index(i, j);
                err = err.max((lq[k] - lam * q[k]).norm());
            }
        }
        // Linear functions are not exactly linear in (α, β); the error is
        // the O(h²) truncation of the polar embedding.
        assert!(err < 5e-3, "{err}");
    }


    #[test]
    fn laplacian_of_radius_squared() {
        let g = build_grid(0.5, 2.0, 128, 64, [0.0, 0.0]).unwrap();
        let op = assemble_backward(&Laplace, &g).unwrap();
        let err = truncation_error(&Laplace, &g, &op, &Quadratic::radius_squared(), false);
        assert!(interior_sup(&g, &err) < 1e-10, "r² is exactly representable in β");
        let v: Vec<f64> = (0..g.len()).map(|k| g.node_xy(k).norm_squared()).collect();
        let lv = op.apply(&v);
        for j in 1..g.n_beta - 1 {
            assert!((lv[g.index(3, j)] - 4.0).abs() < 1e-8);
        }
    }

    #[test]
    fn truncation_error_is_second_order() {
        let m = focus([-1.0, -3.0, 1.0, -1.0], 0.8);
        let p = Quadratic::saddle(true);
        let e = |na, nb| {
            let g = build_grid(0.5, 2.0, na, nb, [0.0, 0.0]).unwrap();
            let op = assemble_backward(&m, &g).unwrap();
            interior_sup(&g, &truncation_error(&m, &g, &op, &p, false))
        };
        let ratio = e(32, 16) / e(64, 32);
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn forward_is_quadrature_adjoint_and_conserves_mass() {
        let g = build_grid(0.2, 2.5, 32, 16, [0.0, 0.0]).unwrap();
        let m = focus([-1.0, -3.0, 1.0, -1.0], 0.7);
        let back = assemble_backward(&m, &g).unwrap();
        let fwd = forward_from_backward(&back, &g);
        let w = g.weights();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let p: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lp = fwd.apply(&p);
            let lq = back.apply(&q);
            let lhs: f64 = (0..g.len()).map(|k| w[k] * lp[k] * q[k]).sum();
            let rhs: f64 = (0..g.len()).map(|k| w[k] * p[k] * lq[k]).sum();
            assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()));
            let mass: f64 = (0..g.len()).map(|k| w[k] * lp[k]).sum();
            let scale: f64 = (0..g.len()).map(|k| (w[k] * lp[k]).abs()).sum();
            assert!(mass.abs() < 1e-10 * scale.max(1.0), "{mass}");
        }
    }

    #[test]
    fn forward_residual_on_gaussian_is_second_order() {
        let a = Matrix2::new(-1.0, -1.0, 1.0, -1.0);
        let m = focus([-1.0, -1.0, 1.0, -1.0], 1.0);
        let cov = lyapunov(a, 1.0);
        let res = |na, nb| {
            let g = build_grid(0.3, 3.0, na, nb, [0.0, 0.0]).unwrap();
            let fwd = assemble_forward(&m, &g).unwrap();
            let p: Vec<f64> = (0..g.len()).map(|k| gaussian(cov, &g.node_xy(k))).collect();
            let lp = fwd.apply(&p);
            // Interior rows away from the boundary ghost rows.
            let mut e: f64 = 0.0;
            for j in 2..g.n_beta - 2 {
                for i in 0..g.n_alpha {
                    e = e.max(lp[g.index(i, j)].abs());
                }
            }
            e
        };
        let (c, f) = (res(64, 32), res(128, 64));
        assert!(f < 0.01, "{f}");
        assert!(c / f > 3.0, "ratio {}", c / f);
    }

    #[test]
    fn stationary_density_of_focus_matches_lyapunov_gaussian() {
        let a = Matrix2::new(-1.0, -1.0, 1.0, -1.0);
        let m = focus([-1.0, -1.0, 1.0, -1.0], 1.0);
        let cov = lyapunov(a, 1.0);
        let g = build_grid(0.05, 4.0, 128, 64, [0.0, 0.0]).unwrap();
        let p0 = stationary_density(&assemble_forward(&m, &g).unwrap(), &g).unwrap();
        // Compare with the Gaussian conditioned on the annulus.
        let exact: Vec<f64> = (0..g.len()).map(|k| gaussian(cov, &g.node_xy(k))).collect();
        let w = g.weights();
        let mass: f64 = exact.iter().zip(&w).map(|(a, b)| a * b).sum();
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..g.len() {
            let e = exact[k] / mass;
            num += w[k] * (p0.values[k] - e).powi(2);
            den += w[k] * e * e;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 0.02, "relative L2 error {rel}");
        assert!((p0.integral() - 1.0).abs() < 1e-10);
        assert!(p0.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stuart_landau_density_is_rotationally_symmetric_and_peaks_at_unit_radius() {
        let g = build_grid(0.2, 2.5, 64, 64, [0.0, 0.0]).unwrap();
        let m = sl(1.0, 1.0, 0.3);
        let p0 = stationary_density(&assemble_forward(&m, &g).unwrap(), &g).unwrap();
        let mut jmax = 0;
        let mut best = 0.0;
        for j in 0..g.n_beta {
            let row: Vec<f64> = (0..g.n_alpha).map(|i| p0.value(i, j)).collect();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let dev = row.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            assert!(dev <= 0.01 * mean.max(1e-300) + 1e-14, "row {j}");
            // Radial marginal density ∝ r·P₀.
            let marginal = mean * g.radius(j);
            if marginal > best {
                best = marginal;
                jmax = j;
            }
        }
        let dr = g.dr_dbeta() * g.h_beta();
        assert!((g.radius(jmax) - 1.0).abs() <= dr, "peak at {}", g.radius(jmax));
    }

    /// Largest interior |J| for the gradient system A = −I, relative to the
    /// drift flux scale |x|·P₀.
    fn gradient_system_current(nb: usize) -> f64 {
        // A = −I is rejected by the constructor as non-rotating, so build
        // it field by field.
        let m = crate::model::LinearFocus {
            matrix: -Matrix2::identity(),
            sigma: 1.0,
        };
        let g = build_grid(0.2, 3.5, 64, nb, [0.0, 0.0]).unwrap();
        let p0 = stationary_density(&assemble_forward(&m, &g).unwrap(), &g).unwrap();
        let j = probability_current(&m, &g, &p0).unwrap();
        let scale = (0..g.len()).map(|k| g.node_xy(k).norm() * p0.values[k]).fold(0.0, f64::max);
        assert!(j.j_alpha.iter().all(|v| v.abs() < 1e-12 * scale));
        let mag: Vec<f64> = j.jx.iter().zip(&j.jy).map(|(a, b)| a.hypot(*b)).collect();
        interior_sup(&g, &mag) / scale
    }

    #[test]
    fn current_of_gradient_system_vanishes_at_second_order() {
        let (c, f) = (gradient_system_current(32), gradient_system_current(64));
        assert!(f < 0.02, "{f}");
        assert!(c / f > 2.5, "ratio {}", c / f);
    }

    fn stuart_landau_current(nb: usize) -> (Current, f64) {
        let g = build_grid(0.2, 2.5, 64, nb, [0.0, 0.0]).unwrap();
        let m = sl(1.0, 1.0, 0.3);
        let p0 = stationary_density(&assemble_forward(&m, &g).unwrap(), &g).unwrap();
        let j = probability_current(&m, &g, &p0).unwrap();
        let pmax = p0.values.iter().copied().fold(0.0, f64::max);
        for k in 0..g.len() {
            if p0.values[k] > 1e-3 * pmax {
                assert!(j.j_alpha[k] > 0.0);
            }
        }
        let jmax = j.jx.iter().zip(&j.jy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
        let div = interior_sup(&g, &j.divergence()) / jmax;
        (j, div)
    }

    #[test]
    fn stuart_landau_current_rotates_and_is_divergence_free() {
        let (_, coarse) = stuart_landau_current(48);
        let (j, fine) = stuart_landau_current(96);
        assert!(fine < 0.06, "{fine}");
        assert!(coarse / fine > 2.5, "ratio {}", coarse / fine);
        let mp = mean_period(&j).unwrap();
        assert!(mp.spread < 1e-10);
    }

    #[test]
    fn small_noise_mean_period_is_two_pi_over_b() {
        let g = build_grid(0.95, 1.05, 64, 128, [0.0, 0.0]).unwrap();
        let m = sl(1.0, 1.0, 0.01);
        let fwd = assemble_forward(&m, &g).unwrap();
        let p0 = stationary_density(&fwd, &g).unwrap();
        let mp = mean_period(&probability_current(&m, &g, &p0).unwrap()).unwrap();
        assert!((mp.tbar - 2.0 * PI).abs() < 0.01 * 2.0 * PI, "{}", mp.tbar);
    }

    #[test]
    fn degenerate_boundary_diffusion_is_rejected() {
        let g = build_grid(0.2, 2.5, 16, 8, [0.0, 0.0]).unwrap();
        assert!(matches!(assemble_backward(&sl(1.0, 1.0, 0.0), &g), Err(Error::Assembly(_))));
    }

    #[test]
    fn coo_export_lists_every_entry() {
        let g = build_grid(0.5, 1.0, 8, 4, [0.0, 0.0]).unwrap();
        let op = assemble_backward(&sl(1.0, 1.0, 0.5), &g).unwrap();
        let mut buf = Vec::new();
        op.write_coo_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + op.nnz());
    }

    #[test]
    fn angular_application_ignores_branch_cut() {
        let g = build_grid(0.5, 2.0, 32, 16, [0.0, 0.0]).unwrap();
        let m = sl(1.0, 1.0, 0.4);
        let op = assemble_backward(&m, &g).unwrap();
        let alpha: Vec<f64> = (0..g.len()).map(|k| g.alpha(g.indices(k).0)).collect();
        let shifted: Vec<f64> = alpha.iter().enumerate().map(|(k, a)| a + if k % 3 == 0 { 2.0 * PI } else { 0.0 }).collect();
        let a = op.apply_angular(&alpha);
        let b = op.apply_angular(&shifted);
        for k in 0..g.len() {
            assert!((a[k] - b[k]).abs() < 1e-9);
            // L†α = b for Stuart-Landau exactly in the continuum and on the grid.
            assert!((a[k] - 1.0).abs() < 1e-9);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn random_stable_focus_keeps_constants_and_mass(
            a11 in -2.0f64..-0.2, a12 in -3.0f64..3.0, a21 in -3.0f64..3.0, a22 in -2.0f64..-0.2,
            sigma in 0.3f64..1.5,
        ) {
            proptest::prop_assume!((a11 + a22).powi(2) - 4.0 * (a11 * a22 - a12 * a21) < -0.1);
            let g = build_grid(0.2, 2.5, 16, 8, [0.0, 0.0]).unwrap();
            let back = assemble_backward(&focus([a11, a12, a21, a22], sigma), &g).unwrap();
            proptest::prop_assert!(back.apply(&vec![2.5; g.len()]).iter().all(|&v| v == 0.0));
            let fwd = forward_from_backward(&back, &g);
            let w = g.weights();
            let p: Vec<f64> = (0..g.len()).map(|k| 1.0 + (k as f64 * 0.37).sin()).collect();
            let lp = fwd.apply(&p);
            let mass: f64 = (0..g.len()).map(|k| w[k] * lp[k]).sum();
            let scale: f64 = (0..g.len()).map(|k| (w[k] * lp[k]).abs()).sum();
            proptest::prop_assert!(mass.abs() < 1e-10 * scale.max(1.0));
        }
    }
}
