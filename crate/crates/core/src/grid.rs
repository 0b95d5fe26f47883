//! Annulus-adapted tensor grid in `(α, β) ∈ [0, 2π) × [−1, 1]`.
//!
//! The embedding is `x = c + r(β) (cos α, sin α)` with the affine radial map
//! `r(β) = r_in + (β + 1)(r_out − r_in)/2`. Nodes are uniform in α
//! (periodic) and in β (both boundary circles included). Node `k` has
//! indices `(i, j)` with `k = j·Nα + i`, so a row of constant β is
//! contiguous in memory.

use std::f64::consts::{PI, TAU};
use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::State;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusGrid {
    pub n_alpha: usize,
    pub n_beta: usize,
    pub r_in: f64,
    pub r_out: f64,
    pub center: [f64; 2],
}

/// Bilinear interpolation stencil: four node indices and weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
}

/// Gradients and Hessians of the coordinate functions α(x), β(x).
#[derive(Debug, Clone, Copy)]
pub struct CoordinateDerivatives {
    pub grad_alpha: Vector2<f64>,
    pub grad_beta: Vector2<f64>,
    pub hess_alpha: Matrix2<f64>,
    pub hess_beta: Matrix2<f64>,
}

pub fn build_grid(r_in: f64, r_out: f64, n_alpha: usize, n_beta: usize, center: [f64; 2]) -> Result<AnnulusGrid> {
    AnnulusGrid::new(r_in, r_out, n_alpha, n_beta, center)
}

impl AnnulusGrid {
    pub fn new(r_in: f64, r_out: f64, n_alpha: usize, n_beta: usize, center: [f64; 2]) -> Result<Self> {
        if !(r_in > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "inner radius must be positive to exclude the phaseless centre, got {r_in}"
            )));
        }
        if !(r_out > r_in) || !r_out.is_finite() {
            return Err(Error::InvalidGrid(format!("need r_in < r_out, got {r_in} and {r_out}")));
        }
        if n_alpha < 8 || n_beta < 4 {
            return Err(Error::InvalidGrid(format!(
                "need at least 8 angular and 4 radial nodes, got {n_alpha} x {n_beta}"
            )));
        }
        if !(center[0].is_finite() && center[1].is_finite()) {
            return Err(Error::InvalidGrid("centre must be finite".into()));
        }
        Ok(Self {
            n_alpha,
            n_beta,
            r_in,
            r_out,
            center,
        })
    }

    /// Same annulus with twice the resolution in both directions.
    pub fn refined(&self) -> Self {
        Self {
            n_alpha: 2 * self.n_alpha,
            n_beta: 2 * self.n_beta,
            ..*self
        }
    }

    pub fn len(&self) -> usize {
        self.n_alpha * self.n_beta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n_alpha + i
    }

    #[inline]
    pub fn indices(&self, k: usize) -> (usize, usize) {
        (k % self.n_alpha, k / self.n_alpha)
    }

    #[inline]
    pub fn h_alpha(&self) -> f64 {
        TAU / self.n_alpha as f64
    }

    #[inline]
    pub fn h_beta(&self) -> f64 {
        2.0 / (self.n_beta - 1) as f64
    }

    #[inline]
    pub fn alpha(&self, i: usize) -> f64 {
        i as f64 * self.h_alpha()
    }

    #[inline]
    pub fn beta(&self, j: usize) -> f64 {
        if j + 1 == self.n_beta {
            1.0
        } else {
            -1.0 + j as f64 * self.h_beta()
        }
    }

    #[inline]
    pub fn dr_dbeta(&self) -> f64 {
        0.5 * (self.r_out - self.r_in)
    }

    #[inline]
    pub fn radius_at(&self, beta: f64) -> f64 {
        self.r_in + (beta + 1.0) * self.dr_dbeta()
    }

    #[inline]
    pub fn radius(&self, j: usize) -> f64 {
        self.radius_at(self.beta(j))
    }

    pub fn center(&self) -> State {
        State::new(self.center[0], self.center[1])
    }

    /// γ⁻¹: grid coordinates to the plane.
    pub fn to_cartesian(&self, alpha: f64, beta: f64) -> State {
        let r = self.radius_at(beta);
        State::new(self.center[0] + r * alpha.cos(), self.center[1] + r * alpha.sin())
    }

    /// γ: the plane to grid coordinates, with α in `[0, 2π)`. β is not
    /// clamped, so points off the annulus give `|β| > 1`.
    pub fn to_grid(&self, x: &State) -> (f64, f64) {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        let mut alpha = dy.atan2(dx);
        if alpha < 0.0 {
            alpha += TAU;
        }
        if alpha >= TAU {
            alpha -= TAU;
        }
        let r = dx.hypot(dy);
        (alpha, (r - self.r_in) / self.dr_dbeta() - 1.0)
    }

    pub fn node_xy(&self, k: usize) -> State {
        let (i, j) = self.indices(k);
        self.to_cartesian(self.alpha(i), self.beta(j))
    }

    /// `|∂(x, y)/∂(α, β)| = r(β) · dr/dβ`.
    #[inline]
    pub fn jacobian(&self, j: usize) -> f64 {
        self.radius(j) * self.dr_dbeta()
    }

    /// Trapezoid weight in β times the Jacobian; sums to the annulus area.
    pub fn weight(&self, k: usize) -> f64 {
        let (_, j) = self.indices(k);
        let edge = if j == 0 || j + 1 == self.n_beta { 0.5 } else { 1.0 };
        edge * self.jacobian(j) * self.h_alpha() * self.h_beta()
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.weight(k)).collect()
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        let j = k / self.n_alpha;
        j == 0 || j + 1 == self.n_beta
    }

    /// Node at α = 0 closest to β = 0, used to fix additive constants and
    /// global phases.
    pub fn anchor(&self) -> usize {
        self.index(0, (self.n_beta - 1) / 2)
    }

    pub fn coordinate_derivatives(&self, k: usize) -> CoordinateDerivatives {
        let (i, j) = self.indices(k);
        let a = self.alpha(i);
        let r = self.radius(j);
        let rho = self.dr_dbeta();
        let (s, c) = a.sin_cos();
        let (s2, c2) = (2.0 * a).sin_cos();
        CoordinateDerivatives {
            grad_alpha: Vector2::new(-s, c) / r,
            grad_beta: Vector2::new(c, s) / rho,
            hess_alpha: Matrix2::new(s2, -c2, -c2, -s2) / (r * r),
            hess_beta: Matrix2::new(s * s, -s * c, -s * c, c * c) / (r * rho),
        }
    }

    /// Bilinear stencil in `(α, β)`. Returns `None` outside `β ∈ [−1, 1]`.
    pub fn stencil(&self, x: &State) -> Option<Stencil> {
        let (alpha, beta) = self.to_grid(x);
        if !(-1.0..=1.0).contains(&beta) {
            return None;
        }
        Some(self.stencil_at(alpha, beta))
    }

    /// Bilinear stencil with β clamped to the annulus.
    pub fn stencil_clamped(&self, x: &State) -> Stencil {
        let (alpha, beta) = self.to_grid(x);
        self.stencil_at(alpha, beta.clamp(-1.0, 1.0))
    }

    fn stencil_at(&self, alpha: f64, beta: f64) -> Stencil {
        let sa = alpha / self.h_alpha();
        let i0 = (sa.floor() as usize).min(self.n_alpha - 1);
        let ta = (sa - i0 as f64).clamp(0.0, 1.0);
        let i1 = (i0 + 1) % self.n_alpha;
        let sb = (beta + 1.0) / self.h_beta();
        let j0 = (sb.floor().max(0.0) as usize).min(self.n_beta - 2);
        let tb = (sb - j0 as f64).clamp(0.0, 1.0);
        let j1 = j0 + 1;
        Stencil {
            nodes: [self.index(i0, j0), self.index(i1, j0), self.index(i0, j1), self.index(i1, j1)],
            weights: [(1.0 - ta) * (1.0 - tb), ta * (1.0 - tb), (1.0 - ta) * tb, ta * tb],
        }
    }

    /// Radius of each β row.
    pub fn radii(&self) -> Vec<f64> {
        (0..self.n_beta).map(|j| self.radius(j)).collect()
    }
}

/// Wraps an angle difference into `(−π, π]`.
#[inline]
pub fn wrap_angle(d: f64) -> f64 {
    let mut w = d % TAU;
    if w > PI {
        w -= TAU;
    } else if w <= -PI {
        w += TAU;
    }
    w
}

/// Real values on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: AnnulusGrid,
    pub name: String,
    pub units: String,
    pub values: Vec<f64>,
    /// `true` where the value is meaningful. `None` means every node.
    pub mask: Option<Vec<bool>>,
}

impl ScalarField {
    pub fn new(grid: AnnulusGrid, name: impl Into<String>, units: impl Into<String>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "field length must match the grid");
        Self {
            grid,
            name: name.into(),
            units: units.into(),
            values,
            mask: None,
        }
    }

    pub fn from_fn(grid: AnnulusGrid, name: impl Into<String>, f: impl Fn(&State) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(&grid.node_xy(k))).collect();
        Self::new(grid, name, "", values)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.values.len());
        self.mask = Some(mask);
        self
    }

    pub fn is_valid(&self, k: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[k])
    }

    /// Grid quadrature `∫ v dx`.
    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| v * self.grid.weight(k))
            .sum()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn interpolate(&self, x: &State) -> Option<f64> {
        let s = self.grid.stencil(x)?;
        Some(apply_stencil(&s, &self.values))
    }

    /// Interpolation of an angle-valued field: neighbours are unwrapped
    /// relative to the first stencil node before blending.
    pub fn interpolate_angle(&self, x: &State) -> f64 {
        let s = self.grid.stencil_clamped(x);
        let base = self.values[s.nodes[0]];
        let mut acc = 0.0;
        for (n, w) in s.nodes.iter().zip(s.weights) {
            acc += w * wrap_angle(self.values[*n] - base);
        }
        base + acc
    }
}

fn apply_stencil(s: &Stencil, values: &[f64]) -> f64 {
    s.nodes.iter().zip(s.weights).map(|(n, w)| w * values[*n]).sum()
}

/// Complex values on grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub grid: AnnulusGrid,
    pub name: String,
    pub values: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(grid: AnnulusGrid, name: impl Into<String>, values: Vec<Complex64>) -> Self {
        assert_eq!(values.len(), grid.len(), "field length must match the grid");
        Self {
            grid,
            name: name.into(),
            values,
        }
    }

    pub fn interpolate(&self, x: &State) -> Option<Complex64> {
        let s = self.grid.stencil(x)?;
        Some(self.blend(&s))
    }

    pub fn interpolate_clamped(&self, x: &State) -> Complex64 {
        self.blend(&self.grid.stencil_clamped(x))
    }

    fn blend(&self, s: &Stencil) -> Complex64 {
        s.nodes.iter().zip(s.weights).map(|(n, w)| self.values[*n] * w).sum()
    }

    /// `√(Σ w |v|²)` with the grid quadrature weights.
    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(k, v)| v.norm_sqr() * self.grid.weight(k))
            .sum::<f64>()
            .sqrt()
    }
}

/// Writes one or two real fields in the shared field CSV schema:
/// `i_alpha,i_beta,alpha,beta,x,y,value_re,value_im`.
pub fn write_field_csv<W: Write>(out: W, grid: &AnnulusGrid, re: &[f64], im: Option<&[f64]>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "i_alpha,i_beta,alpha,beta,x,y,value_re,value_im")?;
    for k in 0..grid.len() {
        let (i, j) = grid.indices(k);
        let p = grid.node_xy(k);
        let v_im = im.map_or(0.0, |v| v[k]);
        writeln!(
            out,
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            i,
            j,
            grid.alpha(i),
            grid.beta(j),
            p[0],
            p[1],
            re[k],
            v_im
        )?;
    }
    out.flush()
}

impl ScalarField {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_field_csv(out, &self.grid, &self.values, None)
    }
}

impl ComplexField {
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let re: Vec<f64> = self.values.iter().map(|v| v.re).collect();
        let im: Vec<f64> = self.values.iter().map(|v| v.im).collect();
        write_field_csv(out, &self.grid, &re, Some(&im))
    }
}
