//! Generalised Doob h-transform.
//!
//! For positive `h` and a potential `f`, the transformed generator is
//! `φ ↦ h⁻¹ L†[hφ] − fφ`. With `f = h⁻¹L†h` it is again conservative and
//! generates the diffusion with drift `f + 2D∇ln h` and unchanged noise.
//! For `h = u` it maps the asymptotic phase ψ to the constant `ω₁`.

use nalgebra::{Matrix2, Vector2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{AnnulusGrid, ScalarField};
use crate::model::{Model, Oscillator, State, TestFunction};
use crate::operator::{d_beta, OperatorKind, SparseOperator};
use crate::sim::{mean_stderr, PhaseFunction, SimConfig, Stepper};

/// The potential subtracted after conjugation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    /// A constant, e.g. an eigenvalue.
    Constant(f64),
    /// `h⁻¹L†h`, which makes the transformed operator conservative.
    Conservative,
}

fn check_positive(h: &ScalarField) -> Result<()> {
    for (k, &v) in h.values.iter().enumerate() {
        if h.is_valid(k) && !(v > 0.0 && v.is_finite()) {
            return Err(Error::Positivity(format!("h = {v:e} at node {k}")));
        }
    }
    Ok(())
}

/// Diagonal conjugation `H⁻¹ A H − F` of the assembled operator.
pub fn doob_generator(backward: &SparseOperator, h: &ScalarField, potential: Potential) -> Result<SparseOperator> {
    if backward.len() != h.grid.len() {
        return Err(Error::GridMismatch);
    }
    check_positive(h)?;
    let hv = &h.values;
    let ah = backward.apply(hv);
    let n = backward.len();
    let mut rows = Vec::with_capacity(n);
    let mut excess = Vec::with_capacity(n);
    for k in 0..n {
        rows.push(backward.row(k).map(|(c, v)| (c, v * hv[c] / hv[k])).collect::<Vec<_>>());
        excess.push(match potential {
            Potential::Constant(f) => ah[k] / hv[k] - f,
            Potential::Conservative => 0.0,
        });
    }
    Ok(SparseOperator::from_rows(OperatorKind::Doob, rows, excess))
}

/// Base model with drift `f + 2D∇ln h`; `∇ln h` lives on grid nodes and is
/// interpolated bilinearly.
#[derive(Debug, Clone)]
pub struct DoobTransformedModel {
    pub base: Model,
    pub grid: AnnulusGrid,
    /// `h` itself when built from a field.
    pub h: Option<ScalarField>,
    /// Cartesian components of `2D∇ln h` at each node.
    pub correction_x: Vec<f64>,
    pub correction_y: Vec<f64>,
}

/// `2D∇ln h` from central differences of `ln h` in grid coordinates.
pub fn doob_transformed_model(base: &Model, h: &ScalarField) -> Result<DoobTransformedModel> {
    check_positive(h)?;
    let g = h.grid;
    let ln_h: Vec<f64> = h.values.iter().map(|v| v.ln()).collect();
    let na = g.n_alpha;
    let mut cx = vec![0.0; g.len()];
    let mut cy = vec![0.0; g.len()];
    for k in 0..g.len() {
        let (i, j) = g.indices(k);
        let da = (ln_h[g.index((i + 1) % na, j)] - ln_h[g.index((i + na - 1) % na, j)]) / (2.0 * g.h_alpha());
        let db = d_beta(&g, &ln_h, k);
        let cd = g.coordinate_derivatives(k);
        let grad = cd.grad_alpha * da + cd.grad_beta * db;
        let c = 2.0 * base.diffusion_tensor(&g.node_xy(k)) * grad;
        cx[k] = c[0];
        cy[k] = c[1];
    }
    Ok(DoobTransformedModel {
        base: *base,
        grid: g,
        h: Some(h.clone()),
        correction_x: cx,
        correction_y: cy,
    })
}

impl DoobTransformedModel {
    /// Correction from a closed-form `h` evaluated at the nodes.
    pub fn from_function<F: TestFunction + ?Sized>(base: &Model, grid: &AnnulusGrid, h: &F) -> Result<Self> {
        let mut cx = vec![0.0; grid.len()];
        let mut cy = vec![0.0; grid.len()];
        for k in 0..grid.len() {
            let x = grid.node_xy(k);
            let v = h.value(&x);
            if !(v > 0.0) {
                return Err(Error::Positivity(format!("h = {v:e} at node {k}")));
            }
            let c = 2.0 * base.diffusion_tensor(&x) * (h.gradient(&x) / v);
            cx[k] = c[0];
            cy[k] = c[1];
        }
        Ok(Self {
            base: *base,
            grid: *grid,
            h: None,
            correction_x: cx,
            correction_y: cy,
        })
    }

    pub fn correction_at_node(&self, k: usize) -> Vector2<f64> {
        Vector2::new(self.correction_x[k], self.correction_y[k])
    }

    /// Interpolated correction; fails outside the annulus.
    pub fn correction_at(&self, x: &State) -> Result<Vector2<f64>> {
        let s = self.grid.stencil(x).ok_or(Error::OutOfCoverage { x: x[0], y: x[1] })?;
        Ok(self.interpolate(&s.nodes, &s.weights))
    }

    fn interpolate(&self, nodes: &[usize; 4], weights: &[f64; 4]) -> Vector2<f64> {
        let mut c = Vector2::zeros();
        for (n, w) in nodes.iter().zip(weights) {
            c[0] += w * self.correction_x[*n];
            c[1] += w * self.correction_y[*n];
        }
        c
    }

    /// Correction field in the shared field CSV schema.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        crate::grid::write_field_csv(out, &self.grid, &self.correction_x, Some(&self.correction_y))
    }
}

impl Oscillator for DoobTransformedModel {
    /// Outside the annulus the correction is clamped to the nearest ring.
    fn drift(&self, x: &State) -> State {
        let s = self.grid.stencil_clamped(x);
        self.base.drift(x) + self.interpolate(&s.nodes, &s.weights)
    }

    fn noise(&self, x: &State) -> Matrix2<f64> {
        self.base.noise(x)
    }

    fn diffusion_tensor(&self, x: &State) -> Matrix2<f64> {
        self.base.diffusion_tensor(x)
    }

    fn name(&self) -> &str {
        "doob_transformed"
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        self.base.params()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhaseVelocity {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Ensemble mean of `dψ/dt` along simulated paths of `model`, from the
/// unwrapped increments of `ψ` after discarding `burn_in` of each path.
pub fn mean_phase_velocity<M: Oscillator + ?Sized, P: PhaseFunction + ?Sized>(
    model: &M,
    psi: &P,
    cfg: &SimConfig,
    burn_in: f64,
) -> Result<PhaseVelocity> {
    use rayon::prelude::*;
    cfg.validate()?;
    let k0 = ((cfg.n_steps as f64) * burn_in.clamp(0.0, 0.99)) as usize;
    let span = (cfg.n_steps - k0) as f64 * cfg.dt;
    let rates = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut st = Stepper::new(model, cfg, i as u64);
            let mut x = st.initial(&cfg.initial);
            let mut p = psi.phase(&x);
            let mut total = 0.0;
            for k in 1..=cfg.n_steps {
                x = st.advance(&x)?;
                let q = psi.phase(&x);
                if k > k0 {
                    total += crate::grid::wrap_angle(q - p);
                }
                p = q;
            }
            Ok(total / span)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, stderr) = mean_stderr(&rates);
    Ok(PhaseVelocity {
        mean,
        stderr,
        n_samples: rates.len(),
    })
}

/// Mean `dψ/dt` under the transformed dynamics; equals `ω₁`.
pub fn conditioned_phase_velocity(
    model: &DoobTransformedModel,
    psi: &ScalarField,
    cfg: &SimConfig,
    burn_in: f64,
) -> Result<PhaseVelocity> {
    if psi.grid != model.grid {
        return Err(Error::GridMismatch);
    }
    mean_phase_velocity(model, psi, cfg, burn_in)
}
