//! Planar oscillator models `dx = f(x) dt + g(x) dW`.
//!
//! Every model exposes its drift `f`, its noise matrix `g` (two Wiener
//! components, so `g` is 2×2) and the diffusion tensor `D = ½ g gᵀ`. The
//! built-in systems are the noisy Stuart–Landau oscillator (the normal form
//! of a supercritical Hopf bifurcation) and the linear stochastic focus,
//! whose generator eigenfunctions are known in closed form.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the plane.
pub type State = Vector2<f64>;

/// Drift and diffusion of a planar Itô diffusion.
pub trait Oscillator: Send + Sync {
    fn drift(&self, x: &State) -> State;

    /// Noise matrix `g(x)`; the driving Wiener process is two-dimensional.
    fn noise(&self, x: &State) -> Matrix2<f64>;

    /// `D(x) = ½ g(x) g(x)ᵀ`.
    fn diffusion_tensor(&self, x: &State) -> Matrix2<f64> {
        let g = self.noise(x);
        0.5 * g * g.transpose()
    }

    /// Jacobian `∂f/∂x`. The default uses central differences with a step
    /// of `1e-6` relative to the state's scale.
    fn jacobian(&self, x: &State) -> Matrix2<f64> {
        let h = 1e-6 * x.norm().max(1.0);
        let mut jac = Matrix2::zeros();
        for k in 0..2 {
            let mut e = State::zeros();
            e[k] = h;
            let df = (self.drift(&(x + e)) - self.drift(&(x - e))) / (2.0 * h);
            jac.set_column(k, &df);
        }
        jac
    }

    fn name(&self) -> &str;

    /// Named real parameters, for manifests.
    fn params(&self) -> Vec<(&'static str, f64)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StuartLandauParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFocusParams {
    /// Drift matrix, row-major.
    #[serde(rename = "A")]
    pub a: [f64; 4],
    pub sigma: f64,
}

/// `dz = ((a + ib) z − |z|² z) dt + σ dW` written in real coordinates, with
/// independent additive noise of strength σ on each coordinate.
///
/// The fields are public so that parameter sets outside the oscillatory
/// regime (for instance `a ≤ 0`) can still be built for negative tests;
/// [`StuartLandau::new`] enforces the regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StuartLandau {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

impl StuartLandau {
    pub fn new(params: StuartLandauParams) -> Result<Self> {
        let StuartLandauParams { a, b, sigma } = params;
        if !(a.is_finite() && b.is_finite() && sigma.is_finite()) {
            return Err(Error::ParameterDomain("Stuart-Landau parameters must be finite".into()));
        }
        if a <= 0.0 {
            return Err(Error::ParameterDomain(format!(
                "Stuart-Landau requires a > 0 for a limit cycle, got a = {a}"
            )));
        }
        if sigma < 0.0 {
            return Err(Error::ParameterDomain(format!("noise strength must be >= 0, got {sigma}")));
        }
        Ok(Self { a, b, sigma })
    }
}

impl Oscillator for StuartLandau {
    fn drift(&self, x: &State) -> State {
        let r2 = x.norm_squared();
        State::new(
            self.a * x[0] - self.b * x[1] - r2 * x[0],
            self.b * x[0] + self.a * x[1] - r2 * x[1],
        )
    }

    fn noise(&self, _x: &State) -> Matrix2<f64> {
        Matrix2::identity() * self.sigma
    }

    fn diffusion_tensor(&self, _x: &State) -> Matrix2<f64> {
        Matrix2::identity() * (0.5 * self.sigma * self.sigma)
    }

    fn jacobian(&self, x: &State) -> Matrix2<f64> {
        let (u, v) = (x[0], x[1]);
        let r2 = u * u + v * v;
        Matrix2::new(
            self.a - r2 - 2.0 * u * u,
            -self.b - 2.0 * u * v,
            self.b - 2.0 * u * v,
            self.a - r2 - 2.0 * v * v,
        )
    }

    fn name(&self) -> &str {
        "stuart_landau"
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        vec![("a", self.a), ("b", self.b), ("sigma", self.sigma)]
    }
}

/// `dx = A x dt + σ dW` with `A` a stable focus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFocus {
    pub matrix: Matrix2<f64>,
    pub sigma: f64,
}

impl LinearFocus {
    pub fn new(params: LinearFocusParams) -> Result<Self> {
        let [a11, a12, a21, a22] = params.a;
        let matrix = Matrix2::new(a11, a12, a21, a22);
        if matrix.iter().any(|v| !v.is_finite()) || !params.sigma.is_finite() {
            return Err(Error::ParameterDomain("linear focus parameters must be finite".into()));
        }
        if params.sigma < 0.0 {
            return Err(Error::ParameterDomain(format!(
                "noise strength must be >= 0, got {}",
                params.sigma
            )));
        }
        let tr = matrix.trace();
        let det = matrix.determinant();
        let disc = tr * tr - 4.0 * det;
        if disc >= 0.0 {
            return Err(Error::ParameterDomain(format!(
                "drift matrix has a real spectrum (discriminant {disc:.3e}); a focus needs complex eigenvalues"
            )));
        }
        if tr >= 0.0 {
            return Err(Error::ParameterDomain(format!(
                "drift matrix is not stable (real part {:.3e} >= 0)",
                tr / 2.0
            )));
        }
        Ok(Self {
            matrix,
            sigma: params.sigma,
        })
    }

    /// Eigenvalue `μ + iω` of the drift matrix with `ω > 0`.
    pub fn eigenvalue(&self) -> num_complex::Complex64 {
        let tr = self.matrix.trace();
        let det = self.matrix.determinant();
        num_complex::Complex64::new(tr / 2.0, (det - tr * tr / 4.0).sqrt())
    }

    /// Left eigenvector `w` with `wᵀA = λwᵀ` for [`Self::eigenvalue`],
    /// scaled so that `w₁ = 1` when possible. The generator eigenfunction is
    /// `Q(x) = wᵀx`.
    pub fn left_eigenvector(&self) -> [num_complex::Complex64; 2] {
        use num_complex::Complex64 as C;
        let lam = self.eigenvalue();
        let m = &self.matrix;
        // (Aᵀ − λ) w = 0; first row: (a11 − λ) w1 + a21 w2 = 0.
        if m[(1, 0)].abs() > 1e-14 {
            [C::new(1.0, 0.0), -(C::new(m[(0, 0)], 0.0) - lam) / m[(1, 0)]]
        } else {
            // second row: a12 w1 + (a22 − λ) w2 = 0.
            [-(C::new(m[(1, 1)], 0.0) - lam) / m[(0, 1)], C::new(1.0, 0.0)]
        }
    }
}

impl Oscillator for LinearFocus {
    fn drift(&self, x: &State) -> State {
        self.matrix * x
    }

    fn noise(&self, _x: &State) -> Matrix2<f64> {
        Matrix2::identity() * self.sigma
    }

    fn diffusion_tensor(&self, _x: &State) -> Matrix2<f64> {
        Matrix2::identity() * (0.5 * self.sigma * self.sigma)
    }

    fn jacobian(&self, _x: &State) -> Matrix2<f64> {
        self.matrix
    }

    fn name(&self) -> &str {
        "linear_focus"
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        let m = &self.matrix;
        vec![
            ("a11", m[(0, 0)]),
            ("a12", m[(0, 1)]),
            ("a21", m[(1, 0)]),
            ("a22", m[(1, 1)]),
            ("sigma", self.sigma),
        ]
    }
}

/// Model selection as it appears in configuration files:
/// `{"model": "stuart_landau", "params": {"a": 1, "b": 1, "sigma": 0.3}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "params", rename_all = "snake_case")]
pub enum ModelConfig {
    StuartLandau(StuartLandauParams),
    LinearFocus(LinearFocusParams),
}

impl ModelConfig {
    pub fn build(&self) -> Result<Model> {
        match *self {
            ModelConfig::StuartLandau(p) => make_stuart_landau(p),
            ModelConfig::LinearFocus(p) => make_linear_focus(p),
        }
    }
}

/// One of the built-in models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    StuartLandau(StuartLandau),
    LinearFocus(LinearFocus),
}

pub fn make_stuart_landau(params: StuartLandauParams) -> Result<Model> {
    StuartLandau::new(params).map(Model::StuartLandau)
}

pub fn make_linear_focus(params: LinearFocusParams) -> Result<Model> {
    LinearFocus::new(params).map(Model::LinearFocus)
}

impl Model {
    pub fn config(&self) -> ModelConfig {
        match self {
            Model::StuartLandau(m) => ModelConfig::StuartLandau(StuartLandauParams {
                a: m.a,
                b: m.b,
                sigma: m.sigma,
            }),
            Model::LinearFocus(m) => ModelConfig::LinearFocus(LinearFocusParams {
                a: [m.matrix[(0, 0)], m.matrix[(0, 1)], m.matrix[(1, 0)], m.matrix[(1, 1)]],
                sigma: m.sigma,
            }),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            Model::StuartLandau(m) => m.sigma,
            Model::LinearFocus(m) => m.sigma,
        }
    }

    /// Same model with a different noise strength.
    pub fn with_sigma(&self, sigma: f64) -> Self {
        let mut out = *self;
        match &mut out {
            Model::StuartLandau(m) => m.sigma = sigma,
            Model::LinearFocus(m) => m.sigma = sigma,
        }
        out
    }
}

impl Oscillator for Model {
    fn drift(&self, x: &State) -> State {
        match self {
            Model::StuartLandau(m) => m.drift(x),
            Model::LinearFocus(m) => m.drift(x),
        }
    }

    fn noise(&self, x: &State) -> Matrix2<f64> {
        match self {
            Model::StuartLandau(m) => m.noise(x),
            Model::LinearFocus(m) => m.noise(x),
        }
    }

    fn diffusion_tensor(&self, x: &State) -> Matrix2<f64> {
        match self {
            Model::StuartLandau(m) => m.diffusion_tensor(x),
            Model::LinearFocus(m) => m.diffusion_tensor(x),
        }
    }

    fn jacobian(&self, x: &State) -> Matrix2<f64> {
        match self {
            Model::StuartLandau(m) => m.jacobian(x),
            Model::LinearFocus(m) => m.jacobian(x),
        }
    }

    fn name(&self) -> &str {
        match self {
            Model::StuartLandau(m) => m.name(),
            Model::LinearFocus(m) => m.name(),
        }
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        match self {
            Model::StuartLandau(m) => m.params(),
            Model::LinearFocus(m) => m.params(),
        }
    }
}

/// A twice-differentiable observable, evaluated with its derivatives.
pub trait TestFunction {
    fn value(&self, x: &State) -> f64;
    fn gradient(&self, x: &State) -> Vector2<f64>;
    fn hessian(&self, x: &State) -> Matrix2<f64>;
}

/// Backward Kolmogorov generator applied to `u` at `x`:
/// `∇u·f(x) + Σᵢⱼ Dᵢⱼ(x) ∂ᵢ∂ⱼu(x)`.
pub fn eval_generator_symbolic<M, F>(model: &M, u: &F, x: &State) -> f64
where
    M: Oscillator + ?Sized,
    F: TestFunction + ?Sized,
{
    let d = model.diffusion_tensor(x);
    u.gradient(x).dot(&model.drift(x)) + d.component_mul(&u.hessian(x)).sum()
}
