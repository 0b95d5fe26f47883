//! Smooth test functions with closed-form derivatives.
//!
//! They serve two purposes: unit tests of the discrete generator, and the
//! truncation estimate that sets tolerances for the grid identities.

use nalgebra::{Matrix2, Vector2};

use crate::model::{State, TestFunction};

/// `c + gᵀx + ½ xᵀHx` with constant gradient part `g` and Hessian `H`.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub constant: f64,
    pub linear: Vector2<f64>,
    pub hessian: Matrix2<f64>,
}

impl Quadratic {
    pub fn linear(wx: f64, wy: f64) -> Self {
        Self {
            constant: 0.0,
            linear: Vector2::new(wx, wy),
            hessian: Matrix2::zeros(),
        }
    }

    pub fn radius_squared() -> Self {
        Self {
            constant: 0.0,
            linear: Vector2::zeros(),
            hessian: Matrix2::identity() * 2.0,
        }
    }

    /// `xy` when `mixed`, otherwise `x² − y²`.
    pub fn saddle(mixed: bool) -> Self {
        let hessian = if mixed {
            Matrix2::new(0.0, 1.0, 1.0, 0.0)
        } else {
            Matrix2::new(2.0, 0.0, 0.0, -2.0)
        };
        Self {
            constant: 0.0,
            linear: Vector2::zeros(),
            hessian,
        }
    }
}

impl TestFunction for Quadratic {
    fn value(&self, x: &State) -> f64 {
        self.constant + self.linear.dot(x) + 0.5 * x.dot(&(self.hessian * x))
    }

    fn gradient(&self, x: &State) -> Vector2<f64> {
        self.linear + self.hessian * x
    }

    fn hessian(&self, _x: &State) -> Matrix2<f64> {
        self.hessian
    }
}

/// `arg((x − c₁) + iκ(y − c₂))`, an angle-valued function with the same
/// winding as the polar angle. `κ = 1` gives the polar angle itself.
#[derive(Debug, Clone, Copy)]
pub struct ShearedAngle {
    pub kappa: f64,
    pub center: [f64; 2],
}

impl ShearedAngle {
    pub fn new(kappa: f64, center: [f64; 2]) -> Self {
        Self { kappa, center }
    }
}

impl TestFunction for ShearedAngle {
    fn value(&self, x: &State) -> f64 {
        (self.kappa * (x[1] - self.center[1])).atan2(x[0] - self.center[0])
    }

    fn gradient(&self, x: &State) -> Vector2<f64> {
        let u = x[0] - self.center[0];
        let v = x[1] - self.center[1];
        let k = self.kappa;
        let d = u * u + k * k * v * v;
        Vector2::new(-k * v, k * u) / d
    }

    fn hessian(&self, x: &State) -> Matrix2<f64> {
        let u = x[0] - self.center[0];
        let v = x[1] - self.center[1];
        let k = self.kappa;
        let d = u * u + k * k * v * v;
        let d2 = d * d;
        let xx = 2.0 * k * u * v / d2;
        let yy = -2.0 * k * k * k * u * v / d2;
        let xy = k * (k * k * v * v - u * u) / d2;
        Matrix2::new(xx, xy, xy, yy)
    }
}

/// The probes used for the truncation estimate, in a fixed order.
pub fn truncation_probes(center: [f64; 2]) -> Vec<(String, Box<dyn TestFunction + Send + Sync>)> {
    let shifted = |q: Quadratic| {
        // Express the probe relative to the annulus centre.
        let c = Vector2::new(center[0], center[1]);
        Quadratic {
            constant: -q.linear.dot(&c) + 0.5 * c.dot(&(q.hessian * c)),
            linear: q.linear - q.hessian * c,
            hessian: q.hessian,
        }
    };
    vec![
        ("x".into(), Box::new(shifted(Quadratic::linear(1.0, 0.0))) as Box<dyn TestFunction + Send + Sync>),
        ("y".into(), Box::new(shifted(Quadratic::linear(0.0, 1.0)))),
        ("xy".into(), Box::new(shifted(Quadratic::saddle(true)))),
        ("x2-y2".into(), Box::new(shifted(Quadratic::saddle(false)))),
        ("r2".into(), Box::new(shifted(Quadratic::radius_squared()))),
        ("angle".into(), Box::new(ShearedAngle::new(1.0, center))),
        ("angle_k0.5".into(), Box::new(ShearedAngle::new(0.5, center))),
        ("angle_k2".into(), Box::new(ShearedAngle::new(2.0, center))),
    ]
}
