//! Run configuration: one JSON file with sections `model`, `grid`, `sim`
//! and `solver`.
//!
//! ```json
//! {
//!   "model": {"model": "stuart_landau", "params": {"a": 1.0, "b": 1.0, "sigma": 0.3}},
//!   "grid": {"n_alpha": 128, "n_beta": 64, "r_in": 0.2, "r_out": 2.5},
//!   "sim": {"dt": 0.01, "n_steps": 10000, "n_samples": 200, "seed": 1,
//!           "initial": {"kind": "fixed", "state": [1.0, 0.0]}},
//!   "solver": {"mrt_repeats": 2000}
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::AnnulusGrid;
use crate::model::ModelConfig;
use crate::sim::{Initial, Reflect, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_alpha: usize,
    pub n_beta: usize,
    pub r_in: f64,
    pub r_out: f64,
    #[serde(default)]
    pub center: [f64; 2],
}

impl GridConfig {
    pub fn build(&self) -> Result<AnnulusGrid> {
        AnnulusGrid::new(self.r_in, self.r_out, self.n_alpha, self.n_beta, self.center)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub krylov_dim: usize,
    pub eigen_tol: f64,
    /// Relative modulus below which `Q` counts as vanishing.
    pub zero_eps: f64,
    /// Relative amplitude below which Ω is masked.
    pub mask_eps: f64,
    pub compat_tol: f64,
    /// Angle of the cut for the mean-return-time field.
    pub cut: f64,
    /// Frequency near which to look for `λ₁`; defaults to `2π/T̄`.
    pub omega_guess: Option<f64>,
    /// Fraction of each path discarded before stationary estimates.
    pub burn_in: f64,
    pub kde_bandwidth: Option<[f64; 2]>,
    /// Pooled samples are thinned to at most this many before the KDE.
    pub kde_max_samples: usize,
    /// Angular and radial bin counts for the binned current.
    pub current_bins: [usize; 2],
    pub min_bin_count: usize,
    /// Longest autocorrelation lag, in time units.
    pub autocorr_max_lag: f64,
    pub autocorr_points: usize,
    /// Radii of the return-time starts; empty spreads five over the annulus.
    pub mrt_radii: Vec<f64>,
    pub mrt_repeats: usize,
    pub return_horizon: f64,
    /// Reflect simulated paths at the annulus walls.
    pub reflect: bool,
    /// Grid identities pass below `identity_factor · τ`.
    pub identity_factor: f64,
    /// Monte Carlo checks pass below this many standard errors.
    pub mc_sigmas: f64,
    /// Relative tolerance for the autocorrelation rates.
    pub autocorr_rel_tol: f64,
    pub isochron_levels: usize,
    /// Starting point for the deterministic cycle search; defaults to the
    /// middle of the annulus on the positive x-axis.
    pub cycle_guess: Option<[f64; 2]>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            krylov_dim: 40,
            eigen_tol: 1e-8,
            zero_eps: 1e-6,
            mask_eps: 1e-4,
            compat_tol: 0.05,
            cut: 0.0,
            omega_guess: None,
            burn_in: 0.2,
            kde_bandwidth: None,
            kde_max_samples: 100_000,
            current_bins: [24, 8],
            min_bin_count: 20,
            autocorr_max_lag: 1.5,
            autocorr_points: 16,
            mrt_radii: Vec::new(),
            mrt_repeats: 2000,
            return_horizon: 200.0,
            reflect: true,
            identity_factor: 10.0,
            mc_sigmas: 3.0,
            autocorr_rel_tol: 0.05,
            isochron_levels: 8,
            cycle_guess: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub grid: GridConfig,
    #[serde(default = "default_sim")]
    pub sim: SimConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_sim() -> SimConfig {
    SimConfig::new(0.01, 10_000, 200, 0, Initial::Fixed { state: [1.0, 0.0] })
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_alpha: Option<usize>,
    pub n_beta: Option<usize>,
    pub r_in: Option<f64>,
    pub r_out: Option<f64>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.sim.seed = s;
        }
        if let Some(n) = o.n_alpha {
            self.grid.n_alpha = n;
        }
        if let Some(n) = o.n_beta {
            self.grid.n_beta = n;
        }
        if let Some(r) = o.r_in {
            self.grid.r_in = r;
        }
        if let Some(r) = o.r_out {
            self.grid.r_out = r;
        }
    }

    /// Simulation settings with the reflecting walls filled in from the
    /// grid when requested.
    pub fn sim_for_grid(&self) -> SimConfig {
        let mut s = self.sim;
        if self.solver.reflect && s.reflect.is_none() {
            s.reflect = Some(Reflect {
                center: self.grid.center,
                r_in: self.grid.r_in,
                r_out: self.grid.r_out,
            });
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.build()?;
        self.grid.build()?;
        self.sim.validate()?;
        let s = &self.solver;
        if !(0.0..1.0).contains(&s.burn_in) {
            return Err(Error::ParameterDomain(format!("burn_in must lie in [0, 1), got {}", s.burn_in)));
        }
        if s.mrt_repeats == 0 || s.autocorr_points < 2 || s.krylov_dim < 4 {
            return Err(Error::ParameterDomain(
                "mrt_repeats ≥ 1, autocorr_points ≥ 2 and krylov_dim ≥ 4 are required".into(),
            ));
        }
        Ok(())
    }

    /// Radii for return-time starts.
    pub fn mrt_radii(&self) -> Vec<f64> {
        if !self.solver.mrt_radii.is_empty() {
            return self.solver.mrt_radii.clone();
        }
        let (a, b) = (self.grid.r_in, self.grid.r_out);
        (0..5).map(|k| a + (b - a) * (0.1 + 0.15 * k as f64)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SL: &str = r#"{
        "model": {"model": "stuart_landau", "params": {"a": 1.0, "b": 1.0, "sigma": 0.3}},
        "grid": {"n_alpha": 64, "n_beta": 32, "r_in": 0.2, "r_out": 2.5},
        "sim": {"dt": 0.01, "n_steps": 100, "n_samples": 4, "seed": 3,
                "initial": {"kind": "fixed", "state": [1.0, 0.0]}}
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let c = Config::from_json(SL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.solver, SolverConfig::default());
        let again = Config::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn overrides_win() {
        let mut c = Config::from_json(SL).unwrap();
        c.apply(&Overrides {
            seed: Some(9),
            n_alpha: Some(32),
            r_out: Some(3.0),
            ..Default::default()
        });
        assert_eq!((c.sim.seed, c.grid.n_alpha, c.grid.n_beta, c.grid.r_out), (9, 32, 32, 3.0));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = SL.replace("\"n_beta\"", "\"nbeta\"");
        assert!(Config::from_json(&bad).is_err());
    }

    #[test]
    fn reflection_follows_the_grid() {
        let c = Config::from_json(SL).unwrap();
        let s = c.sim_for_grid();
        assert_eq!(s.reflect.unwrap().r_out, 2.5);
        assert_eq!(c.mrt_radii().len(), 5);
    }
}
