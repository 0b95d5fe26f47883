//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to
//! stderr (outside the test harness capture) before asserting.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::PathBuf;

use nalgebra::Vector2;
use num_complex::Complex64;

use stochphase::analysis::{analyze, Analysis};
use stochphase::config::Config;
use stochphase::deterministic::{adjoint_prc, find_limit_cycle, malkin_average, CycleOptions, PhaseNormalization};
use stochphase::doob::{
    conditioned_phase_velocity, doob_generator, doob_transformed_model, mean_phase_velocity, Potential,
};
use stochphase::empirical::{
    autocorrelation, binned_current, empirical_mean_period, fit_autocorrelation, kde_density, radial_peak, PolarBins,
};
use stochphase::grid::{AnnulusGrid, ScalarField};
use stochphase::model::{make_linear_focus, make_stuart_landau, LinearFocusParams, Model, Oscillator, State, StuartLandauParams};
use stochphase::mrt::level_points_on_circles;
use stochphase::operator::assemble_backward;
use stochphase::sim::{euler_maruyama, first_return_times, max_pairwise_z, Initial, PolarAngle, Reflect, SimConfig};
use stochphase::spectral::{compute_spectral, phase_gradient_at, stationary_average, SpectralOptions};
use stochphase::verify::{grid_checks, lag_steps};

fn line(name: &str, pass: bool, detail: String) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] {verdict} {name}: {detail}");
    pass
}

fn config(name: &str) -> Config {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    Config::load(&p).unwrap()
}

fn canonical(name: &str) -> (Config, Analysis) {
    let cfg = config(name);
    let a = analyze(&cfg.model.build().unwrap(), &cfg.grid.build().unwrap(), &cfg.solver).unwrap();
    (cfg, a)
}

fn focus(a: [f64; 4], sigma: f64) -> Model {
    make_linear_focus(LinearFocusParams { a, sigma }).unwrap()
}

fn sl(a: f64, b: f64, sigma: f64) -> Model {
    make_stuart_landau(StuartLandauParams { a, b, sigma }).unwrap()
}

/// Eigenvalues of a real 2×2 matrix from its trace and determinant.
fn eig2(a: [f64; 4]) -> Complex64 {
    let tr = a[0] + a[3];
    let det = a[0] * a[3] - a[1] * a[2];
    let disc = Complex64::new(tr * tr / 4.0 - det, 0.0).sqrt();
    let l = Complex64::new(tr / 2.0, 0.0) + disc;
    if l.im < 0.0 {
        l.conj()
    } else {
        l
    }
}

#[test]
fn linear_focus_eigenvalue() {
    let a = [-1.0, -2.0, 2.0, -1.0];
    let m = focus(a, 0.5);
    let exact = eig2(a);
    let err = |na: usize, nb: usize| {
        let g = AnnulusGrid::new(0.002, 2.5, na, nb, [0.0, 0.0]).unwrap();
        let back = assemble_backward(&m, &g).unwrap();
        let sol = compute_spectral(&m, &back, &g, exact.im, &SpectralOptions::default()).unwrap();
        (sol.lambda1, (sol.lambda1 - exact).norm())
    };
    let (l1, e1) = err(128, 64);
    let (l2, e2) = err(256, 128);
    let ratio = e1 / e2;
    let pass = e1 < 0.02 * exact.norm() && (3.0..5.0).contains(&ratio);
    assert!(line(
        "focus eigenvalue",
        pass,
        format!("exact {exact:.4}, 128x64 {l1:.5} (err {e1:.2e}), 256x128 {l2:.5} (err {e2:.2e}), ratio {ratio:.2}")
    ));
}

#[test]
fn identity_suite_both_models() {
    let mut pass = true;
    let mut detail = Vec::new();
    for name in ["focus.json", "sl.json"] {
        let (cfg, a) = canonical(name);
        for c in grid_checks(&a, cfg.solver.identity_factor).unwrap() {
            pass &= c.pass && c.tolerance == 10.0 * a.tau * if c.name == "frequency_gap_identity" { 2.0 } else { 1.0 };
            detail.push(format!("{name}:{} {:.2e}/{:.2e}", c.name, c.value, c.tolerance));
        }
    }
    assert!(line("identity suite", pass, detail.join(", ")));
}

#[test]
fn mrt_isochron_return_times_are_homogeneous() {
    let m = focus([-1.0, -3.0, 1.0, -1.0], 1.0);
    let g = AnnulusGrid::new(0.2, 3.5, 128, 64, [0.0, 0.0]).unwrap();
    let a = analyze(&m, &g, &Default::default()).unwrap();
    let mut cfg = SimConfig::new(0.002, 1, 1, 17, Initial::Fixed { state: [1.0, 0.0] });
    cfg.reflect = Some(Reflect {
        center: g.center,
        r_in: g.r_in,
        r_out: g.r_out,
    });
    let radii = [0.3, 0.6, 1.0, 1.6, 2.4];
    let theta = &a.mrt.theta_field;
    let level = theta.interpolate_angle(&State::new(1.0, 0.0));
    let starts = level_points_on_circles(theta, level, &radii).unwrap();
    let iso = first_return_times(&m, &cfg, theta, g.center, &starts, 10_000, 200.0).unwrap();
    let z_iso = max_pairwise_z(&iso);

    let ray_starts: Vec<State> = radii.iter().map(|&r| State::new(r, 0.0)).collect();
    let ray = PolarAngle { center: g.center };
    let naive = first_return_times(&m, &cfg, &ray, g.center, &ray_starts, 10_000, 200.0).unwrap();
    let z_ray = max_pairwise_z(&naive);
    let means = |s: &[stochphase::sim::ReturnStats]| s.iter().map(|r| format!("{:.3}", r.mean)).collect::<Vec<_>>().join("/");
    assert!(line(
        "MRT homogeneity",
        z_iso < 3.0 && z_ray > 3.0 && starts.len() >= 5,
        format!(
            "isochron max z {z_iso:.2} (means {}), ray max z {z_ray:.2} (means {}), Tbar {:.4}",
            means(&iso),
            means(&naive),
            a.tbar()
        )
    ));
}

#[test]
fn mean_period_matches_simulation() {
    let (cfg, a) = canonical("focus.json");
    let ens = euler_maruyama(&a.model, &cfg.sim_for_grid()).unwrap();
    let emp = empirical_mean_period(&ens, a.grid.center, cfg.solver.burn_in).unwrap();
    let z = (a.tbar() - emp.period).abs() / emp.stderr;
    let spread = a.stationary.period.spread;
    assert!(line(
        "mean period",
        z < 3.0 && spread < 0.01,
        format!(
            "flux Tbar {:.4}, empirical {:.4} ± {:.4} (z {z:.2}), section spread {:.2}%",
            a.tbar(),
            emp.period,
            emp.stderr,
            100.0 * spread
        )
    ));
}

#[test]
fn autocorrelation_rates() {
    let (cfg, a) = canonical("focus.json");
    let s = &cfg.solver;
    let ens = euler_maruyama(&a.model, &cfg.sim_for_grid()).unwrap();
    let lags = lag_steps(ens.record_dt(), s.autocorr_max_lag, s.autocorr_points);
    let taus: Vec<f64> = lags.iter().map(|&l| l as f64 * ens.record_dt()).collect();
    let c = autocorrelation(&ens, &a.spectral.q, &lags, s.burn_in).unwrap();
    let fit = fit_autocorrelation(&taus, &c).unwrap();
    let (mu1, w1) = (a.spectral.mu1(), a.spectral.omega1());
    let rm = ((fit.mu - mu1) / mu1).abs();
    let rw = ((fit.omega - w1) / w1).abs();
    assert!(line(
        "autocorrelation",
        rm < 0.05 && rw < 0.05,
        format!("fit ({:.4}, {:.4}) vs ({mu1:.4}, {w1:.4}); rel errors {rm:.3}, {rw:.3}", fit.mu, fit.omega)
    ));
}

#[test]
fn doob_transform() {
    let (cfg, a) = canonical("focus.json");
    let back = &a.stationary.backward;
    let ones = ScalarField::new(a.grid, "h", "", vec![1.0; a.grid.len()]);

    // (a) h ≡ 1 changes nothing.
    let same_op = [Potential::Constant(0.0), Potential::Conservative].iter().all(|&p| {
        let d = doob_generator(back, &ones, p).unwrap();
        d.triplets(0.0) == back.triplets(0.0) && d.row_sums() == back.row_sums()
    });
    let dm1 = doob_transformed_model(&a.model, &ones).unwrap();
    let probes = [State::new(0.3, -0.2), State::new(1.7, 0.4), State::new(-2.2, 1.1), State::new(9.0, 0.0)];
    let same_drift = probes.iter().all(|x| dm1.drift(x) == a.model.drift(x));

    // (b) conservative transform with h = u has exact zero row sums.
    let d = doob_generator(back, &a.spectral.u, Potential::Conservative).unwrap();
    let zero_rows = d.row_sums().iter().all(|&v| v == 0.0) && d.apply(&vec![1.0; d.len()]).iter().all(|&v| v == 0.0);

    // (c) conditioned and unconditioned phase velocities.
    let sim = cfg.sim_for_grid();
    let sol = &a.spectral;
    let dm = doob_transformed_model(&a.model, &sol.u).unwrap();
    let cond = conditioned_phase_velocity(&dm, &sol.psi, &sim, cfg.solver.burn_in).unwrap();
    let free = mean_phase_velocity(&a.model, &sol.psi, &sim, cfg.solver.burn_in).unwrap();
    let omega_bar = stationary_average(&sol.omega, &a.stationary.p0).unwrap();
    let w1 = sol.omega1();
    let z_cond = (cond.mean - w1).abs() / cond.stderr;
    // Along free paths the mean of L†ψ = ω₁ − Ω is ω₁ − ⟨Ω⟩.
    let z_free = (free.mean - (w1 - omega_bar)).abs() / free.stderr;
    let z_sep = (free.mean - w1).abs() / free.stderr;
    assert!(line(
        "Doob transform",
        same_op && same_drift && zero_rows && z_cond < 3.0 && z_free < 3.0 && z_sep > 3.0,
        format!(
            "h=1 identical op {same_op} drift {same_drift}; zero row sums {zero_rows}; conditioned {:.4} ± {:.4} vs w1 {w1:.4} (z {z_cond:.2}); unconditioned {:.4} ± {:.4} vs w1 - <Omega> {:.4} (z {z_free:.2}, separation from w1 z {z_sep:.1})",
            cond.mean, cond.stderr, free.mean, free.stderr, w1 - omega_bar
        )
    ));
}

#[test]
fn deterministic_bridge() {
    let (a, b) = (1.0, 1.0);
    let det = sl(a, b, 0.0);
    let cycle = find_limit_cycle(&det, State::new(1.0, 0.0), &CycleOptions::default()).unwrap();
    let z = adjoint_prc(&cycle, &det, PhaseNormalization::Frequency(b)).unwrap();
    let prc_err = cycle
        .times
        .iter()
        .enumerate()
        .map(|(k, t)| (z.at(k) - Vector2::new(-(b * t).sin(), (b * t).cos()) / f64::sqrt(a)).norm())
        .fold(0.0, f64::max);

    let za = adjoint_prc(&cycle, &det, PhaseNormalization::Angular).unwrap();
    let push = malkin_average(&cycle, &za, &|x, _| Vector2::new(-x[1], x[0]));

    let noisy = sl(a, b, 0.05);
    let g = AnnulusGrid::new(0.8, 1.2, 128, 64, [0.0, 0.0]).unwrap();
    let back = assemble_backward(&noisy, &g).unwrap();
    let sol = compute_spectral(&noisy, &back, &g, b, &SpectralOptions::default()).unwrap();
    let grad_err = (0..cycle.states.len())
        .map(|k| {
            let gp = phase_gradient_at(&sol.psi, &cycle.state(k)).unwrap();
            (gp - za.at(k)).norm() / za.at(k).norm()
        })
        .fold(0.0, f64::max);
    assert!(line(
        "deterministic bridge",
        prc_err < 1e-3 && (push - 1.0).abs() < 1e-6 && grad_err < 0.1,
        format!("PRC sup error {prc_err:.2e}, Malkin azimuthal average {push:.9}, grad psi vs PRC {:.2}%", 100.0 * grad_err)
    ));
}

fn ring_run(name: &str) -> (f64, f64, f64, usize, usize) {
    let cfg = config(name);
    let s = &cfg.solver;
    let model = cfg.model.build().unwrap();
    let grid = cfg.grid.build().unwrap();
    assert_eq!((cfg.sim.dt, cfg.sim.horizon(), cfg.sim.n_samples), (0.01, 1000.0, 1000));
    let ens = euler_maruyama(&model, &cfg.sim).unwrap();
    let k0 = ens.burn_in_index(s.burn_in);
    let stride = (ens.n_samples() * (ens.n_times() - k0)).div_ceil(s.kde_max_samples);
    let density = kde_density(&ens.pooled(s.burn_in, stride), &grid, s.kde_bandwidth).unwrap();
    let peak = radial_peak(&density);
    let bins = PolarBins::new(grid.center, grid.r_in, grid.r_out, s.current_bins[0], s.current_bins[1]).unwrap();
    let current = binned_current(&ens, &bins, s.burn_in, s.min_bin_count).unwrap();
    let ring = bins.locate(&State::new(grid.center[0] + peak, grid.center[1])).unwrap() / bins.n_angle;
    let ang = current.angular();
    let ring_bins = ring * bins.n_angle..(ring + 1) * bins.n_angle;
    let positive = ring_bins.clone().filter(|&b| !current.masked[b] && ang[b] > 0.0).count();
    let min_ang = ring_bins.map(|b| ang[b]).fold(f64::INFINITY, f64::min);
    let a = match cfg.model {
        stochphase::model::ModelConfig::StuartLandau(p) => p.a,
        _ => unreachable!(),
    };
    (a.sqrt(), peak, min_ang, positive, bins.n_angle)
}

#[test]
fn density_ring_and_rotating_current() {
    let mut pass = true;
    let mut detail = Vec::new();
    for name in ["fig1_a4.json", "fig1_a1.json"] {
        let (target, peak, min_ang, positive, n) = ring_run(name);
        pass &= (peak - target).abs() < 0.2 && positive == n;
        detail.push(format!(
            "{name}: peak r {peak:.3} vs {target:.3}, angular current > 0 in {positive}/{n} bins of the peak ring (min {min_ang:.3e})"
        ));
    }
    assert!(line("density ring and rotating current", pass, detail.join("; ")));
}

#[test]
fn period_from_flux_is_exact_for_isotropic_cycle() {
    // Rotation at constant rate b in every ring gives T̄ = 2π/b exactly.
    let (_, a) = canonical("sl.json");
    assert!((a.tbar() - TAU).abs() < 1e-9, "{}", a.tbar());
}
