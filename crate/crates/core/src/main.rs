use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde_json::{json, Value};

use stochphase::analysis::{analyze, stationary, Analysis};
use stochphase::config::{Config, Overrides};
use stochphase::deterministic::{adjoint_prc, find_limit_cycle, write_prc_csv, CycleOptions, PhaseNormalization};
use stochphase::doob::{conditioned_phase_velocity, doob_generator, doob_transformed_model, mean_phase_velocity, Potential};
use stochphase::empirical::{
    autocorrelation, binned_current, empirical_mean_period, fit_autocorrelation, kde_density, radial_peak, PolarBins,
};
use stochphase::grid::ScalarField;
use stochphase::io::{manifest, write_json, write_with};
use stochphase::model::State;
use stochphase::mrt::{isochron_extract, write_isochrons_csv};
use stochphase::sim::euler_maruyama;
use stochphase::spectral::stationary_average;
use stochphase::verify::{grid_checks, lag_steps, monte_carlo_checks};
use stochphase::{Error, Result};

/// Phases of planar stochastic oscillators: mean return time, spectral
/// phase and their Monte Carlo checks.
#[derive(Parser, Debug)]
#[command(name = "stochphase", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration with sections model, grid, sim, solver.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "grid-na", global = true)]
    grid_na: Option<usize>,
    #[arg(long = "grid-nb", global = true)]
    grid_nb: Option<usize>,
    #[arg(long, global = true)]
    rin: Option<f64>,
    #[arg(long, global = true)]
    rout: Option<f64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Euler-Maruyama ensemble to trajectories.csv.
    Simulate,
    /// Density, binned current, autocorrelation and period from an ensemble.
    Empirical,
    /// Stationary density, probability current and mean period.
    Stationary,
    /// Mean return time, MRT phase and its isochrons.
    Mrt,
    /// Leading eigenvalue, amplitude, phase, geometric term and frequency gap.
    Spectral,
    /// Doob correction field and the conditioned phase velocity.
    Doob,
    /// Deterministic limit cycle and adjoint phase response.
    Prc,
    /// Identity suite with pass/fail report.
    Verify,
    /// All grid fields and the combined manifest.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Empirical => "empirical",
            Command::Stationary => "stationary",
            Command::Mrt => "mrt",
            Command::Spectral => "spectral",
            Command::Doob => "doob",
            Command::Prc => "prc",
            Command::Verify => "verify",
            Command::Report => "report",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Some(path) = cli.config.clone() else {
        Cli::command()
            .error(clap::error::ErrorKind::MissingRequiredArgument, "--config <path> is required")
            .exit();
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli, &path) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load(cli: &Cli, path: &Path) -> Result<Config> {
    let mut cfg = Config::load(path).map_err(|e| match e {
        Error::Io(io) => Error::ParameterDomain(format!("cannot read {}: {io}", path.display())),
        other => other,
    })?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        n_alpha: cli.grid_na,
        n_beta: cli.grid_nb,
        r_in: cli.rin,
        r_out: cli.rout,
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Returns `Ok(false)` when the command ran but a check failed.
fn run(cli: &Cli, path: &Path) -> Result<bool> {
    let cfg = load(cli, path)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    let name = cli.command.name();
    let (results, ok) = match cli.command {
        Command::Simulate => (simulate(&cfg, out)?, true),
        Command::Empirical => (empirical(&cfg, out)?, true),
        Command::Stationary => (stationary_cmd(&cfg, out)?, true),
        Command::Mrt => (mrt_cmd(&cfg, out)?, true),
        Command::Spectral => (spectral_cmd(&cfg, out)?, true),
        Command::Doob => (doob_cmd(&cfg, out)?, true),
        Command::Prc => (prc_cmd(&cfg, out)?, true),
        Command::Verify => verify_cmd(&cfg, out, name)?,
        Command::Report => (report_cmd(&cfg, out)?, true),
    };
    let m = manifest(name, &cfg, results);
    write_json(out, "manifest.json", &m)?;
    println!("{}", serde_json::to_string_pretty(&summary_only(&m))?);
    Ok(ok)
}

/// The manifest without the embedded configuration, for the terminal.
fn summary_only(m: &Value) -> Value {
    let mut m = m.clone();
    if let Value::Object(o) = &mut m {
        o.remove("config");
    }
    m
}

fn simulate(cfg: &Config, out: &Path) -> Result<Value> {
    let model = cfg.model.build()?;
    let ens = euler_maruyama(&model, &cfg.sim).map_err(Error::at("simulation"))?;
    write_with(out, "trajectories.csv", |w| ens.write_csv(w))?;
    Ok(json!({
        "n_samples": ens.n_samples(),
        "n_times": ens.n_times(),
        "record_dt": ens.record_dt(),
    }))
}

fn empirical(cfg: &Config, out: &Path) -> Result<Value> {
    let s = &cfg.solver;
    let model = cfg.model.build()?;
    let grid = cfg.grid.build()?;
    let ens = euler_maruyama(&model, &cfg.sim).map_err(Error::at("simulation"))?;

    let k0 = ens.burn_in_index(s.burn_in);
    let total = ens.n_samples() * (ens.n_times() - k0);
    let stride = total.div_ceil(s.kde_max_samples.max(1));
    let samples = ens.pooled(s.burn_in, stride);
    let density = kde_density(&samples, &grid, s.kde_bandwidth).map_err(Error::at("density estimate"))?;
    write_with(out, "density.csv", |w| density.write_csv(w))?;

    let bins = PolarBins::new(grid.center, grid.r_in, grid.r_out, s.current_bins[0], s.current_bins[1])?;
    let current = binned_current(&ens, &bins, s.burn_in, s.min_bin_count).map_err(Error::at("binned current"))?;
    write_with(out, "quiver.csv", |w| current.write_quiver_csv(w))?;

    let period = empirical_mean_period(&ens, grid.center, s.burn_in).map_err(Error::at("empirical period"))?;

    // The autocorrelation needs the grid eigenfunction; skip it when the
    // grid problem cannot be solved for this configuration.
    let autocorr = match analyze(&model, &grid, s) {
        Ok(a) => {
            let dt = ens.record_dt();
            let lags = lag_steps(dt, s.autocorr_max_lag, s.autocorr_points);
            let taus: Vec<f64> = lags.iter().map(|&l| l as f64 * dt).collect();
            let c = autocorrelation(&ens, &a.spectral.q, &lags, s.burn_in).map_err(Error::at("autocorrelation"))?;
            let fit = fit_autocorrelation(&taus, &c).map_err(Error::at("autocorrelation fit"))?;
            write_with(out, "autocorr.csv", |w| {
                writeln!(w, "lag,tau,re,im")?;
                for ((l, t), z) in lags.iter().zip(&taus).zip(&c) {
                    writeln!(w, "{l},{t:.17e},{:.17e},{:.17e}", z.re, z.im)?;
                }
                Ok(())
            })?;
            json!({"mu_fit": fit.mu, "omega_fit": fit.omega, "mu1": a.spectral.mu1(), "omega1": a.spectral.omega1()})
        }
        Err(e) => {
            log::warn!("autocorrelation skipped: {e}");
            json!({"skipped": e.to_string()})
        }
    };
    Ok(json!({
        "n_samples": ens.n_samples(),
        "kde_samples": samples.len(),
        "radial_peak": radial_peak(&density),
        "empirical_period": period,
        "current_masked_bins": current.masked.iter().filter(|m| **m).count(),
        "autocorrelation": autocorr,
    }))
}

fn stationary_cmd(cfg: &Config, out: &Path) -> Result<Value> {
    let model = cfg.model.build()?;
    let grid = cfg.grid.build()?;
    let st = stationary(&model, &grid)?;
    write_with(out, "p0.csv", |w| st.p0.write_csv(w))?;
    write_with(out, "current.csv", |w| st.current.write_quiver_csv(w))?;
    Ok(json!({
        "Tbar": st.period.tbar,
        "flux_spread": st.period.spread,
        "radial_peak": radial_peak(&st.p0),
    }))
}

fn isochron_set(field: &ScalarField, levels: usize) -> Result<Vec<(f64, Vec<Vec<State>>)>> {
    (0..levels)
        .map(|k| {
            let level = std::f64::consts::TAU * k as f64 / levels as f64;
            isochron_extract(field, level).map(|l| (level, l))
        })
        .collect()
}

fn write_mrt(a: &Analysis, cfg: &Config, out: &Path) -> Result<()> {
    write_with(out, "T.csv", |w| a.mrt.t_field.write_csv(w))?;
    write_with(out, "theta.csv", |w| a.mrt.theta_field.write_csv(w))?;
    let iso = isochron_set(&a.mrt.theta_field, cfg.solver.isochron_levels).map_err(Error::at("isochrons"))?;
    write_with(out, "isochrons.csv", |w| write_isochrons_csv(w, &iso))?;
    Ok(())
}

fn write_spectral(a: &Analysis, out: &Path) -> Result<()> {
    let sol = &a.spectral;
    write_with(out, "Q.csv", |w| sol.q.write_csv(w))?;
    write_with(out, "u.csv", |w| sol.u.write_csv(w))?;
    write_with(out, "psi.csv", |w| sol.psi.write_csv(w))?;
    write_with(out, "Omega.csv", |w| sol.omega.write_csv(w))?;
    Ok(())
}

fn full_analysis(cfg: &Config) -> Result<Analysis> {
    analyze(&cfg.model.build()?, &cfg.grid.build()?, &cfg.solver)
}

fn mrt_cmd(cfg: &Config, out: &Path) -> Result<Value> {
    let a = full_analysis(cfg)?;
    write_mrt(&a, cfg, out)?;
    Ok(json!({
        "Tbar": a.tbar(),
        "mrt_rate": a.mrt.rate,
        "compat_residual": a.mrt.compat_residual,
        "jump": a.mrt.jump(),
        "cut": a.mrt.cut,
    }))
}

fn spectral_cmd(cfg: &Config, out: &Path) -> Result<Value> {
    let a = full_analysis(cfg)?;
    write_spectral(&a, out)?;
    Ok(a.summary())
}

fn doob_cmd(cfg: &Config, out: &Path) -> Result<Value> {
    let s = &cfg.solver;
    let a = full_analysis(cfg)?;
    let sol = &a.spectral;
    let dm = doob_transformed_model(&a.model, &sol.u).map_err(Error::at("Doob transform"))?;
    write_with(out, "doob_correction.csv", |w| dm.write_csv(w))?;
    let gen = doob_generator(&a.stationary.backward, &sol.u, Potential::Conservative)?;
    let max_row_sum = gen.row_sums().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sim = cfg.sim_for_grid();
    let conditioned =
        conditioned_phase_velocity(&dm, &sol.psi, &sim, s.burn_in).map_err(Error::at("conditioned run"))?;
    let unconditioned =
        mean_phase_velocity(&a.model, &sol.psi, &sim, s.burn_in).map_err(Error::at("unconditioned run"))?;
    let omega_bar = stationary_average(&sol.omega, &a.stationary.p0)?;
    Ok(json!({
        "doob": {"h": "u", "f": "conservative"},
        "omega1": sol.omega1(),
        "conditioned": conditioned,
        "unconditioned": unconditioned,
        "stationary_mean_Omega": omega_bar,
        "predicted_unconditioned": sol.omega1() - omega_bar,
        "max_abs_row_sum": max_row_sum,
    }))
}

fn prc_cmd(cfg: &Config, out: &Path) -> Result<Value> {
    let model = cfg.model.build()?;
    let g = &cfg.grid;
    let guess = cfg
        .solver
        .cycle_guess
        .unwrap_or([g.center[0] + 0.5 * (g.r_in + g.r_out), g.center[1]]);
    let cycle = find_limit_cycle(&model, State::new(guess[0], guess[1]), &CycleOptions::default())
        .map_err(Error::at("limit cycle"))?;
    let adj = adjoint_prc(&cycle, &model, PhaseNormalization::Angular).map_err(Error::at("adjoint"))?;
    write_with(out, "prc.csv", |w| write_prc_csv(w, &cycle, &adj))?;
    Ok(json!({
        "period": cycle.period,
        "omega": adj.omega,
        "mean_radius": cycle.mean_radius(g.center),
        "closure": cycle.closure,
        "shooting_iterations": cycle.iterations,
        "normalization_residual": adj.normalization_residual,
        "adjoint_periodicity": adj.periodicity,
    }))
}

fn verify_cmd(cfg: &Config, out: &Path, name: &str) -> Result<(Value, bool)> {
    let a = full_analysis(cfg)?;
    let mut checks = grid_checks(&a, cfg.solver.identity_factor)?;
    checks.extend(monte_carlo_checks(&a, cfg)?);
    let ok = checks.iter().all(|c| c.pass);
    let report = json!({"checks": checks, "manifest": manifest(name, cfg, a.summary())});
    write_json(out, "report.json", &report)?;
    for c in &checks {
        eprintln!(
            "{:<28} {:>12.4e}  tol {:>10.4e}  {}",
            c.name,
            c.value,
            c.tolerance,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    let mut summary = a.summary();
    summary["checks_passed"] = json!(checks.iter().filter(|c| c.pass).count());
    summary["checks_total"] = json!(checks.len());
    Ok((summary, ok))
}

fn report_cmd(cfg: &Config, out: &Path) -> Result<Value> {
    let a = full_analysis(cfg)?;
    write_with(out, "p0.csv", |w| a.stationary.p0.write_csv(w))?;
    write_with(out, "current.csv", |w| a.stationary.current.write_quiver_csv(w))?;
    write_mrt(&a, cfg, out)?;
    write_spectral(&a, out)?;
    let psi_iso = isochron_set(&a.spectral.psi, cfg.solver.isochron_levels).map_err(Error::at("psi isochrons"))?;
    write_with(out, "psi_isochrons.csv", |w| write_isochrons_csv(w, &psi_iso))?;
    let dm = doob_transformed_model(&a.model, &a.spectral.u).map_err(Error::at("Doob transform"))?;
    write_with(out, "doob_correction.csv", |w| dm.write_csv(w))?;
    let mut v = a.summary();
    v["stationary_mean_Omega"] = json!(stationary_average(&a.spectral.omega, &a.stationary.p0)?);
    Ok(v)
}
