//! Config-driven command-line runner.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 domain
//! escape, 4 numerical failure (NaN in an aggregate).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::analysis::{
    invariant_bias_curve, invariant_reference, weak_error_curve, ErrorReport, Estimate,
    ReferenceSolution, MIN_FIT_POINTS,
};
use crate::config::{Averaging, ExperimentConfig};
use crate::error::{Error, Result};
use crate::potentials::{assumption_diagnostics, State};
use crate::report::{self, LyapunovRow, RunManifest, SampleTable};
use crate::rng::derive_substream;
use crate::sampler::{ergodic_averages, run_ensemble};
use crate::scheme::lyapunov_drift_probe;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ESCAPE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Stream level of Lyapunov probes, apart from ensemble levels.
const PROBE_LEVEL: u64 = 1 << 40;

#[derive(Debug, Parser)]
#[command(
    name = "stopped-langevin",
    version,
    about = "Stopped symplectic Euler-Maruyama experiments for kinetic Langevin dynamics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `run.threads`.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Ensemble or long-run averages of the configured observables.
    Simulate,
    /// Finite-time weak error over `analysis.delta_grid`.
    WeakError,
    /// Invariant-measure bias over `analysis.delta_grid`.
    InvariantBias,
    /// Growth-assumption diagnostics along a probe ladder.
    CheckPotential,
    /// One-step Lyapunov drift at high-energy probes.
    LyapunovProbe,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Escaped { .. } | Error::EscapedEnsemble(_) => EXIT_ESCAPE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Parses arguments, runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut c = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => other,
    })?;
    if let Some(seed) = cli.seed {
        c.run.master_seed = seed;
    }
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        c.run.threads = Some(t);
    }
    Ok(c)
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let config = load(cli)?;
    let started = Instant::now();
    if cli.command == Command::CheckPotential {
        check_potential(&config)?;
        return Ok(EXIT_OK);
    }
    fs::create_dir_all(&cli.out)?;
    let mut outputs = Vec::new();
    let result = match cli.command {
        Command::Simulate => simulate(&config, &cli.out, &mut outputs),
        Command::WeakError => weak_error(&config, &cli.out, &mut outputs),
        Command::InvariantBias => invariant_bias(&config, &cli.out, &mut outputs),
        Command::LyapunovProbe => lyapunov_probe(&config, &cli.out, &mut outputs),
        Command::CheckPotential => unreachable!(),
    };
    RunManifest::new(
        config.hash(),
        config.run.master_seed,
        started.elapsed().as_secs_f64(),
        outputs,
    )
    .write(&cli.out)?;
    result
}

fn write<T: serde::Serialize>(
    dir: &Path,
    name: &str,
    rows: &[T],
    header: &[&str],
    outputs: &mut Vec<String>,
) -> Result<()> {
    report::write_rows(&dir.join(name), rows, header)?;
    outputs.push(name.to_string());
    Ok(())
}

fn check_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().any(f64::is_nan) {
        return Err(Error::Numerical(format!("NaN in {what}")));
    }
    Ok(())
}

fn simulate(c: &ExperimentConfig, out: &Path, outputs: &mut Vec<String>) -> Result<i32> {
    let names: Vec<String> = c.observables.iter().map(|o| o.name.clone()).collect();
    let (rows, samples, escapes) = match c.averaging {
        Averaging::Ensemble => {
            let r = match run_ensemble(&c.run, &c.potential, &c.scheme, &c.observables) {
                Err(Error::EscapedEnsemble(st)) => {
                    eprintln!(
                        "all {} chains escaped; first escape at step {}, mean escape step {}",
                        st.n_chains, st.first_escape_step, st.mean_escape_step
                    );
                    return Err(Error::EscapedEnsemble(st));
                }
                other => other?,
            };
            if r.init_outside_threshold {
                eprintln!("warning: the initial state lies above the energy threshold");
            }
            (report::ensemble_rows(&r), r.samples, r.escape_count)
        }
        Averaging::Time => {
            let mut spec = c.run.clone();
            if spec.n_chains != 1 {
                return Err(Error::Config(format!(
                    "run.average = time uses a single chain, but run.n_chains = {}",
                    spec.n_chains
                )));
            }
            spec.record_samples = true;
            let r = ergodic_averages(&spec, &c.potential, &c.scheme, &c.observables)?;
            (report::ergodic_rows(&r), r.samples, 0)
        }
    };
    check_finite(
        "ensemble statistics",
        rows.iter().flat_map(|r| [r.mean, r.variance, r.ci95]),
    )?;
    report::write_samples(
        &out.join("samples.csv"),
        &SampleTable {
            observables: names,
            rows: samples,
        },
    )?;
    outputs.push("samples.csv".into());
    write(out, "ensemble.csv", &rows, report::ENSEMBLE_HEADER, outputs)?;
    println!("{:<24} {:>14} {:>14} {:>10}", "observable", "mean", "ci95", "n_eff");
    for r in &rows {
        println!(
            "{:<24} {:>14.6e} {:>14.6e} {:>10}",
            r.observable, r.mean, r.ci95, r.n_effective
        );
    }
    if let Some(r) = rows.first() {
        println!("rejection rate {:.6}, escapes {}", r.rejection_rate, escapes);
    }
    if escapes > 0 {
        eprintln!("{escapes} of {} chains escaped", c.run.n_chains);
        return Ok(EXIT_ESCAPE);
    }
    Ok(EXIT_OK)
}

fn grid(c: &ExperimentConfig) -> Result<Vec<f64>> {
    let g = c
        .analysis
        .delta_grid
        .clone()
        .ok_or_else(|| Error::Config("missing required key 'analysis.delta_grid'".into()))?;
    if g.len() < MIN_FIT_POINTS {
        return Err(Error::Config(format!(
            "analysis.delta_grid needs at least {MIN_FIT_POINTS} step sizes, got {}",
            g.len()
        )));
    }
    Ok(g)
}

fn write_curve(
    out: &Path,
    curve_file: &str,
    quantity: &str,
    r: &ErrorReport,
    outputs: &mut Vec<String>,
) -> Result<()> {
    let rows = report::error_rows(r);
    check_finite(
        "error curve",
        rows.iter().flat_map(|p| [p.estimate, p.reference, p.ci95]),
    )?;
    write(out, curve_file, &rows, report::ERROR_HEADER, outputs)?;
    let fits = [
        report::order_fit_row(quantity, &r.fit),
        report::order_fit_row("richardson", &r.richardson_fit),
    ];
    write(out, "order_fit.csv", &fits, report::ORDER_FIT_HEADER, outputs)?;
    write(
        out,
        "richardson.csv",
        &report::richardson_rows(r),
        report::RICHARDSON_HEADER,
        outputs,
    )?;
    println!(
        "{:>10} {:>8} {:>14} {:>14} {:>12}",
        "delta", "n_steps", "estimate", "error", "ci95"
    );
    for p in &rows {
        println!(
            "{:>10} {:>8} {:>14.6e} {:>14.6e} {:>12.4e}",
            p.delta, p.n_steps, p.estimate, p.error, p.ci95
        );
    }
    for f in &fits {
        match f.order {
            Some(o) => println!(
                "{}: order {o:.4}, coefficient {:.4e}, {} points",
                f.quantity,
                f.coefficient.unwrap_or(f64::NAN),
                f.points_used
            ),
            None => println!(
                "{}: insufficient signal ({} usable points)",
                f.quantity, f.points_used
            ),
        }
    }
    Ok(())
}

fn weak_error(c: &ExperimentConfig, out: &Path, outputs: &mut Vec<String>) -> Result<i32> {
    let g = grid(c)?;
    let f = &c.analysis.observable;
    let reference = match c.analysis.reference {
        Some(r) => r,
        None => {
            let linear = ReferenceSolution::AnalyticLinear;
            if linear.validate(f, &c.potential, &g).is_ok() {
                linear
            } else {
                ReferenceSolution::fine_step_for(&g)
            }
        }
    };
    let mut spec = c.run.clone();
    spec.record_samples = false;
    let r = weak_error_curve(f, c.analysis.t, &g, &spec, &c.potential, &c.scheme, &reference)
        .map_err(to_config)?;
    write_curve(out, "weak_error.csv", "weak_error", &r, outputs)?;
    Ok(EXIT_OK)
}

/// Precondition failures of the analysis layer are configuration errors.
fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    }
}

fn invariant_bias(c: &ExperimentConfig, out: &Path, outputs: &mut Vec<String>) -> Result<i32> {
    let g = grid(c)?;
    let f = &c.analysis.observable;
    let mut spec = c.run.clone();
    spec.n_chains = 1;
    spec.record_samples = false;
    if spec.burn_in >= spec.n_steps {
        return Err(Error::Config("run.burn_in must be below run.n_steps".into()));
    }
    let mu = match c.analysis.mu_reference {
        Some(v) => Estimate::exact(v),
        None => invariant_reference(f, &g, &spec, &c.potential, &c.scheme).map_err(to_config)?,
    };
    let r = invariant_bias_curve(f, &g, &spec, &c.potential, &c.scheme, mu).map_err(to_config)?;
    write_curve(out, "invariant_bias.csv", "invariant_bias", &r, outputs)?;
    Ok(EXIT_OK)
}

/// Default ladder: base energy plus a geometric range of excesses.
const DEFAULT_LADDER_EXCESS: &[f64] = &[0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 1000.0];

fn check_potential(c: &ExperimentConfig) -> Result<()> {
    let p = &c.potential;
    let energies = match &c.analysis.probe_energies {
        Some(e) => e.clone(),
        None => {
            let base = p.energy(&p.reference_configuration())?;
            DEFAULT_LADDER_EXCESS.iter().map(|e| base + e).collect()
        }
    };
    let rows = p
        .probe_ladder(&energies)
        .and_then(|probes| assumption_diagnostics(p, &probes));
    let rows = match rows {
        Ok(r) => r,
        Err(e) => {
            // informational command: report and carry on
            eprintln!("warning: {e}");
            Vec::new()
        }
    };
    println!(
        "{:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "U", "|grad U|^2", "|hess U|", "ratio", "lower", "upper"
    );
    for r in rows {
        println!(
            "{:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
            r.energy,
            r.grad_norm_sq,
            r.hessian_norm,
            r.hessian_ratio,
            r.lower_sandwich,
            r.upper_sandwich
        );
    }
    Ok(())
}

fn lyapunov_probe(c: &ExperimentConfig, out: &Path, outputs: &mut Vec<String>) -> Result<i32> {
    let l = c.lyapunov()?;
    let p = &c.potential;
    let probes: Vec<Vec<f64>> = match &l.probe_x {
        Some(xs) => xs.clone(),
        None => {
            let threshold = c.scheme.threshold();
            let energies: Vec<f64> = l.probe_fractions.iter().map(|f| f * threshold).collect();
            p.probe_ladder(&energies).map_err(to_config)?
        }
    };
    let mut rows = Vec::with_capacity(probes.len());
    for (i, x) in probes.into_iter().enumerate() {
        let state = State::at_rest(x).map_err(to_config)?;
        if state.dim() != p.dim() {
            return Err(Error::Config(format!(
                "probe {i} has dimension {}, expected {}",
                state.dim(),
                p.dim()
            )));
        }
        if !p.in_domain(&state.x) {
            return Err(Error::Config(format!("probe {i} lies outside the domain")));
        }
        let mut rng = derive_substream(c.run.master_seed, PROBE_LEVEL, i as u64);
        let d = lyapunov_drift_probe(&state, l.n_samples, &mut rng, p, &c.scheme, &l.params)
            .map_err(to_config)?;
        rows.push(LyapunovRow {
            probe: i,
            vb: d.v0,
            evb1: d.mean,
            ci95: d.ci_halfwidth,
            ratio: d.lower_ratio(),
        });
    }
    check_finite(
        "Lyapunov drift",
        rows.iter().flat_map(|r| [r.vb, r.evb1, r.ci95, r.ratio]),
    )?;
    write(out, "lyapunov_drift.csv", &rows, report::LYAPUNOV_HEADER, outputs)?;
    println!("{:>6} {:>14} {:>14} {:>12} {:>10}", "probe", "Vb", "E Vb1", "ci95", "ratio");
    for r in &rows {
        println!(
            "{:>6} {:>14.6e} {:>14.6e} {:>12.4e} {:>10.6}",
            r.probe, r.vb, r.evb1, r.ci95, r.ratio
        );
    }
    Ok(EXIT_OK)
}
