//! Weak-error curves, order fitting, Richardson extrapolation, invariant
//! measure bias and generator-based stationarity checks.

use crate::error::{Error, Result};
use crate::observables::{Observable, ObservableKind, Polynomial, Var};
use crate::potentials::{Potential, State};
use crate::rng::{derive_substream, GaussianSource};
use crate::sampler::{ergodic_average, run_ensemble, InitRule, Moments, RunSpec};
use crate::scheme::SchemeParams;

/// Refinement factor between the smallest tested step and a fine-step
/// reference.
pub const FINE_STEP_FACTOR: f64 = 16.0;

/// Stream level of fine-step reference runs, far from any grid index.
pub const REFERENCE_LEVEL: u64 = 1 << 32;

/// Minimum number of usable points for [`fit_order`].
pub const MIN_FIT_POINTS: usize = 3;

/// A value with its 95% half-width; exact values carry zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub ci: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, ci: 0.0 }
    }
}

/// `E[Z_t]` for `dX = Y dt, dY = (-k X - gamma Y) dt + noise`, applied
/// coordinatewise to `(x_i, y_i)`.
pub fn analytic_mean_linear(init: &State, t: f64, gamma: f64, stiffness: f64) -> Result<State> {
    if !(t >= 0.0 && gamma >= 0.0 && stiffness >= 0.0) || !(t.is_finite() && gamma.is_finite())
    {
        return Err(Error::invalid(format!(
            "need t, gamma, stiffness >= 0, got t = {t}, gamma = {gamma}, stiffness = {stiffness}"
        )));
    }
    let e = linear_propagator(t, gamma, stiffness);
    let (x, y) = init
        .x
        .iter()
        .zip(&init.y)
        .map(|(&x, &y)| (e[0][0] * x + e[0][1] * y, e[1][0] * x + e[1][1] * y))
        .unzip();
    State::new(x, y)
}

/// `exp(t M)` for `M = [[0, 1], [-k, -gamma]]`.
///
/// With `s = -gamma / 2` and `q^2 = gamma^2 / 4 - k`,
/// `exp(tM) = e^{st} (c I + S (M - s I))` where `(c, S)` is
/// `(cosh qt, sinh(qt)/q)`, `(cos qt, sin(qt)/q)` or `(1, t)`.
fn linear_propagator(t: f64, gamma: f64, k: f64) -> [[f64; 2]; 2] {
    let s = -0.5 * gamma;
    let disc = 0.25 * gamma * gamma - k;
    let q = disc.abs().sqrt();
    let (c, sh) = if q * t < 1e-8 {
        (1.0 + 0.5 * disc * t * t, t * (1.0 + disc * t * t / 6.0))
    } else if disc > 0.0 {
        ((q * t).cosh(), (q * t).sinh() / q)
    } else {
        ((q * t).cos(), (q * t).sin() / q)
    };
    let es = (s * t).exp();
    [
        [es * (c - s * sh), es * sh],
        [es * (-k * sh), es * (c + (-gamma - s) * sh)],
    ]
}

/// Exact `mu(f)` of the Gibbs measure for a quadratic potential: positions
/// are `N(0, 1/(beta k))`, velocities `N(0, 1/beta)`, all independent.
pub fn gibbs_mean_quadratic(f: &Observable, potential: &Potential, beta: f64) -> Result<f64> {
    let k = quadratic_stiffness(potential)?;
    let d = potential.dim() as f64;
    f.validate(potential.dim())?;
    let sx2 = 1.0 / (beta * k);
    let sy2 = 1.0 / beta;
    Ok(match &f.kind {
        ObservableKind::Hamiltonian => d / beta,
        ObservableKind::PotentialEnergy | ObservableKind::KineticEnergy => 0.5 * d / beta,
        ObservableKind::FirstCoordinate => 0.0,
        ObservableKind::ExpBH(b) => {
            if *b >= beta {
                return Err(Error::invalid(format!(
                    "E[exp(bH)] is infinite for b = {b} >= beta = {beta}"
                )));
            }
            (beta / (beta - b)).powf(d)
        }
        ObservableKind::Polynomial(p) => p
            .terms
            .iter()
            .map(|m| {
                m.coef
                    * m.powers
                        .iter()
                        .map(|(v, e)| {
                            let var = match v {
                                Var::X(_) => sx2,
                                Var::Y(_) => sy2,
                            };
                            gaussian_moment(var, *e)
                        })
                        .product::<f64>()
            })
            .sum(),
    })
}

/// `E[Z^p]` for `Z ~ N(0, var)`.
fn gaussian_moment(var: f64, p: u32) -> f64 {
    if p % 2 == 1 {
        return 0.0;
    }
    let double_factorial: f64 = (1..p).step_by(2).map(f64::from).product();
    double_factorial * var.powi(p as i32 / 2)
}

fn quadratic_stiffness(potential: &Potential) -> Result<f64> {
    potential.quadratic_stiffness().ok_or_else(|| {
        Error::invalid(format!(
            "{:?} potential is not quadratic; the dynamics are not linear",
            potential.kind()
        ))
    })
}

/// Independent draws from the Gibbs measure of a quadratic potential.
pub fn gibbs_samples_quadratic(
    potential: &Potential,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<State>> {
    let k = quadratic_stiffness(potential)?;
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let d = potential.dim();
    let (sx, sy) = ((1.0 / (beta * k)).sqrt(), (1.0 / beta).sqrt());
    let mut rng = derive_substream(seed, 0, 0);
    let mut g = vec![0.0; 2 * d];
    (0..n)
        .map(|_| {
            rng.fill_standard_normal(&mut g);
            State::new(
                g[..d].iter().map(|v| sx * v).collect(),
                g[d..].iter().map(|v| sy * v).collect(),
            )
        })
        .collect()
}

/// Target of a finite-time weak-error study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceSolution {
    /// Exact mean of the linear SDE; quadratic potentials and observables of
    /// degree at most one only.
    AnalyticLinear,
    /// Ensemble of the same scheme at a much smaller step.
    FineStep { delta_ref: f64 },
}

impl ReferenceSolution {
    /// Fine-step reference at `min(grid) / 16`.
    pub fn fine_step_for(grid: &[f64]) -> Self {
        let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
        ReferenceSolution::FineStep {
            delta_ref: min / FINE_STEP_FACTOR,
        }
    }

    pub fn validate(&self, f: &Observable, potential: &Potential, grid: &[f64]) -> Result<()> {
        match self {
            ReferenceSolution::AnalyticLinear => {
                quadratic_stiffness(potential)?;
                if f.constant_value().is_some() {
                    return Ok(());
                }
                match f.as_polynomial(potential.dim()) {
                    Some(p) if p.degree() <= 1 => Ok(()),
                    _ => Err(Error::invalid(format!(
                        "analytic-linear reference needs an observable of degree <= 1, got '{}'",
                        f.name
                    ))),
                }
            }
            ReferenceSolution::FineStep { delta_ref } => {
                let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
                if !(*delta_ref > 0.0) || *delta_ref > min / FINE_STEP_FACTOR * (1.0 + 1e-12) {
                    return Err(Error::invalid(format!(
                        "fine-step reference {delta_ref} must not exceed min(grid)/16 = {}",
                        min / FINE_STEP_FACTOR
                    )));
                }
                Ok(())
            }
        }
    }
}

/// One grid point of a bias curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorPoint {
    pub delta: f64,
    pub n_steps: usize,
    pub estimate: Estimate,
    pub reference: Estimate,
    pub error: f64,
    /// Quadrature sum of the estimate and reference half-widths.
    pub ci: f64,
}

impl ErrorPoint {
    fn new(delta: f64, n_steps: usize, estimate: Estimate, reference: Estimate) -> Self {
        ErrorPoint {
            delta,
            n_steps,
            estimate,
            reference,
            error: estimate.value - reference.value,
            ci: estimate.ci.hypot(reference.ci),
        }
    }
}

/// Least-squares fit of `log|e| = log|C1| + order log delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderFit {
    pub order: f64,
    pub c1: f64,
    /// Standard error of the slope; zero for an exact fit or two points.
    pub order_stderr: f64,
    pub points_used: usize,
    pub dropped: usize,
}

/// Richardson combination of the grid points at `delta` and `delta / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RichardsonPoint {
    pub delta: f64,
    pub combined: f64,
    pub error: f64,
    pub ci: f64,
    /// Raw error and half-width at `delta`.
    pub raw_error: f64,
    pub raw_ci: f64,
}

/// Bias curve with its order fits.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub observable: String,
    pub points: Vec<ErrorPoint>,
    /// `Err` holds the reason the fit was not possible.
    pub fit: std::result::Result<OrderFit, FitFailure>,
    pub richardson: Vec<RichardsonPoint>,
    pub richardson_fit: std::result::Result<OrderFit, FitFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FitFailure {
    pub usable: usize,
    pub required: usize,
}

fn fit_or_failure(points: &[(f64, f64, f64)]) -> std::result::Result<OrderFit, FitFailure> {
    match fit_order(points) {
        Ok(f) => Ok(f),
        Err(Error::InsufficientSignal { usable, required }) => {
            Err(FitFailure { usable, required })
        }
        Err(_) => Err(FitFailure {
            usable: 0,
            required: MIN_FIT_POINTS,
        }),
    }
}

impl ErrorReport {
    fn assemble(observable: String, points: Vec<ErrorPoint>) -> Self {
        let fit = fit_or_failure(
            &points
                .iter()
                .map(|p| (p.delta, p.error, p.ci))
                .collect::<Vec<_>>(),
        );
        let richardson = richardson_pairs(&points);
        let richardson_fit = fit_or_failure(
            &richardson
                .iter()
                .map(|p| (p.delta, p.error, p.ci))
                .collect::<Vec<_>>(),
        );
        ErrorReport {
            observable,
            points,
            fit,
            richardson,
            richardson_fit,
        }
    }
}

/// Fits `|error| ~ C delta^order` through the points `(delta, error, ci)`
/// whose error exceeds its half-width. `C1` carries the sign of the error at
/// the smallest usable step.
pub fn fit_order(points: &[(f64, f64, f64)]) -> Result<OrderFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(d, e, ci)| *d > 0.0 && e.is_finite() && e.abs() > *ci && *e != 0.0)
        .map(|&(d, e, _)| (d, e))
        .collect();
    if usable.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientSignal {
            usable: usable.len(),
            required: MIN_FIT_POINTS,
        });
    }
    let n = usable.len() as f64;
    let lx: Vec<f64> = usable.iter().map(|(d, _)| d.ln()).collect();
    let ly: Vec<f64> = usable.iter().map(|(_, e)| e.abs().ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("order fit needs at least two distinct step sizes"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let order_stderr = if usable.len() > 2 {
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    let smallest = usable
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, e)| *e)
        .unwrap_or(1.0);
    Ok(OrderFit {
        order: slope,
        c1: smallest.signum() * intercept.exp(),
        order_stderr,
        points_used: usable.len(),
        dropped: points.len() - usable.len(),
    })
}

/// `2 A(delta/2) - A(delta)`.
pub fn richardson(estimate_at_delta: f64, estimate_at_half_delta: f64) -> f64 {
    2.0 * estimate_at_half_delta - estimate_at_delta
}

/// Richardson combinations of every grid pair `(delta, delta / 2)`.
pub fn richardson_pairs(points: &[ErrorPoint]) -> Vec<RichardsonPoint> {
    let mut out = Vec::new();
    for coarse in points {
        let Some(fine) = points
            .iter()
            .find(|p| ((2.0 * p.delta - coarse.delta) / coarse.delta).abs() < 1e-9)
        else {
            continue;
        };
        let combined = richardson(coarse.estimate.value, fine.estimate.value);
        // the reference enters the combined error with weight 2 - 1 = 1
        let reference = coarse.reference.value;
        let ci = ((2.0 * fine.estimate.ci).powi(2)
            + coarse.estimate.ci.powi(2)
            + coarse.reference.ci.powi(2))
        .sqrt();
        out.push(RichardsonPoint {
            delta: coarse.delta,
            combined,
            error: combined - reference,
            ci,
            raw_error: coarse.error,
            raw_ci: coarse.ci,
        });
    }
    out
}

/// Number of steps `t / delta`, which must be an integer.
pub fn steps_for(t: f64, delta: f64) -> Result<usize> {
    let n = (t / delta).round();
    if !(t > 0.0) || !(delta > 0.0) || n < 1.0 || (n * delta - t).abs() > 1e-9 * t {
        return Err(Error::invalid(format!(
            "t = {t} is not an integer multiple of delta = {delta}"
        )));
    }
    Ok(n as usize)
}

/// Checks the step grid is non-empty and strictly decreasing.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty step-size grid"));
    }
    if grid.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Error::invalid("step sizes must be positive and finite"));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("step-size grid must be strictly decreasing"));
    }
    Ok(())
}

fn ensemble_mean(
    f: &Observable,
    t: f64,
    delta: f64,
    level: u64,
    spec: &RunSpec,
    potential: &Potential,
    base: &SchemeParams,
) -> Result<Estimate> {
    let params = base.with_delta(delta)?;
    let mut s = spec.clone();
    s.n_steps = steps_for(t, delta)?;
    s.burn_in = 0;
    s.stream_level = level;
    s.record_samples = false;
    let r = run_ensemble(&s, potential, &params, std::slice::from_ref(f))?;
    Ok(Estimate {
        value: r.stats[0].mean,
        ci: r.stats[0].ci_halfwidth,
    })
}

/// Value of `E[f(Z_t)]` under the reference solution.
pub fn reference_value(
    f: &Observable,
    t: f64,
    spec: &RunSpec,
    potential: &Potential,
    base: &SchemeParams,
    reference: &ReferenceSolution,
) -> Result<Estimate> {
    if let Some(c) = f.constant_value() {
        return Ok(Estimate::exact(c));
    }
    match reference {
        ReferenceSolution::AnalyticLinear => {
            let k = quadratic_stiffness(potential)?;
            // the mean is linear in the initial state, so a symmetric cloud
            // contributes through its centre only
            let init = match &spec.init {
                InitRule::Fixed(s) => s,
                InitRule::GaussianCloud { center, .. } => center,
            };
            let mean = analytic_mean_linear(init, t, base.gamma(), k)?;
            let p = f.as_polynomial(potential.dim()).ok_or_else(|| {
                Error::invalid(format!("'{}' has no polynomial form", f.name))
            })?;
            Ok(Estimate::exact(p.eval(&mean.x, &mean.y)))
        }
        ReferenceSolution::FineStep { delta_ref } => {
            ensemble_mean(f, t, *delta_ref, REFERENCE_LEVEL, spec, potential, base)
        }
    }
}

/// `E[f(Z_n)] - E[f(Z_t)]` at `n = t / delta` over the grid. Each grid
/// level draws from its own family of chain streams.
pub fn weak_error_curve(
    f: &Observable,
    t: f64,
    delta_grid: &[f64],
    spec: &RunSpec,
    potential: &Potential,
    base: &SchemeParams,
    reference: &ReferenceSolution,
) -> Result<ErrorReport> {
    validate_grid(delta_grid)?;
    for d in delta_grid {
        steps_for(t, *d)?;
        base.with_delta(*d)?;
    }
    reference.validate(f, potential, delta_grid)?;
    f.validate(potential.dim())?;
    let refv = reference_value(f, t, spec, potential, base, reference)?;
    let mut points = Vec::with_capacity(delta_grid.len());
    for (i, &delta) in delta_grid.iter().enumerate() {
        let est = ensemble_mean(f, t, delta, i as u64, spec, potential, base)?;
        log::info!("delta = {delta}: estimate {} +- {}", est.value, est.ci);
        points.push(ErrorPoint::new(delta, steps_for(t, delta)?, est, refv));
    }
    Ok(ErrorReport::assemble(f.name.clone(), points))
}

/// Long-run average of `f` under the scheme at step `delta`.
pub fn invariant_estimate(
    f: &Observable,
    delta: f64,
    level: u64,
    spec: &RunSpec,
    potential: &Potential,
    base: &SchemeParams,
) -> Result<Estimate> {
    let mut s = spec.clone();
    s.n_chains = 1;
    s.stream_level = level;
    let (value, ci) = ergodic_average(&s, potential, &base.with_delta(delta)?, f)?;
    Ok(Estimate { value, ci })
}

/// `mu(f)` for the curve: exact for quadratic potentials, otherwise a long
/// run at `min(grid) / 16` with the same run length, which makes the
/// reference self-referencing.
pub fn invariant_reference(
    f: &Observable,
    delta_grid: &[f64],
    spec: &RunSpec,
    potential: &Potential,
    base: &SchemeParams,
) -> Result<Estimate> {
    if let Some(c) = f.constant_value() {
        return Ok(Estimate::exact(c));
    }
    if potential.quadratic_stiffness().is_some() {
        return gibbs_mean_quadratic(f, potential, base.beta()).map(Estimate::exact);
    }
    let ReferenceSolution::FineStep { delta_ref } = ReferenceSolution::fine_step_for(delta_grid)
    else {
        unreachable!()
    };
    invariant_estimate(f, delta_ref, REFERENCE_LEVEL, spec, potential, base)
}

/// `mu_delta(f) - mu(f)` over the grid from single long chains.
pub fn invariant_bias_curve(
    f: &Observable,
    delta_grid: &[f64],
    spec: &RunSpec,
    potential: &Potential,
    base: &SchemeParams,
    mu_reference: Estimate,
) -> Result<ErrorReport> {
    validate_grid(delta_grid)?;
    for d in delta_grid {
        base.with_delta(*d)?;
    }
    f.validate(potential.dim())?;
    let mut points = Vec::with_capacity(delta_grid.len());
    for (i, &delta) in delta_grid.iter().enumerate() {
        let est = invariant_estimate(f, delta, i as u64, spec, potential, base)?;
        log::info!("delta = {delta}: long-run average {} +- {}", est.value, est.ci);
        points.push(ErrorPoint::new(delta, spec.n_steps, est, mu_reference));
    }
    Ok(ErrorReport::assemble(f.name.clone(), points))
}

/// `Lf = y . grad_x f - (grad U + gamma y) . grad_y f + (gamma / beta) lap_y f`
/// for a polynomial observable.
pub fn apply_generator(
    f: &Observable,
    state: &State,
    potential: &Potential,
    params: &SchemeParams,
) -> Result<f64> {
    let d = potential.dim();
    if state.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: state.dim(),
        });
    }
    if f.constant_value().is_some() {
        potential.gradient(&state.x)?;
        return Ok(0.0);
    }
    let p = f.as_polynomial(d).ok_or_else(|| {
        Error::invalid(format!(
            "observable '{}' has no registered derivatives",
            f.name
        ))
    })?;
    let grad = potential.gradient(&state.x)?;
    Ok(generator_polynomial(&p, state, &grad, params))
}

fn generator_polynomial(p: &Polynomial, s: &State, grad: &[f64], params: &SchemeParams) -> f64 {
    let (gamma, beta) = (params.gamma(), params.beta());
    let mut out = 0.0;
    for i in 0..s.dim() {
        let dx = p.partial(Var::X(i));
        let dy = p.partial(Var::Y(i));
        let dyy = dy.partial(Var::Y(i));
        out += s.y[i] * dx.eval(&s.x, &s.y) - (grad[i] + gamma * s.y[i]) * dy.eval(&s.x, &s.y)
            + gamma / beta * dyy.eval(&s.x, &s.y);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorCheckReport {
    pub observable: String,
    pub estimate: f64,
    pub ci: f64,
    /// `|estimate| <= 3 ci`.
    pub pass: bool,
}

/// Sample mean of `Lf` over (approximate) Gibbs samples; zero mean is the
/// stationarity condition.
pub fn stationarity_check(
    f: &Observable,
    gibbs_samples: &[State],
    potential: &Potential,
    params: &SchemeParams,
) -> Result<GeneratorCheckReport> {
    if gibbs_samples.is_empty() {
        return Err(Error::invalid("stationarity check needs at least one sample"));
    }
    let mut m = Moments::default();
    for s in gibbs_samples {
        m.push(apply_generator(f, s, potential, params)?);
    }
    let ci = m.ci95();
    Ok(GeneratorCheckReport {
        observable: f.name.clone(),
        estimate: m.mean,
        ci,
        pass: m.mean.abs() <= 3.0 * ci,
    })
}
