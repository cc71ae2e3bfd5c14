//! One-step maps of the symplectic Euler-Maruyama discretisation of
//!
//! ```text
//! dX = Y dt,   dY = -grad U(X) dt - gamma Y dt + sqrt(2 gamma / beta) dB
//! ```
//!
//! and of its energy-thresholded ("stopped") variant, which only accepts a
//! proposal whose energy stays below `delta^(-l)`.
//!
//! The proposal map is
//!
//! ```text
//! y' = y - delta grad U(x) - delta gamma y + sqrt(2 gamma delta / beta) g
//! x' = x + delta y'
//! ```

use crate::error::{Error, Result};
use crate::potentials::{norm_sq, Potential, State};
use crate::rng::GaussianSource;

pub const DEFAULT_THRESHOLD_EXPONENT: f64 = 0.1;
pub const MAX_THRESHOLD_EXPONENT: f64 = 0.5;

/// Half-width multiplier of a two-sided 95% normal confidence interval.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Step size, friction, inverse temperature and threshold exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeParams {
    delta: f64,
    gamma: f64,
    beta: f64,
    l: f64,
}

impl SchemeParams {
    pub fn new(delta: f64, gamma: f64, beta: f64, l: f64) -> Result<Self> {
        for (name, v) in [("delta", delta), ("gamma", gamma), ("beta", beta), ("l", l)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if l > MAX_THRESHOLD_EXPONENT {
            return Err(Error::invalid(format!(
                "threshold exponent l = {l} exceeds {MAX_THRESHOLD_EXPONENT}"
            )));
        }
        if delta * gamma >= 1.0 {
            return Err(Error::invalid(format!(
                "delta * gamma = {} must be below 1",
                delta * gamma
            )));
        }
        Ok(SchemeParams {
            delta,
            gamma,
            beta,
            l,
        })
    }

    /// `gamma = 0`: the deterministic symplectic Euler map plus the energy
    /// threshold. Noise vanishes with the friction.
    pub fn frictionless(delta: f64, beta: f64, l: f64) -> Result<Self> {
        let mut p = SchemeParams::new(delta, 1.0, beta, l)?;
        p.gamma = 0.0;
        Ok(p)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn l(&self) -> f64 {
        self.l
    }

    /// Same friction, temperature and exponent with another step size.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        SchemeParams::new(delta, self.gamma, self.beta, self.l)
    }

    /// `sqrt(2 gamma delta / beta)`
    pub fn noise_scale(&self) -> f64 {
        (2.0 * self.gamma * self.delta / self.beta).sqrt()
    }

    /// Energy ceiling `delta^(-l)`.
    pub fn threshold(&self) -> f64 {
        self.delta.powf(-self.l)
    }
}

pub fn threshold(params: &SchemeParams) -> f64 {
    params.threshold()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchemeKind {
    #[default]
    Stopped,
    Unstopped,
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stopped" => Ok(SchemeKind::Stopped),
            "unstopped" => Ok(SchemeKind::Unstopped),
            other => Err(Error::invalid(format!("unknown scheme kind '{other}'"))),
        }
    }
}

/// Result of one stopped step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: State,
    pub accepted: bool,
}

/// Result of one unstopped step.
#[derive(Debug, Clone, PartialEq)]
pub enum UnstoppedOutcome {
    Moved(State),
    /// The proposal left the domain; carries the state before the step.
    Escaped { pre_step: State },
}

/// Writes the proposal `E_delta(x, y, g)` into `x_out`, `y_out`.
#[inline]
pub(crate) fn propose_into(
    x: &[f64],
    y: &[f64],
    grad: &[f64],
    g: &[f64],
    params: &SchemeParams,
    x_out: &mut [f64],
    y_out: &mut [f64],
) {
    let dt = params.delta;
    let friction = dt * params.gamma;
    let sigma = params.noise_scale();
    for i in 0..x.len() {
        let yn = y[i] - dt * grad[i] - friction * y[i] + sigma * g[i];
        y_out[i] = yn;
        x_out[i] = x[i] + dt * yn;
    }
}

fn check_state(state: &State, potential: &Potential) -> Result<()> {
    if state.x.len() != potential.dim() || state.y.len() != potential.dim() {
        return Err(Error::DimensionMismatch {
            expected: potential.dim(),
            got: state.x.len().max(state.y.len()),
        });
    }
    Ok(())
}

/// Proposal `E_delta(x, y, g)`; a pure function of its inputs.
pub fn propose(
    state: &State,
    gaussian: &[f64],
    potential: &Potential,
    params: &SchemeParams,
) -> Result<State> {
    check_state(state, potential)?;
    if gaussian.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: gaussian.len(),
        });
    }
    let grad = potential.gradient(&state.x)?;
    let d = state.dim();
    let (mut x, mut y) = (vec![0.0; d], vec![0.0; d]);
    propose_into(&state.x, &state.y, &grad, gaussian, params, &mut x, &mut y);
    Ok(State { x, y })
}

/// One step of the stopped scheme. Consumes exactly `d` draws.
pub fn step_stopped<G: GaussianSource + ?Sized>(
    state: &State,
    rng: &mut G,
    potential: &Potential,
    params: &SchemeParams,
) -> Result<StepOutcome> {
    check_state(state, potential)?;
    let mut g = vec![0.0; state.dim()];
    rng.fill_standard_normal(&mut g);
    let proposal = propose(state, &g, potential, params)?;
    let h = potential.energy_unchecked(&proposal.x) + 0.5 * norm_sq(&proposal.y);
    if h <= params.threshold() {
        Ok(StepOutcome {
            state: proposal,
            accepted: true,
        })
    } else {
        Ok(StepOutcome {
            state: state.clone(),
            accepted: false,
        })
    }
}

/// One step of the unstopped scheme. Consumes exactly `d` draws.
pub fn step_unstopped<G: GaussianSource + ?Sized>(
    state: &State,
    rng: &mut G,
    potential: &Potential,
    params: &SchemeParams,
) -> Result<UnstoppedOutcome> {
    check_state(state, potential)?;
    let mut g = vec![0.0; state.dim()];
    rng.fill_standard_normal(&mut g);
    let proposal = propose(state, &g, potential, params)?;
    let u = potential.energy_unchecked(&proposal.x);
    if escaped(u, &proposal.y) {
        Ok(UnstoppedOutcome::Escaped {
            pre_step: state.clone(),
        })
    } else {
        Ok(UnstoppedOutcome::Moved(proposal))
    }
}

#[inline]
fn escaped(u: f64, y: &[f64]) -> bool {
    !u.is_finite() || y.iter().any(|v| !v.is_finite())
}

/// What happened during one in-place step of a [`Chain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    Accepted,
    Rejected,
    Escaped,
}

/// Allocation-free chain state used by the samplers.
///
/// Caches `U(x)` and `grad U(x)` of the current position; a rejected step
/// leaves every field bitwise unchanged.
#[derive(Debug, Clone)]
pub struct Chain<'a> {
    potential: &'a Potential,
    params: SchemeParams,
    kind: SchemeKind,
    threshold: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    grad: Vec<f64>,
    energy: f64,
    gauss: Vec<f64>,
    x_new: Vec<f64>,
    y_new: Vec<f64>,
    grad_new: Vec<f64>,
}

impl<'a> Chain<'a> {
    pub fn new(
        potential: &'a Potential,
        params: SchemeParams,
        kind: SchemeKind,
        init: &State,
    ) -> Result<Self> {
        check_state(init, potential)?;
        let d = init.dim();
        let mut grad = vec![0.0; d];
        let energy = potential.energy_and_gradient(&init.x, &mut grad);
        if !energy.is_finite() {
            return Err(Error::domain("chain initialised outside the domain"));
        }
        Ok(Chain {
            potential,
            params,
            kind,
            threshold: params.threshold(),
            x: init.x.clone(),
            y: init.y.clone(),
            grad,
            energy,
            gauss: vec![0.0; d],
            x_new: vec![0.0; d],
            y_new: vec![0.0; d],
            grad_new: vec![0.0; d],
        })
    }

    pub fn step<G: GaussianSource + ?Sized>(&mut self, rng: &mut G) -> StepEvent {
        rng.fill_standard_normal(&mut self.gauss);
        propose_into(
            &self.x,
            &self.y,
            &self.grad,
            &self.gauss,
            &self.params,
            &mut self.x_new,
            &mut self.y_new,
        );
        let u = self
            .potential
            .energy_and_gradient(&self.x_new, &mut self.grad_new);
        match self.kind {
            SchemeKind::Stopped => {
                let h = u + 0.5 * norm_sq(&self.y_new);
                if h <= self.threshold {
                    self.commit(u);
                    StepEvent::Accepted
                } else {
                    StepEvent::Rejected
                }
            }
            SchemeKind::Unstopped => {
                if escaped(u, &self.y_new) {
                    StepEvent::Escaped
                } else {
                    self.commit(u);
                    StepEvent::Accepted
                }
            }
        }
    }

    fn commit(&mut self, u: f64) {
        std::mem::swap(&mut self.x, &mut self.x_new);
        std::mem::swap(&mut self.y, &mut self.y_new);
        std::mem::swap(&mut self.grad, &mut self.grad_new);
        self.energy = u;
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn potential_energy(&self) -> f64 {
        self.energy
    }
    pub fn hamiltonian(&self) -> f64 {
        self.energy + 0.5 * norm_sq(&self.y)
    }
    pub fn state(&self) -> State {
        State {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }
}

/// Parameters of the exponential Lyapunov function
///
/// ```text
/// V_b(x, y) = exp(b (H(x, y) + zeta h(U(x)) y . grad U(x) / (1 + |grad U(x)|^2)))
/// ```
///
/// with `zeta = 4 d gamma / beta` and `h` a smooth cutoff rising from 0 at
/// `U = r1` to 1 at `U = r2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovParams {
    b: f64,
    zeta: f64,
    r1: f64,
    r2: f64,
}

pub const DEFAULT_CUTOFF_R1: f64 = 10.0;
pub const DEFAULT_CUTOFF_R2: f64 = 20.0;

impl LyapunovParams {
    pub fn new(b: f64, r1: f64, r2: f64, dim: usize, params: &SchemeParams) -> Result<Self> {
        if !(b > 0.0 && b < params.beta()) {
            return Err(Error::invalid(format!(
                "Lyapunov exponent b = {b} must lie in (0, beta = {})",
                params.beta()
            )));
        }
        if !(r1 > 0.0 && r1 < r2 && r2.is_finite()) {
            return Err(Error::invalid(format!(
                "cutoff radii must satisfy 0 < r1 < r2, got {r1}, {r2}"
            )));
        }
        Ok(LyapunovParams {
            b,
            zeta: 4.0 * dim as f64 * params.gamma() / params.beta(),
            r1,
            r2,
        })
    }

    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn zeta(&self) -> f64 {
        self.zeta
    }
    pub fn r1(&self) -> f64 {
        self.r1
    }
    pub fn r2(&self) -> f64 {
        self.r2
    }

    pub fn cutoff(&self, theta: f64) -> f64 {
        smoothstep((theta - self.r1) / (self.r2 - self.r1))
    }
}

/// `6u^5 - 15u^4 + 10u^3` on `[0, 1]`, clamped outside.
pub fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (u * (6.0 * u - 15.0) + 10.0)
}

/// `log V_b` evaluated from a cached energy and gradient.
fn log_lyapunov_raw(u: f64, grad: &[f64], y: &[f64], lyap: &LyapunovParams) -> f64 {
    let h = u + 0.5 * norm_sq(y);
    let cut = lyap.cutoff(u);
    let correction = if cut == 0.0 {
        0.0
    } else {
        let dot: f64 = y.iter().zip(grad).map(|(a, b)| a * b).sum();
        lyap.zeta * cut * dot / (1.0 + norm_sq(grad))
    };
    lyap.b * (h + correction)
}

/// `log V_b(x, y)`.
pub fn log_lyapunov(state: &State, potential: &Potential, lyap: &LyapunovParams) -> Result<f64> {
    check_state(state, potential)?;
    let grad = potential.gradient(&state.x)?;
    let u = potential.energy_unchecked(&state.x);
    Ok(log_lyapunov_raw(u, &grad, &state.y, lyap))
}

/// `V_b(x, y)`.
pub fn lyapunov(
    state: &State,
    potential: &Potential,
    _params: &SchemeParams,
    lyap: &LyapunovParams,
) -> Result<f64> {
    Ok(log_lyapunov(state, potential, lyap)?.exp())
}

/// Monte Carlo estimate of `E[V_b(Z_1)]` after one stopped step from `state`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftProbe {
    /// `V_b` at the probe state.
    pub v0: f64,
    pub mean: f64,
    /// 95% normal-approximation half-width.
    pub ci_halfwidth: f64,
}

impl DriftProbe {
    /// `(E V_b(Z_1) - ci) / V_b(z)`
    pub fn lower_ratio(&self) -> f64 {
        (self.mean - self.ci_halfwidth) / self.v0
    }

    /// Contraction established beyond the confidence interval.
    pub fn contracts(&self) -> bool {
        self.mean + self.ci_halfwidth < self.v0
    }
}

pub fn lyapunov_drift_probe<G: GaussianSource + ?Sized>(
    state: &State,
    n_samples: usize,
    rng: &mut G,
    potential: &Potential,
    params: &SchemeParams,
    lyap: &LyapunovParams,
) -> Result<DriftProbe> {
    if n_samples < 2 {
        return Err(Error::invalid(format!(
            "drift probe needs at least 2 samples, got {n_samples}"
        )));
    }
    let h0 = potential.hamiltonian(state)?;
    if !(h0 <= params.threshold()) {
        return Err(Error::invalid(format!(
            "probe energy {h0} lies above the threshold {}",
            params.threshold()
        )));
    }
    let log_v0 = log_lyapunov(state, potential, lyap)?;
    // accumulate V_1 / V_0 to stay in range, rescale at the end
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..n_samples {
        let mut chain = Chain::new(potential, *params, SchemeKind::Stopped, state)?;
        chain.step(rng);
        let log_v1 = log_lyapunov_raw(chain.energy, &chain.grad, &chain.y, lyap);
        let r = (log_v1 - log_v0).exp();
        let delta = r - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (r - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    let v0 = log_v0.exp();
    Ok(DriftProbe {
        v0,
        mean: mean * v0,
        ci_halfwidth: Z95 * (var / n_samples as f64).sqrt() * v0,
    })
}
