//! Potentials, phase-space states and the Hamiltonian.
//!
//! Every potential maps `R^d` to `[0, +inf]`. The domain `D` is the set where
//! the energy is finite; evaluating outside of it yields `f64::INFINITY`,
//! never a finite garbage value. Gradients are analytic.
//!
//! The Lennard-Jones potential is the confined pair sum
//!
//! ```text
//! U(x) = sum_i k/2 |x_i|^2 + sum_{i<j} [ 4 eps ((s/r_ij)^12 - (s/r_ij)^6) + eps ]
//! ```
//!
//! where the `+ eps` shift makes every pair term non-negative without
//! changing the force field.

use crate::error::{Error, Result};

/// Central finite-difference step used for Hessian entries.
pub const HESSIAN_FD_STEP: f64 = 1e-4;

/// Point in phase space: positions `x` and velocities `y`, both of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl State {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        Ok(State { x, y })
    }

    /// State with zero velocity.
    pub fn at_rest(x: Vec<f64>) -> Result<Self> {
        let y = vec![0.0; x.len()];
        State::new(x, y)
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * norm_sq(&self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    Harmonic,
    DoubleWell,
    LennardJonesConfined,
    Composite,
}

/// Confined Lennard-Jones cluster of `n_particles` in `space_dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct LennardJones {
    pub n_particles: usize,
    pub space_dim: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub confinement_stiffness: f64,
}

impl LennardJones {
    pub fn new(
        n_particles: usize,
        space_dim: usize,
        epsilon: f64,
        sigma: f64,
        confinement_stiffness: f64,
    ) -> Result<Self> {
        if n_particles == 0 || space_dim == 0 {
            return Err(Error::invalid(
                "Lennard-Jones needs at least one particle and one spatial dimension",
            ));
        }
        for (name, v) in [
            ("lj_epsilon", epsilon),
            ("lj_sigma", sigma),
            ("confinement_stiffness", confinement_stiffness),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(LennardJones {
            n_particles,
            space_dim,
            epsilon,
            sigma,
            confinement_stiffness,
        })
    }

    /// Shifted pair energy at squared distance `r2`; infinite at coincidence.
    pub fn pair_energy(&self, r2: f64) -> f64 {
        if r2 == 0.0 {
            return f64::INFINITY;
        }
        let s2 = self.sigma * self.sigma / r2;
        let s6 = s2 * s2 * s2;
        let s12 = s6 * s6;
        if !s12.is_finite() {
            return f64::INFINITY;
        }
        4.0 * self.epsilon * (s12 - s6) + self.epsilon
    }

    /// Distance of the pair minimum, `2^(1/6) sigma`.
    pub fn pair_minimum_distance(&self) -> f64 {
        2f64.powf(1.0 / 6.0) * self.sigma
    }

    fn accumulate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.confinement_stiffness;
        let mut energy = 0.0;
        for (xi, gi) in x.iter().zip(grad.iter_mut()) {
            energy += 0.5 * k * xi * xi;
            *gi += k * xi;
        }
        let sd = self.space_dim;
        for i in 0..self.n_particles {
            for j in (i + 1)..self.n_particles {
                let (pi, pj) = (&x[i * sd..(i + 1) * sd], &x[j * sd..(j + 1) * sd]);
                let r2: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
                let pair = self.pair_energy(r2);
                if pair == f64::INFINITY {
                    return f64::INFINITY;
                }
                energy += pair;
                let s2 = self.sigma * self.sigma / r2;
                let s6 = s2 * s2 * s2;
                // (1/r) dV/dr
                let coef = 4.0 * self.epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r2;
                for c in 0..sd {
                    let f = coef * (x[i * sd + c] - x[j * sd + c]);
                    grad[i * sd + c] += f;
                    grad[j * sd + c] -= f;
                }
            }
        }
        energy
    }

    /// Pair-interaction part only (no confinement).
    pub fn pair_sum(&self, x: &[f64]) -> f64 {
        let sd = self.space_dim;
        let mut total = 0.0;
        for i in 0..self.n_particles {
            for j in (i + 1)..self.n_particles {
                let r2: f64 = (0..sd)
                    .map(|c| {
                        let d = x[i * sd + c] - x[j * sd + c];
                        d * d
                    })
                    .sum();
                total += self.pair_energy(r2);
            }
        }
        total
    }
}

/// A potential energy `U: R^d -> [0, +inf]` with analytic gradient.
///
/// Immutable after construction and safe to share between threads.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    /// `k/2 |x|^2`.
    Harmonic { dim: usize, stiffness: f64 },
    /// `h sum_i (x_i^2 - 1)^2`.
    DoubleWell { dim: usize, barrier: f64 },
    LennardJonesConfined(LennardJones),
    /// Sum of components sharing one dimension.
    Composite(Vec<Potential>),
}

/// Exponents `(eta_0, eta_inf)` of the two-sided gradient growth bound
/// `c U^(2 - 2/eta_inf) + d <= |grad U|^2 <= c' U^(2 + 2/eta_0) + d'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthExponents {
    pub eta_0: f64,
    pub eta_inf: f64,
}

/// Straight line used to build probe ladders: `base + t * direction`,
/// `0 <= t < t_max`, along which the energy increases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRay {
    pub base: Vec<f64>,
    pub direction: Vec<f64>,
    pub t_max: Option<f64>,
}

impl Potential {
    pub fn harmonic(dim: usize, stiffness: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !(stiffness.is_finite() && stiffness > 0.0) {
            return Err(Error::invalid(format!(
                "stiffness must be positive, got {stiffness}"
            )));
        }
        Ok(Potential::Harmonic { dim, stiffness })
    }

    pub fn double_well(dim: usize, barrier: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if !(barrier.is_finite() && barrier > 0.0) {
            return Err(Error::invalid(format!("barrier must be positive, got {barrier}")));
        }
        Ok(Potential::DoubleWell { dim, barrier })
    }

    pub fn lennard_jones(lj: LennardJones) -> Self {
        Potential::LennardJonesConfined(lj)
    }

    /// Lennard-Jones cluster with unit well depth and length scale and unit
    /// quadratic confinement.
    pub fn lennard_jones_default(n_particles: usize, space_dim: usize) -> Result<Self> {
        Ok(Potential::LennardJonesConfined(LennardJones::new(
            n_particles,
            space_dim,
            1.0,
            1.0,
            1.0,
        )?))
    }

    pub fn composite(parts: Vec<Potential>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("composite potential needs at least one part"))?;
        let dim = first.dim();
        if let Some(bad) = parts.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Potential::Composite(parts))
    }

    pub fn kind(&self) -> PotentialKind {
        match self {
            Potential::Harmonic { .. } => PotentialKind::Harmonic,
            Potential::DoubleWell { .. } => PotentialKind::DoubleWell,
            Potential::LennardJonesConfined(_) => PotentialKind::LennardJonesConfined,
            Potential::Composite(_) => PotentialKind::Composite,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Potential::Harmonic { dim, .. } | Potential::DoubleWell { dim, .. } => *dim,
            Potential::LennardJonesConfined(lj) => lj.n_particles * lj.space_dim,
            Potential::Composite(parts) => parts[0].dim(),
        }
    }

    /// Named scalar parameters, for reports.
    pub fn params(&self) -> Vec<(String, f64)> {
        match self {
            Potential::Harmonic { dim, stiffness } => vec![
                ("dim".into(), *dim as f64),
                ("stiffness".into(), *stiffness),
            ],
            Potential::DoubleWell { dim, barrier } => {
                vec![("dim".into(), *dim as f64), ("barrier".into(), *barrier)]
            }
            Potential::LennardJonesConfined(lj) => vec![
                ("n_particles".into(), lj.n_particles as f64),
                ("space_dim".into(), lj.space_dim as f64),
                ("lj_epsilon".into(), lj.epsilon),
                ("lj_sigma".into(), lj.sigma),
                ("confinement_stiffness".into(), lj.confinement_stiffness),
            ],
            Potential::Composite(parts) => parts
                .iter()
                .enumerate()
                .flat_map(|(i, p)| {
                    p.params()
                        .into_iter()
                        .map(move |(k, v)| (format!("part{i}.{k}"), v))
                })
                .collect(),
        }
    }

    /// Isotropic stiffness when the potential is exactly quadratic.
    pub fn quadratic_stiffness(&self) -> Option<f64> {
        match self {
            Potential::Harmonic { stiffness, .. } => Some(*stiffness),
            Potential::Composite(parts) => parts
                .iter()
                .map(Potential::quadratic_stiffness)
                .sum::<Option<f64>>(),
            _ => None,
        }
    }

    /// Adds `grad U(x)` into `grad` and returns `U(x)`.
    ///
    /// No dimension checks. When the returned energy is infinite the content
    /// of `grad` is unspecified.
    pub fn accumulate(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Potential::Harmonic { stiffness, .. } => {
                let mut e = 0.0;
                for (xi, gi) in x.iter().zip(grad.iter_mut()) {
                    e += xi * xi;
                    *gi += stiffness * xi;
                }
                0.5 * stiffness * e
            }
            Potential::DoubleWell { barrier, .. } => {
                let mut e = 0.0;
                for (xi, gi) in x.iter().zip(grad.iter_mut()) {
                    let w = xi * xi - 1.0;
                    e += w * w;
                    *gi += 4.0 * barrier * xi * w;
                }
                barrier * e
            }
            Potential::LennardJonesConfined(lj) => lj.accumulate(x, grad),
            Potential::Composite(parts) => {
                let mut e = 0.0;
                for p in parts {
                    e += p.accumulate(x, grad);
                    if e == f64::INFINITY {
                        return e;
                    }
                }
                e
            }
        }
    }

    /// Writes `grad U(x)` into `grad` and returns `U(x)`. Unchecked.
    pub fn energy_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.accumulate(x, grad)
    }

    /// Energy without the gradient. Unchecked.
    pub fn energy_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Harmonic { stiffness, .. } => 0.5 * stiffness * norm_sq(x),
            Potential::DoubleWell { barrier, .. } => {
                barrier * x.iter().map(|v| (v * v - 1.0).powi(2)).sum::<f64>()
            }
            Potential::LennardJonesConfined(lj) => {
                let pairs = lj.pair_sum(x);
                if pairs == f64::INFINITY {
                    return pairs;
                }
                0.5 * lj.confinement_stiffness * norm_sq(x) + pairs
            }
            Potential::Composite(parts) => parts.iter().map(|p| p.energy_unchecked(x)).sum(),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// `U(x)`; `f64::INFINITY` outside the domain.
    pub fn energy(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::domain("position contains NaN"));
        }
        let e = self.energy_unchecked(x);
        if e.is_nan() {
            return Err(Error::domain("energy evaluated to NaN"));
        }
        Ok(e)
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        matches!(self.energy(x), Ok(e) if e.is_finite())
    }

    /// `grad U(x)`; domain error where `U(x)` is infinite.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut g = vec![0.0; x.len()];
        let e = self.energy_and_gradient(x, &mut g);
        if !e.is_finite() {
            return Err(Error::domain("gradient requested outside the domain"));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("gradient is not finite"));
        }
        Ok(g)
    }

    /// `H(x, y) = U(x) + |y|^2 / 2`, infinite iff `U(x)` is.
    pub fn hamiltonian(&self, state: &State) -> Result<f64> {
        self.check_dim(state.y.len())?;
        let u = self.energy(&state.x)?;
        let h = u + state.kinetic_energy();
        if h.is_nan() {
            return Err(Error::domain("hamiltonian evaluated to NaN"));
        }
        Ok(h)
    }

    /// Finite-difference Hessian of the analytic gradient.
    pub fn hessian_fd(&self, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>> {
        let d = x.len();
        let mut hess = vec![vec![0.0; d]; d];
        let mut xp = x.to_vec();
        for j in 0..d {
            xp[j] = x[j] + h;
            let gp = self.gradient(&xp)?;
            xp[j] = x[j] - h;
            let gm = self.gradient(&xp)?;
            xp[j] = x[j];
            for i in 0..d {
                hess[i][j] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        // symmetrize
        for i in 0..d {
            for j in (i + 1)..d {
                let m = 0.5 * (hess[i][j] + hess[j][i]);
                hess[i][j] = m;
                hess[j][i] = m;
            }
        }
        Ok(hess)
    }

    pub fn growth_exponents(&self) -> GrowthExponents {
        match self {
            // |grad U|^2 = 2kU on both sides
            Potential::Harmonic { .. } => GrowthExponents {
                eta_0: -2.0,
                eta_inf: 2.0,
            },
            // quartic: |grad U|^2 ~ U^(3/2) at infinity
            Potential::DoubleWell { .. } => GrowthExponents {
                eta_0: -4.0,
                eta_inf: 4.0,
            },
            // r^-12 near contact: |grad U|^2 ~ U^(2 + 1/6)
            Potential::LennardJonesConfined(_) => GrowthExponents {
                eta_0: 12.0,
                eta_inf: 2.0,
            },
            Potential::Composite(parts) => parts
                .iter()
                .find(|p| p.kind() == PotentialKind::LennardJonesConfined)
                .unwrap_or(&parts[0])
                .growth_exponents(),
        }
    }

    /// Ray from a low-energy configuration toward the singularity (or toward
    /// infinity for potentials without one).
    pub fn probe_ray(&self) -> ProbeRay {
        let d = self.dim();
        let mut direction = vec![0.0; d];
        match self {
            Potential::Harmonic { .. } => {
                direction[0] = 1.0;
                ProbeRay {
                    base: vec![0.0; d],
                    direction,
                    t_max: None,
                }
            }
            Potential::DoubleWell { .. } => {
                direction[0] = 1.0;
                ProbeRay {
                    base: vec![1.0; d],
                    direction,
                    t_max: None,
                }
            }
            Potential::LennardJonesConfined(lj) => {
                let base = lj_chain_configuration(lj);
                if lj.n_particles < 2 {
                    direction[0] = 1.0;
                    return ProbeRay {
                        base,
                        direction,
                        t_max: None,
                    };
                }
                // push particle 1 onto particle 0 along the chain axis
                direction[lj.space_dim] = -1.0;
                ProbeRay {
                    base,
                    direction,
                    t_max: Some(lj.pair_minimum_distance()),
                }
            }
            Potential::Composite(parts) => {
                let mut ray = parts
                    .iter()
                    .find(|p| p.kind() == PotentialKind::LennardJonesConfined)
                    .unwrap_or(&parts[0])
                    .probe_ray();
                // the base may not be a minimum of the sum; keep the ray
                ray.base.truncate(d);
                ray
            }
        }
    }

    /// Positions along [`Potential::probe_ray`] at which `U` equals each
    /// target energy.
    pub fn probe_ladder(&self, energies: &[f64]) -> Result<Vec<Vec<f64>>> {
        let ray = self.probe_ray();
        let at = |t: f64| -> Vec<f64> {
            ray.base
                .iter()
                .zip(&ray.direction)
                .map(|(b, v)| b + t * v)
                .collect()
        };
        let u0 = self.energy(&ray.base)?;
        energies
            .iter()
            .map(|&target| {
                if !target.is_finite() || target < u0 {
                    return Err(Error::invalid(format!(
                        "probe energy {target} is below the ray base energy {u0}"
                    )));
                }
                let mut lo = 0.0;
                let mut hi = match ray.t_max {
                    Some(t) => t,
                    None => {
                        let mut t = 1.0;
                        while self.energy_unchecked(&at(t)) < target {
                            lo = t;
                            t *= 2.0;
                            if t > 1e12 {
                                return Err(Error::Numerical(
                                    "probe ladder bracketing diverged".into(),
                                ));
                            }
                        }
                        t
                    }
                };
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.energy_unchecked(&at(mid)) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(at(lo))
            })
            .collect()
    }

    /// Low-energy reference configuration: the minimum for harmonic and
    /// double-well potentials, an equally spaced chain for Lennard-Jones.
    pub fn reference_configuration(&self) -> Vec<f64> {
        self.probe_ray().base
    }
}

/// Particles on axis 0 at the pair-minimum spacing, centred on the origin.
fn lj_chain_configuration(lj: &LennardJones) -> Vec<f64> {
    let mut x = vec![0.0; lj.n_particles * lj.space_dim];
    let spacing = lj.pair_minimum_distance();
    let centre = 0.5 * (lj.n_particles as f64 - 1.0);
    for i in 0..lj.n_particles {
        x[i * lj.space_dim] = (i as f64 - centre) * spacing;
    }
    x
}

/// One row of the growth-assumption diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub energy: f64,
    pub grad_norm_sq: f64,
    /// Frobenius norm of the finite-difference Hessian.
    pub hessian_norm: f64,
    /// `|hess U| / |grad U|^2`; should vanish toward the domain boundary.
    pub hessian_ratio: f64,
    /// `|grad U|^2 / U^(2 - 2/eta_inf)`
    pub lower_sandwich: f64,
    /// `|grad U|^2 / U^(2 + 2/eta_0)`
    pub upper_sandwich: f64,
}

pub fn assumption_diagnostics(
    potential: &Potential,
    probe_points: &[Vec<f64>],
) -> Result<Vec<DiagnosticRow>> {
    assumption_diagnostics_with(potential, probe_points, potential.growth_exponents())
}

/// Raw ratios behind the growth assumptions. Makes no pass/fail decision.
pub fn assumption_diagnostics_with(
    potential: &Potential,
    probe_points: &[Vec<f64>],
    exponents: GrowthExponents,
) -> Result<Vec<DiagnosticRow>> {
    probe_points
        .iter()
        .map(|x| {
            let energy = potential.energy(x)?;
            if !energy.is_finite() {
                return Err(Error::domain("probe point outside the domain"));
            }
            let g = potential.gradient(x)?;
            let grad_norm_sq = norm_sq(&g);
            let hess = potential.hessian_fd(x, HESSIAN_FD_STEP)?;
            let hessian_norm = hess.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            Ok(DiagnosticRow {
                energy,
                grad_norm_sq,
                hessian_norm,
                hessian_ratio: hessian_norm / grad_norm_sq,
                lower_sandwich: grad_norm_sq / energy.powf(2.0 - 2.0 / exponents.eta_inf),
                upper_sandwich: grad_norm_sq / energy.powf(2.0 + 2.0 / exponents.eta_0),
            })
        })
        .collect()
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}
