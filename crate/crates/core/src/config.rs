//! Flat `key = value` experiment files.
//!
//! ```text
//! # harmonic oscillator, weak error of the first coordinate
//! potential.kind = harmonic
//! scheme.delta = 0.08
//! analysis.delta_grid = 0.08, 0.04, 0.02, 0.01
//! ```
//!
//! Unknown keys are rejected. Every key has a documented default except
//! `potential.kind` and `scheme.delta`; the analysis keys are only required
//! by the subcommands that use them.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::analysis::ReferenceSolution;
use crate::error::{Error, Result};
use crate::observables::Observable;
use crate::potentials::{LennardJones, Potential, State};
use crate::sampler::{InitRule, RunSpec, DEFAULT_INIT_SIGMA};
use crate::scheme::{
    LyapunovParams, SchemeParams, DEFAULT_CUTOFF_R1, DEFAULT_CUTOFF_R2,
    DEFAULT_THRESHOLD_EXPONENT,
};

/// Every accepted key with its default (`None` when required or computed).
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    ("potential.kind", None, "harmonic | double_well | lj_confined"),
    ("potential.n_particles", Some("1"), "particles; dimension is n_particles * space_dim"),
    ("potential.space_dim", Some("1"), "spatial dimension per particle"),
    ("potential.stiffness", Some("1"), "harmonic stiffness"),
    ("potential.barrier", Some("1"), "double-well barrier height"),
    ("potential.confinement_stiffness", Some("1"), "Lennard-Jones confinement"),
    ("potential.lj_epsilon", Some("1"), "Lennard-Jones well depth"),
    ("potential.lj_sigma", Some("1"), "Lennard-Jones length scale"),
    ("scheme.delta", None, "step size"),
    ("scheme.gamma", Some("1"), "friction"),
    ("scheme.beta", Some("1"), "inverse temperature"),
    ("scheme.l", Some("0.1"), "threshold exponent, 0 < l <= 1/2"),
    ("scheme.kind", Some("stopped"), "stopped | unstopped"),
    ("run.n_chains", Some("1000"), "independent chains"),
    ("run.n_steps", Some("1000"), "steps per chain"),
    ("run.burn_in", None, "steps discarded by time averages; default n_steps / 10"),
    ("run.seed", Some("0"), "master seed"),
    ("run.record_stride", None, "thinning of samples.csv; default max(1, n_steps / 100)"),
    ("run.init_kind", Some("fixed"), "fixed | gaussian_cloud"),
    ("run.init_x", None, "comma list; default reference configuration"),
    ("run.init_y", None, "comma list; default zeros"),
    ("run.init_sigma", Some("0.1"), "position spread of gaussian_cloud"),
    ("run.threads", None, "worker cap; default all cores"),
    ("run.average", Some("ensemble"), "ensemble | time (single-chain long-run average)"),
    ("run.escape_energy", Some("inf"), "unstopped chains above this U count as escaped"),
    ("observables", Some("hamiltonian"), "comma list of catalog names or polynomials"),
    ("lyapunov.b", None, "exponent of V_b; default beta / 2"),
    ("lyapunov.r1", Some("10"), "cutoff start"),
    ("lyapunov.r2", Some("20"), "cutoff end"),
    ("lyapunov.n_samples", Some("10000"), "one-step draws per probe"),
    ("lyapunov.probe_fractions", Some("0.5, 0.6, 0.7, 0.8"), "probe energies as fractions of delta^-l"),
    ("lyapunov.probe_x", None, "explicit probe positions, states separated by ';'"),
    ("analysis.observable", Some("first_coordinate"), "observable of weak-error and bias curves"),
    ("analysis.delta_grid", None, "strictly decreasing comma list"),
    ("analysis.t", Some("1"), "final time of weak-error runs"),
    ("analysis.reference", None, "analytic_linear | fine_step; default by potential"),
    ("analysis.delta_ref", None, "fine-step reference step; default min(grid) / 16"),
    ("analysis.mu_reference", None, "invariant mean; default exact or fine-step"),
    ("analysis.probe_energies", None, "potential energies of check-potential probes"),
];

/// 64-bit content hash: the first eight bytes of SHA-256, big-endian.
pub fn config_hash(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

/// Raw key-value map with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RawConfig {
    pub entries: BTreeMap<String, String>,
    pub hash: u64,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1))
            })?;
            let key = key.trim();
            if !KEYS.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", n + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
        }
        Ok(RawConfig {
            entries,
            hash: config_hash(text.as_bytes()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        RawConfig::parse(&text)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, _, _)| *k == key).and_then(|e| e.1))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{v}'")))
            })
            .transpose()
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key).map(|v| parse_list(key, v)).transpose()
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{s}' as a number")))
        })
        .collect()
}

/// Turns validation errors raised while building from a config into config
/// errors, so they map to the same exit code.
fn cfg<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidInput(m) => Error::Config(m),
        Error::DimensionMismatch { expected, got } => {
            Error::Config(format!("dimension mismatch: expected {expected}, got {got}"))
        }
        Error::Domain(m) => Error::Config(m),
        other => other,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    Ensemble,
    Time,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovConfig {
    pub params: LyapunovParams,
    pub n_samples: usize,
    pub probe_fractions: Vec<f64>,
    pub probe_x: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub observable: Observable,
    pub delta_grid: Option<Vec<f64>>,
    pub t: f64,
    pub reference: Option<ReferenceSolution>,
    pub mu_reference: Option<f64>,
    pub probe_energies: Option<Vec<f64>>,
}

/// Validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub raw: RawConfig,
    pub potential: Potential,
    pub scheme: SchemeParams,
    pub run: RunSpec,
    pub averaging: Averaging,
    pub observables: Vec<Observable>,
    lyapunov: std::result::Result<LyapunovConfig, String>,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_raw(RawConfig::load(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        ExperimentConfig::from_raw(RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let potential = cfg(build_potential(&raw))?;
        let scheme = cfg(SchemeParams::new(
            raw.require("scheme.delta")?,
            raw.require("scheme.gamma")?,
            raw.require("scheme.beta")?,
            raw.get("scheme.l")?.unwrap_or(DEFAULT_THRESHOLD_EXPONENT),
        ))?;
        let run = cfg(build_run(&raw, &potential))?;
        let averaging = match raw.require::<String>("run.average")?.as_str() {
            "ensemble" => Averaging::Ensemble,
            "time" => Averaging::Time,
            other => {
                return Err(Error::Config(format!(
                    "run.average must be 'ensemble' or 'time', got '{other}'"
                )))
            }
        };
        let observables = cfg(raw
            .require::<String>("observables")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let o = Observable::parse(s)?;
                o.validate(potential.dim())?;
                Ok(o)
            })
            .collect::<Result<Vec<_>>>())?;
        let lyapunov = cfg(build_lyapunov(&raw, &potential, &scheme)).map_err(|e| e.to_string());
        let analysis = cfg(build_analysis(&raw, &potential))?;
        Ok(ExperimentConfig {
            raw,
            potential,
            scheme,
            run,
            averaging,
            observables,
            lyapunov,
            analysis,
        })
    }

    /// Lyapunov settings; errors surface only for the subcommand using them.
    pub fn lyapunov(&self) -> Result<&LyapunovConfig> {
        self.lyapunov.as_ref().map_err(|m| Error::Config(m.clone()))
    }

    pub fn hash(&self) -> u64 {
        self.raw.hash
    }
}

fn build_potential(raw: &RawConfig) -> Result<Potential> {
    let n: usize = raw.require("potential.n_particles")?;
    let sd: usize = raw.require("potential.space_dim")?;
    let dim = n * sd;
    match raw.require::<String>("potential.kind")?.as_str() {
        "harmonic" => Potential::harmonic(dim, raw.require("potential.stiffness")?),
        "double_well" => Potential::double_well(dim, raw.require("potential.barrier")?),
        "lj_confined" => Ok(Potential::lennard_jones(LennardJones::new(
            n,
            sd,
            raw.require("potential.lj_epsilon")?,
            raw.require("potential.lj_sigma")?,
            raw.require("potential.confinement_stiffness")?,
        )?)),
        other => Err(Error::Config(format!(
            "potential.kind must be harmonic, double_well or lj_confined, got '{other}'"
        ))),
    }
}

fn build_run(raw: &RawConfig, potential: &Potential) -> Result<RunSpec> {
    let n_steps: usize = raw.require("run.n_steps")?;
    let x = raw
        .list("run.init_x")?
        .unwrap_or_else(|| potential.reference_configuration());
    let y = raw
        .list("run.init_y")?
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let center = State::new(x, y)?;
    if center.dim() != potential.dim() {
        return Err(Error::DimensionMismatch {
            expected: potential.dim(),
            got: center.dim(),
        });
    }
    if !potential.in_domain(&center.x) {
        return Err(Error::Config("run.init_x lies outside the domain".into()));
    }
    let init = match raw.require::<String>("run.init_kind")?.as_str() {
        "fixed" => InitRule::Fixed(center),
        "gaussian_cloud" => {
            let sigma: f64 = raw.get("run.init_sigma")?.unwrap_or(DEFAULT_INIT_SIGMA);
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::Config(format!("run.init_sigma must be >= 0, got {sigma}")));
            }
            InitRule::GaussianCloud { center, sigma }
        }
        other => {
            return Err(Error::Config(format!(
                "run.init_kind must be fixed or gaussian_cloud, got '{other}'"
            )))
        }
    };
    let escape: f64 = raw.require("run.escape_energy")?;
    let spec = RunSpec {
        n_chains: raw.require("run.n_chains")?,
        n_steps,
        burn_in: raw.get("run.burn_in")?.unwrap_or(n_steps / 10),
        master_seed: raw.require("run.seed")?,
        init,
        record_stride: raw.get("run.record_stride")?.unwrap_or((n_steps / 100).max(1)),
        record_samples: true,
        scheme: raw.require::<String>("scheme.kind")?.parse()?,
        stream_level: 0,
        threads: raw.get("run.threads")?,
        escape_energy: (escape != f64::INFINITY).then_some(escape),
    };
    spec.validate()?;
    Ok(spec)
}

fn build_lyapunov(
    raw: &RawConfig,
    potential: &Potential,
    scheme: &SchemeParams,
) -> Result<LyapunovConfig> {
    let params = LyapunovParams::new(
        raw.get("lyapunov.b")?.unwrap_or(0.5 * scheme.beta()),
        raw.get("lyapunov.r1")?.unwrap_or(DEFAULT_CUTOFF_R1),
        raw.get("lyapunov.r2")?.unwrap_or(DEFAULT_CUTOFF_R2),
        potential.dim(),
        scheme,
    )?;
    let probe_x = raw
        .raw("lyapunov.probe_x")
        .map(|v| {
            v.split(';')
                .map(|s| parse_list("lyapunov.probe_x", s))
                .filter(|r| r.as_ref().map_or(true, |x| !x.is_empty()))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(LyapunovConfig {
        params,
        n_samples: raw.require("lyapunov.n_samples")?,
        probe_fractions: raw.list("lyapunov.probe_fractions")?.unwrap_or_default(),
        probe_x,
    })
}

fn build_analysis(raw: &RawConfig, potential: &Potential) -> Result<AnalysisConfig> {
    let observable = Observable::parse(&raw.require::<String>("analysis.observable")?)?;
    observable.validate(potential.dim())?;
    let delta_grid = raw.list("analysis.delta_grid")?;
    let reference = match raw.raw("analysis.reference") {
        None => None,
        Some("analytic_linear") => Some(ReferenceSolution::AnalyticLinear),
        Some("fine_step") => Some(match raw.get::<f64>("analysis.delta_ref")? {
            Some(delta_ref) => ReferenceSolution::FineStep { delta_ref },
            None => ReferenceSolution::fine_step_for(delta_grid.as_deref().unwrap_or(&[])),
        }),
        Some(other) => {
            return Err(Error::Config(format!(
                "analysis.reference must be analytic_linear or fine_step, got '{other}'"
            )))
        }
    };
    Ok(AnalysisConfig {
        observable,
        delta_grid,
        t: raw.require("analysis.t")?,
        reference,
        mu_reference: raw.get("analysis.mu_reference")?,
        probe_energies: raw.list("analysis.probe_energies")?,
    })
}
