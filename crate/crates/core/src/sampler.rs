//! Ensembles of independent chains and single-chain time averages.
//!
//! Chains are processed in fixed blocks of [`BLOCK_SIZE`] consecutive
//! indices. Each block is reduced sequentially in chain order and the block
//! partials are merged in block order, so every aggregate is bit-identical
//! whatever the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, EscapeStats, Result};
use crate::observables::Observable;
use crate::potentials::{Potential, State};
use crate::rng::{derive_substream, ChainStream, GaussianSource};
use crate::scheme::{Chain, SchemeKind, SchemeParams, StepEvent, Z95};

pub const BLOCK_SIZE: usize = 256;

/// Stream level reserved for initial-condition draws.
const INIT_LEVEL: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub enum InitRule {
    Fixed(State),
    /// Positions drawn as `center.x + sigma N(0, I)`, velocities `center.y`.
    GaussianCloud { center: State, sigma: f64 },
}

pub const DEFAULT_INIT_SIGMA: f64 = 0.1;

impl InitRule {
    pub fn dim(&self) -> usize {
        match self {
            InitRule::Fixed(s) => s.dim(),
            InitRule::GaussianCloud { center, .. } => center.dim(),
        }
    }

    fn draw(&self, potential: &Potential, seed: u64, level: u64, chain: u64) -> Result<State> {
        match self {
            InitRule::Fixed(s) => Ok(s.clone()),
            InitRule::GaussianCloud { center, sigma } => {
                let mut rng = derive_substream(seed ^ level.rotate_left(17), INIT_LEVEL, chain);
                let mut g = vec![0.0; center.dim()];
                for _ in 0..1000 {
                    rng.fill_standard_normal(&mut g);
                    let x: Vec<f64> = center.x.iter().zip(&g).map(|(c, e)| c + sigma * e).collect();
                    if potential.in_domain(&x) {
                        return State::new(x, center.y.clone());
                    }
                }
                Err(Error::domain(
                    "Gaussian cloud initialiser failed to land inside the domain",
                ))
            }
        }
    }
}

/// How to run an ensemble or a long chain.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub n_chains: usize,
    pub n_steps: usize,
    /// Steps discarded before time averaging.
    pub burn_in: usize,
    pub master_seed: u64,
    pub init: InitRule,
    /// Thinning of recorded samples.
    pub record_stride: usize,
    /// Keep every `record_stride`-th state of every chain.
    pub record_samples: bool,
    pub scheme: SchemeKind,
    /// Selects an independent family of chain streams under the same seed.
    pub stream_level: u64,
    /// Worker cap; results do not depend on it.
    pub threads: Option<usize>,
    /// Unstopped chains whose potential energy exceeds this value are
    /// counted as escaped and terminated. `None` counts only true domain
    /// exits (non-finite energy).
    pub escape_energy: Option<f64>,
}

impl RunSpec {
    /// Stopped scheme, burn-in of a tenth of the run, no recording.
    pub fn new(n_chains: usize, n_steps: usize, master_seed: u64, init: State) -> Self {
        RunSpec {
            n_chains,
            n_steps,
            burn_in: n_steps / 10,
            master_seed,
            init: InitRule::Fixed(init),
            record_stride: 1,
            record_samples: false,
            scheme: SchemeKind::Stopped,
            stream_level: 0,
            threads: None,
            escape_energy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::invalid("n_chains must be at least 1"));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record_stride must be at least 1"));
        }
        if let Some(e) = self.escape_energy {
            if e.is_nan() {
                return Err(Error::invalid("escape_energy must not be NaN"));
            }
        }
        if self.burn_in > self.n_steps {
            return Err(Error::invalid(format!(
                "burn_in {} exceeds n_steps {}",
                self.burn_in, self.n_steps
            )));
        }
        Ok(())
    }

    fn escaped(&self, chain: &Chain, event: StepEvent) -> bool {
        match event {
            StepEvent::Escaped => true,
            StepEvent::Rejected => false,
            StepEvent::Accepted => {
                self.scheme == SchemeKind::Unstopped
                    && self
                        .escape_energy
                        .is_some_and(|e| chain.potential_energy() > e)
            }
        }
    }

    pub fn stream(&self, chain: u64) -> ChainStream {
        derive_substream(self.master_seed, self.stream_level, chain)
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        match self.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

/// Streaming mean and variance (Welford), mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = if delta == 0.0 {
            self.mean
        } else {
            self.mean + delta * other.n as f64 / n as f64
        };
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        self.mean = mean;
        self.n = n;
    }

    /// Unbiased sample variance; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// 95% half-width of the mean.
    pub fn ci95(&self) -> f64 {
        if self.n == 0 {
            return f64::INFINITY;
        }
        Z95 * (self.variance() / self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableStats {
    pub name: String,
    pub mean: f64,
    pub variance: f64,
    pub ci_halfwidth: f64,
    pub n_effective: usize,
}

/// One recorded state.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub chain: usize,
    pub step: usize,
    pub hamiltonian: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub stats: Vec<ObservableStats>,
    pub n_chains: usize,
    /// Chains terminated by a domain escape (unstopped scheme only).
    pub escape_count: usize,
    /// Fraction of attempted steps whose proposal was rejected.
    pub rejection_rate: f64,
    /// Largest potential energy visited by any chain.
    pub peak_potential: f64,
    /// Largest Hamiltonian visited by any chain.
    pub peak_hamiltonian: f64,
    /// Initial state lies above the energy threshold of the stopped scheme.
    pub init_outside_threshold: bool,
    pub samples: Vec<SampleRow>,
}

impl EnsembleResult {
    pub fn stat(&self, name: &str) -> Option<&ObservableStats> {
        self.stats.iter().find(|s| s.name == name)
    }
}

/// What the per-chain loop should track besides final values.
#[derive(Debug, Clone, Default)]
struct Tracking {
    /// Sorted steps at which `H` is captured.
    checkpoints: Vec<usize>,
    record: Option<usize>,
}

#[derive(Debug, Clone, Default)]
struct BlockAcc {
    finals: Vec<Moments>,
    /// Hamiltonian at each checkpoint, `None` after an escape.
    checkpoint_h: Vec<Vec<Option<f64>>>,
    final_h: Vec<f64>,
    escapes: Vec<usize>,
    rejections: u64,
    attempts: u64,
    peak_u: f64,
    peak_h: f64,
    samples: Vec<SampleRow>,
}

fn run_block(
    block: usize,
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    observables: &[Observable],
    tracking: &Tracking,
) -> Result<BlockAcc> {
    let start = block * BLOCK_SIZE;
    let end = (start + BLOCK_SIZE).min(spec.n_chains);
    let mut acc = BlockAcc {
        finals: vec![Moments::default(); observables.len()],
        peak_u: f64::NEG_INFINITY,
        peak_h: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut values = vec![0.0; observables.len()];
    for c in start..end {
        let init = spec
            .init
            .draw(potential, spec.master_seed, spec.stream_level, c as u64)?;
        let mut chain = Chain::new(potential, *params, spec.scheme, &init)?;
        let mut rng = spec.stream(c as u64);
        let mut cps = Vec::with_capacity(tracking.checkpoints.len());
        let mut next_cp = 0;
        let mut escaped_at = None;
        let mut observe = |chain: &Chain, step: usize, acc: &mut BlockAcc, cps: &mut Vec<_>| {
            let h = chain.hamiltonian();
            acc.peak_u = acc.peak_u.max(chain.potential_energy());
            acc.peak_h = acc.peak_h.max(h);
            while next_cp < tracking.checkpoints.len() && tracking.checkpoints[next_cp] == step {
                cps.push(Some(h));
                next_cp += 1;
            }
            if let Some(stride) = tracking.record {
                if step % stride == 0 {
                    acc.samples.push(SampleRow {
                        chain: c,
                        step,
                        hamiltonian: h,
                        values: observables
                            .iter()
                            .map(|o| o.eval_with_energy(chain.x(), chain.y(), chain.potential_energy()))
                            .collect(),
                    });
                }
            }
        };
        observe(&chain, 0, &mut acc, &mut cps);
        for step in 1..=spec.n_steps {
            acc.attempts += 1;
            let event = chain.step(&mut rng);
            if spec.escaped(&chain, event) {
                acc.peak_u = acc.peak_u.max(chain.potential_energy());
                acc.peak_h = acc.peak_h.max(chain.hamiltonian());
                escaped_at = Some(step);
                break;
            }
            if event == StepEvent::Rejected {
                acc.rejections += 1;
            }
            observe(&chain, step, &mut acc, &mut cps);
        }
        match escaped_at {
            Some(step) => {
                acc.escapes.push(step);
                cps.resize(tracking.checkpoints.len(), None);
            }
            None => {
                for (v, o) in values.iter_mut().zip(observables) {
                    *v = o.eval_with_energy(chain.x(), chain.y(), chain.potential_energy());
                }
                for (m, v) in acc.finals.iter_mut().zip(&values) {
                    m.push(*v);
                }
                acc.final_h.push(chain.hamiltonian());
            }
        }
        acc.checkpoint_h.push(cps);
    }
    Ok(acc)
}

struct Aggregate {
    finals: Vec<Moments>,
    checkpoint_h: Vec<Vec<Option<f64>>>,
    final_h: Vec<f64>,
    escapes: Vec<usize>,
    rejections: u64,
    attempts: u64,
    peak_u: f64,
    peak_h: f64,
    samples: Vec<SampleRow>,
}

fn run_chains(
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    observables: &[Observable],
    tracking: &Tracking,
) -> Result<Aggregate> {
    spec.validate()?;
    if spec.init.dim() != potential.dim() {
        return Err(Error::DimensionMismatch {
            expected: potential.dim(),
            got: spec.init.dim(),
        });
    }
    for o in observables {
        o.validate(potential.dim())?;
    }
    let n_blocks = spec.n_chains.div_ceil(BLOCK_SIZE);
    let blocks: Vec<Result<BlockAcc>> = spec.install(|| {
        (0..n_blocks)
            .into_par_iter()
            .map(|b| run_block(b, spec, potential, params, observables, tracking))
            .collect()
    })?;
    let mut agg = Aggregate {
        finals: vec![Moments::default(); observables.len()],
        checkpoint_h: Vec::new(),
        final_h: Vec::new(),
        escapes: Vec::new(),
        rejections: 0,
        attempts: 0,
        peak_u: f64::NEG_INFINITY,
        peak_h: f64::NEG_INFINITY,
        samples: Vec::new(),
    };
    for b in blocks {
        let b = b?;
        for (m, bm) in agg.finals.iter_mut().zip(&b.finals) {
            m.merge(bm);
        }
        agg.checkpoint_h.extend(b.checkpoint_h);
        agg.final_h.extend(b.final_h);
        agg.escapes.extend(b.escapes);
        agg.rejections += b.rejections;
        agg.attempts += b.attempts;
        agg.peak_u = agg.peak_u.max(b.peak_u);
        agg.peak_h = agg.peak_h.max(b.peak_h);
        agg.samples.extend(b.samples);
    }
    if agg.escapes.len() == spec.n_chains {
        return Err(Error::EscapedEnsemble(escape_stats(spec.n_chains, &agg.escapes)));
    }
    Ok(agg)
}

fn escape_stats(n_chains: usize, escapes: &[usize]) -> EscapeStats {
    EscapeStats {
        n_chains,
        escape_count: escapes.len(),
        mean_escape_step: escapes.iter().sum::<usize>() as f64 / escapes.len().max(1) as f64,
        first_escape_step: escapes.iter().copied().min().unwrap_or(0),
    }
}

fn init_outside(spec: &RunSpec, potential: &Potential, params: &SchemeParams) -> Result<bool> {
    let outside = match (&spec.init, spec.scheme) {
        (InitRule::Fixed(s), SchemeKind::Stopped) => {
            let h = potential.hamiltonian(s)?;
            if !h.is_finite() {
                return Err(Error::domain("initial state outside the domain"));
            }
            h > params.threshold()
        }
        (InitRule::GaussianCloud { center, .. }, SchemeKind::Stopped) => {
            potential.hamiltonian(center)? > params.threshold()
        }
        _ => false,
    };
    if outside {
        log::warn!(
            "initial state lies above the energy threshold {}",
            params.threshold()
        );
    }
    Ok(outside)
}

/// Evolves `n_chains` independent chains for `n_steps` and aggregates the
/// observables at the final states.
pub fn run_ensemble(
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    observables: &[Observable],
) -> Result<EnsembleResult> {
    let init_outside_threshold = init_outside(spec, potential, params)?;
    let tracking = Tracking {
        checkpoints: Vec::new(),
        record: spec.record_samples.then_some(spec.record_stride),
    };
    let agg = run_chains(spec, potential, params, observables, &tracking)?;
    let stats = observables
        .iter()
        .zip(&agg.finals)
        .map(|(o, m)| ObservableStats {
            name: o.name.clone(),
            mean: m.mean,
            variance: m.variance(),
            ci_halfwidth: m.ci95(),
            n_effective: m.n as usize,
        })
        .collect();
    Ok(EnsembleResult {
        stats,
        n_chains: spec.n_chains,
        escape_count: agg.escapes.len(),
        rejection_rate: rate(agg.rejections, agg.attempts),
        peak_potential: agg.peak_u,
        peak_hamiltonian: agg.peak_h,
        init_outside_threshold,
        samples: agg.samples,
    })
}

fn rate(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Time average of one observable along a single chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeAverage {
    pub name: String,
    pub mean: f64,
    /// 95% half-width from batch means.
    pub ci_halfwidth: f64,
    pub variance: f64,
    /// Sample count discounted by the batch-means autocorrelation estimate.
    pub n_effective: usize,
    pub n_batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErgodicResult {
    pub averages: Vec<TimeAverage>,
    pub n_samples: usize,
    pub rejection_rate: f64,
    pub peak_hamiltonian: f64,
    pub init_outside_threshold: bool,
    /// Thinned trajectory when `record_samples` is set.
    pub samples: Vec<SampleRow>,
}

/// Batch-means estimator with `floor(sqrt(m))` batches of equal size; the
/// remainder of `m` only enters the overall mean.
#[derive(Debug, Clone)]
struct BatchMeans {
    batch_size: usize,
    n_batches: usize,
    overall: Moments,
    current: Moments,
    batches: Moments,
}

impl BatchMeans {
    fn new(m: usize) -> Self {
        let n_batches = (m as f64).sqrt().floor() as usize;
        let batch_size = m.checked_div(n_batches).unwrap_or(0);
        BatchMeans {
            batch_size,
            n_batches,
            overall: Moments::default(),
            current: Moments::default(),
            batches: Moments::default(),
        }
    }

    fn push(&mut self, v: f64) {
        self.overall.push(v);
        if (self.batches.n as usize) < self.n_batches {
            self.current.push(v);
            if self.current.n as usize == self.batch_size {
                self.batches.push(self.current.mean);
                self.current = Moments::default();
            }
        }
    }

    fn finish(&self, name: &str) -> TimeAverage {
        let m = self.overall.n as usize;
        let (ci, n_eff) = if self.batches.n >= 2 {
            let bvar = self.batches.variance();
            let ci = Z95 * (bvar / self.batches.n as f64).sqrt();
            let var = self.overall.variance();
            let n_eff = if bvar > 0.0 {
                ((var / (self.batch_size as f64 * bvar)) * m as f64).min(m as f64) as usize
            } else {
                m
            };
            (ci, n_eff)
        } else {
            (f64::INFINITY, m)
        };
        TimeAverage {
            name: name.to_string(),
            mean: self.overall.mean,
            ci_halfwidth: ci,
            variance: self.overall.variance(),
            n_effective: n_eff,
            n_batches: self.batches.n as usize,
        }
    }
}

/// Long-run averages `(1 / (n - burn_in)) sum_{k > burn_in} f(Z_k)` along a
/// single chain.
pub fn ergodic_averages(
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    observables: &[Observable],
) -> Result<ErgodicResult> {
    spec.validate()?;
    if spec.n_chains != 1 {
        return Err(Error::invalid(format!(
            "ergodic averages run a single chain, got n_chains = {}",
            spec.n_chains
        )));
    }
    if spec.burn_in >= spec.n_steps {
        return Err(Error::invalid(format!(
            "burn_in {} must be below n_steps {}",
            spec.burn_in, spec.n_steps
        )));
    }
    for o in observables {
        o.validate(potential.dim())?;
    }
    let init_outside_threshold = init_outside(spec, potential, params)?;
    let init = spec
        .init
        .draw(potential, spec.master_seed, spec.stream_level, 0)?;
    let mut chain = Chain::new(potential, *params, spec.scheme, &init)?;
    let mut rng = spec.stream(0);
    let m = spec.n_steps - spec.burn_in;
    let mut acc: Vec<BatchMeans> = observables.iter().map(|_| BatchMeans::new(m)).collect();
    let mut rejections = 0u64;
    let mut peak_h = chain.hamiltonian();
    let mut samples = Vec::new();
    let mut record = |chain: &Chain, step: usize| {
        if spec.record_samples && step % spec.record_stride == 0 {
            let u = chain.potential_energy();
            samples.push(SampleRow {
                chain: 0,
                step,
                hamiltonian: chain.hamiltonian(),
                values: observables
                    .iter()
                    .map(|o| o.eval_with_energy(chain.x(), chain.y(), u))
                    .collect(),
            });
        }
    };
    record(&chain, 0);
    for step in 1..=spec.n_steps {
        let event = chain.step(&mut rng);
        if spec.escaped(&chain, event) {
            return Err(Error::EscapedEnsemble(escape_stats(1, &[step])));
        }
        if event == StepEvent::Rejected {
            rejections += 1;
        }
        peak_h = peak_h.max(chain.hamiltonian());
        record(&chain, step);
        if step > spec.burn_in {
            let u = chain.potential_energy();
            for (a, o) in acc.iter_mut().zip(observables) {
                a.push(o.eval_with_energy(chain.x(), chain.y(), u));
            }
        }
    }
    Ok(ErgodicResult {
        averages: acc
            .iter()
            .zip(observables)
            .map(|(a, o)| a.finish(&o.name))
            .collect(),
        n_samples: m,
        rejection_rate: rate(rejections, spec.n_steps as u64),
        peak_hamiltonian: peak_h,
        init_outside_threshold,
        samples,
    })
}

/// Single-observable form of [`ergodic_averages`]: `(mean, ci_halfwidth)`.
pub fn ergodic_average(
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    observable: &Observable,
) -> Result<(f64, f64)> {
    let r = ergodic_averages(spec, potential, params, std::slice::from_ref(observable))?;
    Ok((r.averages[0].mean, r.averages[0].ci_halfwidth))
}

/// Cross-chain average of `exp(b H)` at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentPoint {
    pub step: usize,
    pub mean: f64,
    pub ci_halfwidth: f64,
    pub n_chains: usize,
}

/// `0`, then about ten logarithmically spaced steps per decade up to
/// `n_steps` (always included).
pub fn log_checkpoints(n_steps: usize) -> Vec<usize> {
    let mut out = vec![0];
    if n_steps == 0 {
        return out;
    }
    let mut k = 0;
    loop {
        let s = 10f64.powf(k as f64 / 10.0).round() as usize;
        if s >= n_steps {
            break;
        }
        if *out.last().unwrap() != s {
            out.push(s);
        }
        k += 1;
    }
    out.push(n_steps);
    out
}

/// `E[exp(b H(Z_n))]` across chains at [`log_checkpoints`].
pub fn exp_moment(
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    b: f64,
) -> Result<Vec<MomentPoint>> {
    if !(b > 0.0 && b < params.beta()) {
        return Err(Error::invalid(format!(
            "exponential moment needs 0 < b < beta = {}, got {b}",
            params.beta()
        )));
    }
    init_outside(spec, potential, params)?;
    let checkpoints = log_checkpoints(spec.n_steps);
    let tracking = Tracking {
        checkpoints: checkpoints.clone(),
        record: None,
    };
    let agg = run_chains(spec, potential, params, &[], &tracking)?;
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(k, &step)| {
            let mut m = Moments::default();
            for chain in &agg.checkpoint_h {
                if let Some(h) = chain[k] {
                    m.push((b * h).exp());
                }
            }
            MomentPoint {
                step,
                mean: m.mean,
                ci_halfwidth: m.ci95(),
                n_chains: m.n as usize,
            }
        })
        .collect())
}

/// Empirical `P(H(Z_n) >= a)` at the final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailPoint {
    pub a: f64,
    pub estimate: f64,
    /// 95% normal-approximation binomial half-width.
    pub ci_halfwidth: f64,
}

pub fn tail_probabilities(
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    levels: &[f64],
) -> Result<Vec<TailPoint>> {
    if let Some(a) = levels.iter().find(|a| !(**a >= 0.0)) {
        return Err(Error::invalid(format!("tail level must be non-negative, got {a}")));
    }
    init_outside(spec, potential, params)?;
    let agg = run_chains(spec, potential, params, &[], &Tracking::default())?;
    let n = agg.final_h.len() as f64;
    Ok(levels
        .iter()
        .map(|&a| {
            let hits = agg.final_h.iter().filter(|&&h| h >= a).count() as f64;
            let p = hits / n;
            TailPoint {
                a,
                estimate: p,
                ci_halfwidth: Z95 * (p * (1.0 - p) / n).sqrt(),
            }
        })
        .collect())
}

/// `(estimate, ci)` of `P(H(Z_n) >= a)`.
pub fn tail_probability(
    spec: &RunSpec,
    potential: &Potential,
    params: &SchemeParams,
    a: f64,
) -> Result<(f64, f64)> {
    let p = tail_probabilities(spec, potential, params, &[a])?;
    Ok((p[0].estimate, p[0].ci_halfwidth))
}
