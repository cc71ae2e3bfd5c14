//! Reproducible per-chain Gaussian streams.
//!
//! Each chain owns a ChaCha8 generator keyed by the master seed and selected
//! by the chain index through the cipher's 64-bit stream id, so streams are
//! independent of scheduling and of the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Source of independent standard-normal draws.
pub trait GaussianSource {
    fn fill_standard_normal(&mut self, out: &mut [f64]);

    fn standard_normal(&mut self) -> f64 {
        let mut v = [0.0];
        self.fill_standard_normal(&mut v);
        v[0]
    }
}

#[derive(Debug, Clone)]
pub struct ChainStream {
    rng: ChaCha8Rng,
}

impl ChainStream {
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl GaussianSource for ChainStream {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
    }
}

/// Stream that always yields zero; turns the scheme into its drift part.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroStream;

impl GaussianSource for ZeroStream {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

impl<G: GaussianSource + ?Sized> GaussianSource for &mut G {
    fn fill_standard_normal(&mut self, out: &mut [f64]) {
        (**self).fill_standard_normal(out)
    }
}

/// Stream of chain `chain_index` under `master_seed`.
pub fn derive_stream(master_seed: u64, chain_index: u64) -> ChainStream {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(chain_index);
    ChainStream { rng }
}

/// Stream of chain `chain_index` at experiment level `level` (one level per
/// step size in a convergence study). Distinct levels use distinct keys.
pub fn derive_substream(master_seed: u64, level: u64, chain_index: u64) -> ChainStream {
    let key = splitmix64(master_seed ^ splitmix64(level.wrapping_add(0x5851_f42d_4c95_7f2d)));
    derive_stream(key, chain_index)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
