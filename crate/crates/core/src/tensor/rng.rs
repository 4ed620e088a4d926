use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Distributions available to [`RngStream::sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distribution {
    /// Uniform on `[0, 1)`.
    Uniform,
    /// Standard normal.
    Gaussian,
}

/// Independent sub-streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum StreamPurpose {
    Init = 1,
    Episode = 2,
    Augment = 3,
    Pseudo = 4,
    Eval = 5,
    Data = 6,
    Verify = 7,
}

/// Seeded ChaCha8 stream.
///
/// The generator is ChaCha with 8 rounds keyed by the 64-bit seed (expanded
/// through `SeedableRng::seed_from_u64`), so the same seed produces the same
/// sequence on every platform. Derived streams keep the key and select the
/// ChaCha stream id `(purpose << 48) | index`, which makes the draws of one
/// episode independent of how many other episodes were drawn before it.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Sub-stream for `(purpose, index)`; independent of this stream's position.
    pub fn derive(&self, purpose: StreamPurpose, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 48) | (index & ((1 << 48) - 1)));
        RngStream { seed: self.seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// `amount` distinct indices from `[0, n)` in random order.
    pub fn choose_distinct(&mut self, n: usize, amount: usize) -> Result<Vec<usize>> {
        if amount > n {
            return Err(Error::Data(format!("cannot draw {amount} distinct items from {n}")));
        }
        Ok(index::sample(&mut self.rng, n, amount).into_vec())
    }

    pub fn sample<F: Real>(&mut self, dist: Distribution, shape: &[usize]) -> Tensor<F> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                F::from_f64(match dist {
                    Distribution::Uniform => self.uniform(),
                    Distribution::Gaussian => self.gaussian(),
                })
            })
            .collect();
        Tensor::from_raw(shape.to_vec(), data)
    }

    pub fn gaussian_tensor<F: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        self.sample::<F>(Distribution::Gaussian, shape).scale(F::from_f64(std))
    }
}
