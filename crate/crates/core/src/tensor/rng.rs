use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded counter-based generator (ChaCha8). Streams are identical across
/// platforms for a given seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for item `index` (seed xor index).
    pub fn substream(seed: u64, index: u64) -> Self {
        Rng::new(Self::substream_seed(seed, index))
    }

    pub fn substream_seed(seed: u64, index: u64) -> u64 {
        seed ^ index
    }

    /// Child generator derived from this seed and a label, leaving `self` untouched.
    pub fn fork(&self, label: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(label.wrapping_add(1));
        let seed = r.next_u64();
        Rng::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
