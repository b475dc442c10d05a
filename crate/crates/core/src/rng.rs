//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream, counters...)`, so a draw
//! never depends on how many other draws happened before it or in which order
//! minibatches were processed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream identifiers, so unrelated consumers never share draws.
pub mod stream {
    /// Reparametrization noise during training.
    pub const TRAIN_NOISE: u64 = 1;
    /// Re-sampling at a fixed drift for reconstruction panels.
    pub const RESAMPLE: u64 = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self, counters: &[u64]) -> u64 {
        counters
            .iter()
            .fold(mix(self.seed), |h, &c| mix(h ^ mix(c)))
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&self, counters: &[u64]) -> f64 {
        ((self.bits(counters) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Uniform for one latent coordinate of one observation in one epoch.
    pub fn latent_uniform(
        &self,
        stream: u64,
        epoch: usize,
        index: usize,
        level: usize,
        dim: usize,
    ) -> f64 {
        self.uniform(&[stream, epoch as u64, index as u64, level as u64, dim as u64])
    }
}
