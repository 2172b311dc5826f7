//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed and separated by
//! its ChaCha stream id, so draws are identical on every platform and the
//! full state is just `(seed, stream, word position)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Identifier recorded in checkpoints next to serialized stream states.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Independent named streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StreamId {
    Init = 0,
    Masking = 1,
    Dropout = 2,
    Shuffle = 3,
}

impl StreamId {
    pub const ALL: [StreamId; 4] = [
        StreamId::Init,
        StreamId::Masking,
        StreamId::Dropout,
        StreamId::Shuffle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamId::Init => "init",
            StreamId::Masking => "masking",
            StreamId::Dropout => "dropout",
            StreamId::Shuffle => "shuffle",
        }
    }
}

/// Serializable position of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// One deterministic random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn named(seed: u64, id: StreamId) -> Self {
        Self::new(seed, id as u64)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream);
        s.inner.set_word_pos(state.word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        self.inner.random_range(0..bound as u64) as usize
    }

    /// Normal(0, std) truncated to two standard deviations by rejection.
    pub fn truncated_normal(&mut self, std: f32) -> f32 {
        loop {
            let z: f64 = StandardNormal.sample(&mut self.inner);
            if z.abs() <= 2.0 {
                return (z * std as f64) as f32;
            }
        }
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// The four streams of a training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStreams {
    pub init: RngStream,
    pub masking: RngStream,
    pub dropout: RngStream,
    pub shuffle: RngStream,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            init: RngStream::named(seed, StreamId::Init),
            masking: RngStream::named(seed, StreamId::Masking),
            dropout: RngStream::named(seed, StreamId::Dropout),
            shuffle: RngStream::named(seed, StreamId::Shuffle),
        }
    }

    pub fn get(&self, id: StreamId) -> &RngStream {
        match id {
            StreamId::Init => &self.init,
            StreamId::Masking => &self.masking,
            StreamId::Dropout => &self.dropout,
            StreamId::Shuffle => &self.shuffle,
        }
    }

    pub fn get_mut(&mut self, id: StreamId) -> &mut RngStream {
        match id {
            StreamId::Init => &mut self.init,
            StreamId::Masking => &mut self.masking,
            StreamId::Dropout => &mut self.dropout,
            StreamId::Shuffle => &mut self.shuffle,
        }
    }
}
