use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose-keyed random streams. Every consumer of randomness owns a stream
/// with a fixed id, so adding or removing one consumer (e.g. disabling the
/// explorer) leaves every other stream's draws untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Init,
    EnvReset,
    Collect,
    ModelSample,
    ImagineExploit,
    ImagineExplorer,
    Eval,
    Buffer,
    Scratch,
}

impl StreamId {
    fn index(self) -> u64 {
        match self {
            StreamId::Init => 1,
            StreamId::EnvReset => 2,
            StreamId::Collect => 3,
            StreamId::ModelSample => 4,
            StreamId::ImagineExploit => 5,
            StreamId::ImagineExplorer => 6,
            StreamId::Eval => 7,
            StreamId::Buffer => 8,
            StreamId::Scratch => 9,
        }
    }
}

/// Counter-based generator whose full state is (seed, stream, word position),
/// which makes checkpoint/restore exact.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self::with_raw_stream(seed, id.index())
    }

    pub fn with_raw_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; one value per call keeps the state
    /// layout simple for checkpointing.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.uniform();
            if u1 > 1e-300 {
                let u2 = self.uniform();
                let r = (-2.0 * u1.ln()).sqrt();
                return r * (std::f64::consts::TAU * u2).cos();
            }
        }
    }

    pub fn gen_range_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Index drawn from an unnormalized non-negative weight row.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let mut u = self.uniform() * total;
        for (i, p) in probs.iter().enumerate() {
            u -= p;
            if u < 0.0 {
                return i;
            }
        }
        probs.len() - 1
    }
}
