//! Sources of standard-normal draws for stochastic forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::Matrix;

#[derive(Debug, Clone)]
enum Mode {
    Sampled(ChaCha8Rng),
    Recording { rng: ChaCha8Rng, tape: Vec<Matrix> },
    Replay { tape: Vec<Matrix>, cursor: usize },
    Zero,
}

/// Per-instance noise stream. `frozen` records its draws so that a forward
/// pass can be rebuilt with identical noise after [`NoiseSource::rewind`].
#[derive(Debug, Clone)]
pub struct NoiseSource {
    mode: Mode,
}

impl NoiseSource {
    pub fn seeded(seed: u64) -> Self {
        Self {
            mode: Mode::Sampled(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn frozen(seed: u64) -> Self {
        Self {
            mode: Mode::Recording {
                rng: ChaCha8Rng::seed_from_u64(seed),
                tape: Vec::new(),
            },
        }
    }

    /// Every draw is zero: predictions collapse to the posterior mean.
    pub fn zero() -> Self {
        Self { mode: Mode::Zero }
    }

    /// Replay recorded draws from the beginning. No-op for other modes.
    pub fn rewind(&mut self) {
        self.mode = match std::mem::replace(&mut self.mode, Mode::Zero) {
            Mode::Recording { tape, .. } | Mode::Replay { tape, .. } => Mode::Replay { tape, cursor: 0 },
            other => other,
        };
    }

    pub fn standard_normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let fresh = |rng: &mut ChaCha8Rng| {
            Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
        };
        match &mut self.mode {
            Mode::Sampled(rng) => fresh(rng),
            Mode::Recording { rng, tape } => {
                let m = fresh(rng);
                tape.push(m.clone());
                m
            }
            Mode::Replay { tape, cursor } => {
                let m = tape
                    .get(*cursor)
                    .unwrap_or_else(|| panic!("frozen noise exhausted after {cursor} draws"));
                assert_eq!(
                    m.dim(),
                    (rows, cols),
                    "frozen noise replayed with a different draw shape"
                );
                *cursor += 1;
                m.clone()
            }
            Mode::Zero => Matrix::zeros((rows, cols)),
        }
    }

    pub fn standard_normal_scalar(&mut self) -> f64 {
        self.standard_normal(1, 1)[[0, 0]]
    }
}
