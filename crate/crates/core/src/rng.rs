//! Counter-addressed Gaussian streams.
//!
//! Every normal draw is a pure function of `(seed, path, step, slot)`: the path index
//! selects a ChaCha8 stream and the step index fixes the word position, each step
//! consuming a fixed number of words. Results therefore do not depend on how paths are
//! split across threads.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const REFINE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
/// Words reserved per step on the refinement stream (room for 2^16 extra normals).
const REFINE_STRIDE_WORDS: u128 = 4 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Cursor over the main stream of `path`, yielding blocks of `width` normals per step.
    pub fn path_cursor(&self, path: u64, width: usize) -> PathCursor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path);
        PathCursor { rng, width, words_per_step: words_for(width) }
    }

    /// Independent stream used to bridge-refine step `step` of `path`.
    pub fn refinement(&self, path: u64, step: u64) -> NormalSource {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ REFINE_SALT);
        rng.set_stream(path);
        rng.set_word_pos(step as u128 * REFINE_STRIDE_WORDS);
        NormalSource { rng, spare: None }
    }
}

fn words_for(width: usize) -> u128 {
    // two u64 (four u32 words) per Box-Muller pair
    4 * width.div_ceil(2) as u128
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let u1 = ((a >> 11) as f64 + 1.0) * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

pub struct PathCursor {
    rng: ChaCha8Rng,
    width: usize,
    words_per_step: u128,
}

impl PathCursor {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seek(&mut self, step: u64) {
        self.rng.set_word_pos(step as u128 * self.words_per_step);
    }

    /// Fills `out` (length `width`) with the next step's normals.
    pub fn next_block(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.width);
        let mut i = 0;
        while i < self.width {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            out[i] = z0;
            if i + 1 < self.width {
                out[i + 1] = z1;
            }
            i += 2;
        }
    }
}

/// Plain sequential normal source.
pub struct NormalSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
        self.spare = Some(z1);
        z0
    }
}
