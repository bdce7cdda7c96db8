//! Counter-based Gaussian increments.
//!
//! Every normal draw is addressed by `(seed, path, step, component)`: the
//! ChaCha stream is selected by the path index and the word position by the
//! step, so any single increment can be regenerated without replaying the
//! ones before it. This makes ensembles independent of how paths are split
//! across worker threads, lets two start points share the exact same noise,
//! and lets a coarse grid reuse the sums of fine-grid increments.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::forward::TimeGrid;

/// Source of Brownian increments for one path on a given grid.
pub trait IncrementSource: Sync {
    /// Fills `out` (length `grid.steps() * k`, step-major) with the increments
    /// `B_{r_{s+1}} - B_{r_s}` of path `path`.
    fn fill(&self, path: u64, grid: &TimeGrid, k: usize, out: &mut [f64]);

    /// Seed recorded in the bundle metadata.
    fn seed(&self) -> u64;
}

/// Standard normals keyed on `(seed, path, step, component)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterNormals {
    seed: u64,
}

impl CounterNormals {
    pub fn new(seed: u64) -> Self {
        CounterNormals { seed }
    }

    fn key(&self) -> [u8; 32] {
        // SplitMix64 expansion of the seed into a 256-bit ChaCha key.
        let mut state = self.seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            chunk.copy_from_slice(&z.to_le_bytes());
        }
        key
    }

    /// Generator positioned at the start of `path`.
    pub fn path_stream(&self, path: u64) -> PathNormals {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(path);
        PathNormals { rng }
    }

    /// Writes standard normals for `step` into `out`.
    pub fn step_normals(&self, path: u64, step: u64, out: &mut [f64]) {
        self.path_stream(path).fill_step(step, out);
    }
}

/// Per-path handle; cheap random access to any step.
pub struct PathNormals {
    rng: ChaCha8Rng,
}

impl PathNormals {
    /// Box-Muller consumes a fixed number of words per step, so positions are
    /// a pure function of the step index.
    pub fn fill_step(&mut self, step: u64, out: &mut [f64]) {
        let pairs = out.len().div_ceil(2) as u128;
        // two u64 (= four u32 words) per Box-Muller pair
        self.rng.set_word_pos(step as u128 * pairs * 4);
        let mut i = 0;
        while i < out.len() {
            let (z0, z1) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            out[i] = z0;
            if i + 1 < out.len() {
                out[i + 1] = z1;
            }
            i += 2;
        }
    }
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

impl IncrementSource for CounterNormals {
    fn fill(&self, path: u64, grid: &TimeGrid, k: usize, out: &mut [f64]) {
        let sd = grid.dt().sqrt();
        let mut stream = self.path_stream(path);
        for (s, chunk) in out.chunks_exact_mut(k).enumerate() {
            stream.fill_step(s as u64, chunk);
            chunk.iter_mut().for_each(|v| *v *= sd);
        }
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}

/// Increments on a coarse grid built by summing `factor` consecutive
/// increments of the refined grid with `factor * steps` steps. Simulating on
/// `grid` with `Nested { factor: 2 }` and on the doubled grid with the plain
/// source uses the same Brownian path.
#[derive(Debug, Clone, Copy)]
pub struct Nested {
    pub base: CounterNormals,
    pub factor: usize,
}

impl IncrementSource for Nested {
    fn fill(&self, path: u64, grid: &TimeGrid, k: usize, out: &mut [f64]) {
        let fine = TimeGrid::uniform(grid.horizon(), grid.steps() * self.factor)
            .expect("refined grid of a valid grid is valid");
        let mut buf = vec![0.0; fine.steps() * k];
        self.base.fill(path, &fine, k, &mut buf);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (s, chunk) in buf.chunks_exact(k).enumerate() {
            let coarse = s / self.factor;
            for (j, v) in chunk.iter().enumerate() {
                out[coarse * k + j] += v;
            }
        }
    }

    fn seed(&self) -> u64 {
        self.base.seed
    }
}

/// Derives an independent child seed; used for pilot runs and test processes.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic uniform stream for sampling-based checks.
pub fn uniform_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_access_matches_sequential() {
        let src = CounterNormals::new(7);
        let grid = TimeGrid::uniform(1.0, 16).unwrap();
        let mut all = vec![0.0; 16 * 3];
        src.fill(5, &grid, 3, &mut all);
        let mut one = [0.0; 3];
        src.step_normals(5, 11, &mut one);
        let sd = grid.dt().sqrt();
        for j in 0..3 {
            assert_eq!(all[11 * 3 + j], one[j] * sd);
        }
    }

    #[test]
    fn paths_and_seeds_differ() {
        let src = CounterNormals::new(1);
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        src.step_normals(0, 0, &mut a);
        src.step_normals(1, 0, &mut b);
        assert_ne!(a, b);
        CounterNormals::new(2).step_normals(0, 0, &mut b);
        assert_ne!(a, b);
    }

    #[test]
    fn moments_are_standard() {
        let src = CounterNormals::new(42);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let n = 200_000usize;
        let mut buf = [0.0; 1];
        for i in 0..n {
            src.step_normals(i as u64 % 97, i as u64 / 97, &mut buf);
            sum += buf[0];
            sq += buf[0] * buf[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn nested_sums_fine_increments() {
        let base = CounterNormals::new(3);
        let coarse = TimeGrid::uniform(1.0, 4).unwrap();
        let fine = TimeGrid::uniform(1.0, 8).unwrap();
        let mut c = vec![0.0; 4];
        let mut f = vec![0.0; 8];
        Nested { base, factor: 2 }.fill(0, &coarse, 1, &mut c);
        base.fill(0, &fine, 1, &mut f);
        for s in 0..4 {
            assert_eq!(c[s], f[2 * s] + f[2 * s + 1]);
        }
    }
}
