//! Seeded Brownian increments on a fine grid, with exact coarsening so every
//! step size and every scheme can be driven by one noise realisation.
//!
//! Stream derivation: the per-path generator is `ChaCha8Rng` seeded with
//! `splitmix64(master_seed + (path_id + 1) · 0x9E3779B97F4A7C15)`, and
//! Gaussians come from `rand_distr::StandardNormal` (ziggurat). Entries are
//! drawn step-major: all `d` components of step 0, then step 1, and so on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Recorded in every output header.
pub const GENERATOR_NAME: &str =
    "ChaCha8Rng(rand_chacha 0.9)+StandardNormal-ziggurat(rand_distr 0.5);stream=splitmix64(seed+(path+1)*0x9E3779B97F4A7C15)";

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the generator for one path.
pub fn stream_seed(master_seed: u64, path_id: u64) -> u64 {
    splitmix64(master_seed.wrapping_add(path_id.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// `steps × d` Brownian increments of variance `delta`, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementGrid {
    master_seed: u64,
    path_id: u64,
    d: usize,
    delta: f64,
    steps: usize,
    increments: Vec<f64>,
}

/// Draws the fine grid for one path.
pub fn generate_grid(master_seed: u64, path_id: u64, d: usize, delta_fine: f64, steps_fine: usize) -> Result<IncrementGrid> {
    if steps_fine == 0 {
        return Err(Error::Argument("steps_fine must be at least 1".into()));
    }
    if !(delta_fine > 0.0) || !delta_fine.is_finite() {
        return Err(Error::Argument(format!("delta_fine must be positive, got {delta_fine}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(master_seed, path_id));
    let scale = delta_fine.sqrt();
    let increments = (0..steps_fine * d)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * scale
        })
        .collect();
    Ok(IncrementGrid {
        master_seed,
        path_id,
        d,
        delta: delta_fine,
        steps: steps_fine,
        increments,
    })
}

impl IncrementGrid {
    /// Wraps externally supplied increments (`steps × d`, step-major).
    pub fn from_increments(d: usize, delta: f64, increments: Vec<f64>) -> Result<Self> {
        if d == 0 && !increments.is_empty() {
            return Err(Error::Argument("d = 0 grid cannot hold increments".into()));
        }
        if d > 0 && increments.len() % d != 0 {
            return Err(Error::Argument(format!(
                "{} increments do not form rows of width {d}",
                increments.len()
            )));
        }
        let steps = if d == 0 { 0 } else { increments.len() / d };
        Ok(Self {
            master_seed: 0,
            path_id: 0,
            d,
            delta,
            steps,
            increments,
        })
    }

    /// Grid of `steps` all-zero increments.
    pub fn zeros(d: usize, delta: f64, steps: usize) -> Self {
        Self {
            master_seed: 0,
            path_id: 0,
            d,
            delta,
            steps,
            increments: vec![0.0; d * steps],
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path_id(&self) -> u64 {
        self.path_id
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increment `z` of step `k`, length `d`.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.increments[k * self.d..(k + 1) * self.d]
    }

    /// Increments for step `factor · delta`.
    ///
    /// A factor `2^k · r` (odd `r`) is applied as `k` successive pairwise
    /// halvings followed by a left-to-right sum over blocks of `r`. So
    /// `coarsen(f₁ f₂)` equals `coarsen(f₁).coarsen(f₂)` bit-for-bit whenever
    /// `f₁` is a power of two.
    pub fn coarsen(&self, factor: usize) -> Result<IncrementGrid> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::Argument(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.steps
            )));
        }
        let mut grid = self.clone();
        let mut rest = factor;
        while rest % 2 == 0 {
            grid = grid.block_sum(2);
            rest /= 2;
        }
        if rest > 1 {
            grid = grid.block_sum(rest);
        }
        Ok(grid)
    }

    fn block_sum(&self, block: usize) -> IncrementGrid {
        let d = self.d;
        let steps = self.steps / block;
        let mut out = vec![0.0; steps * d];
        for (k, dst) in out.chunks_exact_mut(d.max(1)).enumerate().take(steps) {
            if d == 0 {
                break;
            }
            dst.copy_from_slice(self.row(k * block));
            for i in 1..block {
                for (acc, v) in dst.iter_mut().zip(self.row(k * block + i)) {
                    *acc += v;
                }
            }
        }
        IncrementGrid {
            master_seed: self.master_seed,
            path_id: self.path_id,
            d,
            delta: self.delta * block as f64,
            steps,
            increments: out,
        }
    }
}
