//! Seeded randomness. ChaCha8 is a fixed stream cipher, so a seed yields the
//! same draw sequence on every platform and every run; the full generator
//! state serializes into checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Matrix, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, std * self.standard_normal());
            }
        }
        m
    }

    pub fn normal_vector(&mut self, len: usize, std: f64) -> Vector {
        let mut v = Vector::zeros(len);
        for i in 0..len {
            v.set(i, std * self.standard_normal());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_identical_draws() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..256 {
            assert_eq!(
                a.standard_normal().to_bits(),
                b.standard_normal().to_bits(),
                "streams diverged"
            );
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = SeededRng::new(1);
        let mut b = SeededRng::new(2);
        let same = (0..64)
            .filter(|_| a.standard_normal().to_bits() == b.standard_normal().to_bits())
            .count();
        assert!(same < 8, "seeds 1 and 2 produced near-identical streams");
    }

    #[test]
    fn state_survives_serialization() {
        let mut a = SeededRng::new(7);
        for _ in 0..13 {
            a.standard_normal();
        }
        let json = serde_json::to_string(&a).unwrap();
        let mut b: SeededRng = serde_json::from_str(&json).unwrap();
        for _ in 0..32 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
    }
}
