//! Seeded synthetic input streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng, Vector};

/// Distribution of synthetic block inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputDistribution {
    /// I.i.d. `N(0, std²)` coordinates.
    Gaussian { std: f64 },
    /// `x = U·z / √k + noise_std·ε` with a fixed Gaussian basis `U` (`d×k`)
    /// drawn from `basis_seed`, `z ~ N(0, I_k)`, `ε ~ N(0, I_d)`. Hidden
    /// states of trained models concentrate near low-dimensional subspaces;
    /// this mimics that.
    LowRank {
        latent_rank: usize,
        noise_std: f64,
        basis_seed: u64,
    },
}

impl Default for InputDistribution {
    fn default() -> Self {
        InputDistribution::Gaussian { std: 1.0 }
    }
}

/// Draws inputs of a fixed width from an [`InputDistribution`].
#[derive(Debug, Clone)]
pub struct InputSampler {
    d: usize,
    dist: InputDistribution,
    basis: Option<Matrix<f32>>,
    rng: Rng,
}

impl InputSampler {
    /// Samples come from `rng`; the low-rank basis, if any, depends only on
    /// the distribution.
    pub fn new(d: usize, dist: InputDistribution, rng: &Rng) -> Result<Self> {
        let basis = match dist {
            InputDistribution::Gaussian { std } => {
                if !(std > 0.0) {
                    return Err(Error::InvalidArgument(format!("input std must be positive, got {std}")));
                }
                None
            }
            InputDistribution::LowRank {
                latent_rank,
                noise_std,
                basis_seed,
            } => {
                if latent_rank == 0 || latent_rank > d || !(noise_std >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "low-rank inputs need 1 <= latent_rank <= {d} and noise_std >= 0"
                    )));
                }
                Some(Matrix::gaussian(d, latent_rank, 1.0, &mut Rng::new(basis_seed))?)
            }
        };
        Ok(Self {
            d,
            dist,
            basis,
            rng: rng.clone(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn sample(&mut self) -> Vector<f32> {
        match (self.dist, &self.basis) {
            (InputDistribution::LowRank { latent_rank, noise_std, .. }, Some(basis)) => {
                let z = Vector::<f32>::gaussian(latent_rank, 1.0, &mut self.rng).expect("unit std");
                let signal = basis.matvec(&z).expect("basis is d x k");
                let scale = 1.0 / (latent_rank as f32).sqrt();
                let noise = if noise_std > 0.0 {
                    Vector::<f32>::gaussian(self.d, noise_std, &mut self.rng).expect("positive std")
                } else {
                    Vector::zeros(self.d)
                };
                Vector::from_fn(self.d, |i| signal[i] * scale + noise[i])
            }
            (InputDistribution::Gaussian { std }, _) => Vector::gaussian(self.d, std, &mut self.rng).expect("validated"),
            _ => unreachable!("basis exists exactly for low-rank inputs"),
        }
    }

    pub fn batch(&mut self, count: usize) -> Vec<Vector<f32>> {
        (0..count).map(|_| self.sample()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let dist = InputDistribution::LowRank {
            latent_rank: 4,
            noise_std: 0.1,
            basis_seed: 0,
        };
        let a = InputSampler::new(16, dist, &Rng::new(3)).unwrap().batch(5);
        let b = InputSampler::new(16, dist, &Rng::new(3)).unwrap().batch(5);
        assert_eq!(a, b);
    }


    /// Determinant of the Gram matrix of three vectors, scaled by its
    /// diagonal; near zero iff they are linearly dependent.
    fn gram_det(xs: [&Vector<f32>; 3]) -> f64 {
        let g = |i: usize, j: usize| -> f64 { xs[i].iter().zip(xs[j].iter()).map(|(&x, &y)| x as f64 * y as f64).sum() };
        let m: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| g(i, j)).collect()).collect();
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        det.abs() / (m[0][0] * m[1][1] * m[2][2])
    }

    #[test]
    fn low_rank_without_noise_spans_latent_subspace() {
        let dist = InputDistribution::LowRank {
            latent_rank: 2,
            noise_std: 0.0,
            basis_seed: 5,
        };
        let xs = InputSampler::new(6, dist, &Rng::new(1)).unwrap().batch(3);
        assert!(gram_det([&xs[0], &xs[1], &xs[2]]) < 1e-4);
    }

    #[test]
    fn sample_seed_does_not_move_the_subspace() {
        let dist = InputDistribution::LowRank {
            latent_rank: 2,
            noise_std: 0.0,
            basis_seed: 9,
        };
        let a = InputSampler::new(5, dist, &Rng::new(1)).unwrap().batch(2);
        let b = InputSampler::new(5, dist, &Rng::new(2)).unwrap().batch(1);
        assert!(gram_det([&a[0], &a[1], &b[0]]) < 1e-4);
        let other = InputDistribution::LowRank {
            latent_rank: 2,
            noise_std: 0.0,
            basis_seed: 10,
        };
        let c = InputSampler::new(5, other, &Rng::new(2)).unwrap().batch(1);
        assert!(gram_det([&a[0], &a[1], &c[0]]) > 1e-3);
    }

    #[test]
    fn rejects_bad_parameters() {
        let rng = Rng::new(0);
        assert!(InputSampler::new(4, InputDistribution::Gaussian { std: 0.0 }, &rng).is_err());
        assert!(InputSampler::new(
            4,
            InputDistribution::LowRank {
                latent_rank: 5,
                noise_std: 0.1,
                basis_seed: 0,
            },
            &rng
        )
        .is_err());
    }
}
