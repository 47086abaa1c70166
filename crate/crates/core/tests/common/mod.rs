#![allow(dead_code)]

use mfeig::acv::{AllocationMatrix, CovarianceEstimate, GroupSums, SampleGroup};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random SPD matrix A Aᵀ + 0.1 I with strongly correlated columns.
pub fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let shared: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
    let a = DMatrix::from_fn(dim, dim + 1, |i, j| {
        if j == 0 {
            shared[i]
        } else {
            0.4 * rng.sample::<f64, _>(StandardNormal)
        }
    });
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

pub fn estimate(c: &DMatrix<f64>) -> CovarianceEstimate {
    let n = c.nrows();
    CovarianceEstimate::new(Array2::from_shape_fn((n, n), |(i, j)| c[(i, j)]), 1000).unwrap()
}

/// Random valid allocation over `m` low-fidelity models with a handful of
/// groups of random membership.
pub fn random_allocation(rng: &mut ChaCha8Rng, m: usize) -> AllocationMatrix {
    loop {
        let n_groups = rng.random_range(2..=5);
        let groups = (0..n_groups)
            .map(|_| SampleGroup {
                size: rng.random_range(1..=12),
                z0: rng.random_bool(0.5),
                zstar: (0..m).map(|_| rng.random_bool(0.5)).collect(),
                z: (0..m).map(|_| rng.random_bool(0.5)).collect(),
            })
            .collect();
        if let Ok(a) = AllocationMatrix::new(groups) {
            return a;
        }
    }
}

/// Draws u-vectors ~ N(mean, C) for every sample of every group and
/// returns per-model group sums (all models on all groups).
pub struct GaussianEnsemble {
    pub mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl GaussianEnsemble {
    pub fn new(mean: DVector<f64>, c: &DMatrix<f64>) -> Self {
        let chol = c.clone().cholesky().expect("SPD").l();
        Self { mean, chol }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol * z
    }

    pub fn group_sums(&self, rng: &mut ChaCha8Rng, a: &AllocationMatrix) -> GroupSums {
        let mut sums = vec![vec![Some(0.0); a.groups().len()]; self.dim()];
        for (g, group) in a.groups().iter().enumerate() {
            for _ in 0..group.size {
                let u = self.draw(rng);
                for m in 0..self.dim() {
                    *sums[m][g].as_mut().unwrap() += u[m];
                }
            }
        }
        GroupSums { sums }
    }
}

pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
