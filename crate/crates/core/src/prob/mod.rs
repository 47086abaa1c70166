//! Random streams, prior and noise distributions.

mod stream;

pub use stream::{derive_stream, RngStream};

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One independent prior component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Marginal {
    Uniform { lower: f64, upper: f64 },
    Normal { mean: f64, std_dev: f64 },
}

impl Marginal {
    fn validate(&self) -> Result<()> {
        match *self {
            Marginal::Uniform { lower, upper } => {
                if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                    return Err(Error::InvalidSpec(format!(
                        "uniform prior needs finite lower < upper, got [{lower}, {upper}]"
                    )));
                }
            }
            Marginal::Normal { mean, std_dev } => {
                if !(mean.is_finite() && std_dev.is_finite() && std_dev > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "normal prior needs finite mean and std_dev > 0, got ({mean}, {std_dev})"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Marginal::Uniform { lower, upper } => {
                let u: f64 = rng.random();
                (lower + (upper - lower) * u).clamp(lower, upper)
            }
            Marginal::Normal { mean, std_dev } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std_dev * z
            }
        }
    }
}

/// Prior over the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorSpec {
    /// Independent components.
    Independent(Vec<Marginal>),
    /// Uniform resampling of a fixed set of parameter rows, used when forward
    /// models only exist as tables evaluated at those rows.
    Empirical(Arc<Array2<f64>>),
}

impl PriorSpec {
    pub fn uniform(bounds: &[(f64, f64)]) -> Self {
        PriorSpec::Independent(
            bounds
                .iter()
                .map(|&(lower, upper)| Marginal::Uniform { lower, upper })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSpec::Independent(m) => m.len(),
            PriorSpec::Empirical(rows) => rows.ncols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PriorSpec::Independent(marginals) => {
                if marginals.is_empty() {
                    return Err(Error::InvalidSpec("prior has no components".into()));
                }
                marginals.iter().try_for_each(Marginal::validate)
            }
            PriorSpec::Empirical(rows) => {
                if rows.nrows() == 0 || rows.ncols() == 0 {
                    return Err(Error::InvalidSpec("empirical prior is empty".into()));
                }
                if rows.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec("empirical prior has non-finite rows".into()));
                }
                Ok(())
            }
        }
    }

    /// Fills `out` (row-major, `out.len() / dim` rows) from `rng`. Rows are
    /// drawn in order, so a shorter request is a prefix of a longer one.
    pub(crate) fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            PriorSpec::Independent(marginals) => {
                for row in out.chunks_exact_mut(marginals.len()) {
                    for (slot, m) in row.iter_mut().zip(marginals) {
                        *slot = m.draw(rng);
                    }
                }
            }
            PriorSpec::Empirical(rows) => {
                let n_rows = rows.nrows();
                for row in out.chunks_exact_mut(rows.ncols()) {
                    let idx = rng.random_range(0..n_rows);
                    row.iter_mut()
                        .zip(rows.row(idx).iter())
                        .for_each(|(s, v)| *s = *v);
                }
            }
        }
    }
}

/// Draws `n` i.i.d. parameter vectors (one per row).
pub fn sample_prior(prior: &PriorSpec, rng: &RngStream, n: usize) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::InvalidSpec("sample_prior needs n >= 1".into()));
    }
    prior.validate()?;
    let dim = prior.dim();
    let mut data = vec![0.0; n * dim];
    prior.fill(&mut rng.generator(), &mut data);
    Ok(Array2::from_shape_vec((n, dim), data).expect("shape matches buffer"))
}

/// Per-design override of the noise standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSigma {
    pub design: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub sigma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_design: Vec<DesignSigma>,
}

/// Observation noise distribution p(ε | ξ); zero-mean, diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian(GaussianNoise),
}

impl NoiseSpec {
    pub fn gaussian(sigma: Vec<f64>) -> Self {
        NoiseSpec::Gaussian(GaussianNoise {
            sigma,
            per_design: Vec::new(),
        })
    }

    pub fn with_design_sigma(mut self, design: Vec<f64>, sigma: Vec<f64>) -> Self {
        let NoiseSpec::Gaussian(g) = &mut self;
        g.per_design.push(DesignSigma { design, sigma });
        self
    }

    pub fn dim(&self) -> usize {
        let NoiseSpec::Gaussian(g) = self;
        g.sigma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let NoiseSpec::Gaussian(g) = self;
        let check = |sigma: &[f64]| -> Result<()> {
            if sigma.len() != g.sigma.len() {
                return Err(Error::InvalidSpec(
                    "per-design sigma has the wrong dimension".into(),
                ));
            }
            if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Error::InvalidSpec(format!(
                    "noise sigma must be finite and > 0, got {sigma:?}"
                )));
            }
            Ok(())
        };
        if g.sigma.is_empty() {
            return Err(Error::InvalidSpec("noise has dimension 0".into()));
        }
        check(&g.sigma)?;
        g.per_design.iter().try_for_each(|d| check(&d.sigma))
    }

    /// Standard deviations at design `design`.
    pub fn sigma_at(&self, design: &[f64]) -> &[f64] {
        let NoiseSpec::Gaussian(g) = self;
        g.per_design
            .iter()
            .find(|d| d.design.as_slice() == design)
            .map(|d| d.sigma.as_slice())
            .unwrap_or(&g.sigma)
    }

    /// Maps standard-normal draws to noise at `design`. Sampling at several
    /// designs from the same stream therefore shares the underlying draws.
    #[inline]
    pub(crate) fn scale_into(&self, design: &[f64], standard: &[f64], out: &mut [f64]) {
        let sigma = self.sigma_at(design);
        for ((o, z), s) in out.iter_mut().zip(standard).zip(sigma) {
            *o = s * z;
        }
    }
}

/// `n × dim` standard-normal draws.
pub(crate) fn standard_normal(rng: &RngStream, n: usize, dim: usize) -> Array2<f64> {
    let mut gen = rng.generator();
    let data: Vec<f64> = (0..n * dim).map(|_| gen.sample(StandardNormal)).collect();
    Array2::from_shape_vec((n, dim), data).expect("shape matches buffer")
}

/// Draws `n` i.i.d. noise vectors from p(ε | ξ).
pub fn sample_noise(
    noise: &NoiseSpec,
    design: &[f64],
    rng: &RngStream,
    n: usize,
) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::InvalidSpec("sample_noise needs n >= 1".into()));
    }
    noise.validate()?;
    let dim = noise.dim();
    let standard = standard_normal(rng, n, dim);
    let mut out = Array2::zeros((n, dim));
    for (mut o, z) in out.rows_mut().into_iter().zip(standard.rows()) {
        noise.scale_into(
            design,
            z.as_slice().expect("standard layout"),
            o.as_slice_mut().expect("standard layout"),
        );
    }
    Ok(out)
}

/// Exact log-density of the noise at `eps`.
pub fn log_density_noise(noise: &NoiseSpec, design: &[f64], eps: &[f64]) -> Result<f64> {
    if eps.len() != noise.dim() {
        return Err(Error::InvalidSpec(format!(
            "noise vector has dimension {}, expected {}",
            eps.len(),
            noise.dim()
        )));
    }
    if eps.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("noise vector"));
    }
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    Ok(eps
        .iter()
        .zip(noise.sigma_at(design))
        .map(|(e, s)| {
            let z = e / s;
            -0.5 * z * z - s.ln() - half_ln_2pi
        })
        .sum())
}
