//! Conjugate inference for isotropic Gaussian class models.
//!
//! Every class mean carries a Gaussian belief stored in natural parameters
//! `(q, lambda)` with `q = mean / variance` and `lambda = 1 / variance`.
//! Observations are isotropic Gaussian around the class mean with a fixed
//! noise variance, so conditioning is an O(d) addition and the posterior
//! predictive stays isotropic.

use serde::{Deserialize, Serialize};

use crate::error::{FlowrError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Isotropic Gaussian `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropicGaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl IsotropicGaussian {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(FlowrError::Config(format!(
                "variance must be positive and finite, got {variance}"
            )));
        }
        if mean.is_empty() || mean.iter().any(|v| !v.is_finite()) {
            return Err(FlowrError::Config("mean must be non-empty and finite".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Natural-parameter form of this Gaussian.
    pub fn to_natural(&self) -> NaturalStats {
        factor_to_natural(self)
    }

    /// `log N(z; mean, variance * I)`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        log_density(self, z)
    }
}

/// Gaussian belief in natural parameters: `q = Σ⁻¹μ`, `Λ = lambda · I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalStats {
    pub q: Vec<f64>,
    pub lambda: f64,
}

impl NaturalStats {
    pub fn new(q: Vec<f64>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(FlowrError::Config(format!(
                "precision must be positive and finite, got {lambda}"
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(FlowrError::Config("q must be finite".into()));
        }
        Ok(Self { q, lambda })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.q.iter().map(|v| v / self.lambda).collect()
    }

    pub fn to_moment(&self) -> IsotropicGaussian {
        natural_to_moment(self)
    }

    /// Condition on one observation; see [`condition`].
    pub fn condition(&self, z: &[f64], noise: NoiseModel) -> Result<NaturalStats> {
        condition(self, z, noise)
    }

    /// In-place form of [`condition`].
    pub fn condition_in_place(&mut self, z: &[f64], noise: NoiseModel) -> Result<()> {
        check_dim(self.q.len(), z.len())?;
        let precision = noise.precision();
        for (qi, zi) in self.q.iter_mut().zip(z) {
            *qi += precision * zi;
        }
        self.lambda += precision;
        Ok(())
    }

    pub fn predictive(&self, noise: NoiseModel) -> IsotropicGaussian {
        posterior_predictive(self, noise)
    }
}

/// Observation noise `σε²`, shared by every class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub variance: f64,
}

impl NoiseModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(FlowrError::Config(format!(
                "noise variance must be positive and finite, got {variance}"
            )));
        }
        Ok(Self { variance })
    }

    pub fn precision(&self) -> f64 {
        1.0 / self.variance
    }
}

/// The single Gaussian prior over class means used to instantiate every new
/// class and to score the novel slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedPrior {
    pub stats: NaturalStats,
}

impl SharedPrior {
    pub fn new(stats: NaturalStats) -> Self {
        Self { stats }
    }

    /// Prior from moment parameters `N(mean, variance * I)`.
    pub fn from_moments(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Ok(Self {
            stats: IsotropicGaussian::new(mean, variance)?.to_natural(),
        })
    }

    /// Zero-mean prior with the given variance.
    pub fn centered(dim: usize, variance: f64) -> Result<Self> {
        Self::from_moments(vec![0.0; dim], variance)
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    /// Predictive density of an embedding drawn from a brand-new class.
    pub fn predictive(&self, noise: NoiseModel) -> IsotropicGaussian {
        posterior_predictive(&self.stats, noise)
    }
}

pub fn factor_to_natural(g: &IsotropicGaussian) -> NaturalStats {
    let lambda = 1.0 / g.variance;
    NaturalStats {
        q: g.mean.iter().map(|m| m * lambda).collect(),
        lambda,
    }
}

pub fn natural_to_moment(s: &NaturalStats) -> IsotropicGaussian {
    IsotropicGaussian {
        mean: s.mean(),
        variance: 1.0 / s.lambda,
    }
}

/// One recursive conjugate update: `q += z / σε²`, `lambda += 1 / σε²`.
pub fn condition(s: &NaturalStats, z: &[f64], noise: NoiseModel) -> Result<NaturalStats> {
    let mut out = s.clone();
    out.condition_in_place(z, noise)?;
    Ok(out)
}

/// Closed-form posterior after all of `zs`, computed from the summed
/// observations rather than by recursion.
pub fn batch_posterior<Z: AsRef<[f64]>>(prior: &SharedPrior, zs: &[Z], noise: NoiseModel) -> Result<NaturalStats> {
    let d = prior.dim();
    let mut sum = vec![0.0; d];
    for z in zs {
        let z = z.as_ref();
        check_dim(d, z.len())?;
        for (s, v) in sum.iter_mut().zip(z) {
            *s += v;
        }
    }
    let precision = noise.precision();
    let k = zs.len() as f64;
    Ok(NaturalStats {
        q: prior
            .stats
            .q
            .iter()
            .zip(&sum)
            .map(|(q0, s)| q0 + precision * s)
            .collect(),
        lambda: prior.stats.lambda + k * precision,
    })
}

/// `N(q / lambda, (1 / lambda + σε²) I)`.
pub fn posterior_predictive(s: &NaturalStats, noise: NoiseModel) -> IsotropicGaussian {
    IsotropicGaussian {
        mean: s.mean(),
        variance: 1.0 / s.lambda + noise.variance,
    }
}

pub fn log_density(g: &IsotropicGaussian, z: &[f64]) -> f64 {
    debug_assert_eq!(g.mean.len(), z.len());
    log_density_parts(sq_dist(z, &g.mean), g.variance, z.len())
}

/// Log density given the squared distance to the mean.
pub(crate) fn log_density_parts(sq_dist: f64, variance: f64, dim: usize) -> f64 {
    -0.5 * dim as f64 * (LN_2PI + variance.ln()) - sq_dist / (2.0 * variance)
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(FlowrError::DimensionMismatch { expected, actual })
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable `log Σ exp(x_i)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalize log weights into probabilities, in place.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
}
