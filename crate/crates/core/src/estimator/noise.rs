//! Zero-mean Gaussian draws shaped by an estimator covariance.

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::spatial::Vec6;

use super::Mat6;

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("covariance is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("covariance has non-finite entries")]
    NonFinite,
}

/// Square-root factor `L = V sqrt(max(Lambda, 0))` of a symmetric PSD matrix, so
/// `L z` with `z ~ N(0, I)` has covariance `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSampler {
    factor: Mat6,
}

impl NoiseSampler {
    pub fn new(p: &Mat6) -> Result<Self, NoiseError> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(NoiseError::NonFinite);
        }
        let sym = (p + p.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let min = eig.eigenvalues.min();
        let scale = eig.eigenvalues.amax().max(1.0);
        if min < -1e-9 * scale {
            return Err(NoiseError::NotPsd(min));
        }
        let sqrt_diag = Mat6::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        Ok(Self { factor: eig.eigenvectors * sqrt_diag })
    }

    pub fn factor(&self) -> &Mat6 {
        &self.factor
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec6 {
        let z = Vec6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        self.factor * z
    }
}

/// One draw from `N(0, P)`.
pub fn sample_observation_noise<R: Rng + ?Sized>(p: &Mat6, rng: &mut R) -> Result<Vec6, NoiseError> {
    Ok(NoiseSampler::new(p)?.sample(rng))
}
