//! Ground-truth instance generation for simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NmixError, Result};
use crate::linalg::{uniform_matrix, uniform_vector};
use crate::model::{sample_network, CountDataset, DetectionModel, FactorModel, FeatureSet, LatentCounts};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DetectionMode {
    /// `z_ij ~ Uniform(0, 1)^R`, `alpha` random and rescaled.
    Features,
    /// `z_ij = 1`, `R = 1`, `alpha = [p]`.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rank: usize,
    pub n_features: usize,
    /// Factor entries are drawn from `Uniform(0, gamma)`.
    pub gamma: f64,
    pub target_max_p: f64,
    pub detection: DetectionMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_rows: 50,
            n_cols: 50,
            rank: 15,
            n_features: 8,
            gamma: 15.0,
            target_max_p: 0.9,
            detection: DetectionMode::Features,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 || self.rank == 0 {
            return Err(NmixError::invalid("dimensions and rank must be positive"));
        }
        if self.rank > self.n_rows.min(self.n_cols) {
            return Err(NmixError::invalid(format!(
                "rank {} exceeds min(rows, cols) = {}",
                self.rank,
                self.n_rows.min(self.n_cols)
            )));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(NmixError::invalid("gamma must be positive"));
        }
        if !(self.target_max_p > 0.0 && self.target_max_p <= 1.0) {
            return Err(NmixError::invalid("target_max_p must lie in (0, 1]"));
        }
        match self.detection {
            DetectionMode::Features if self.n_features == 0 => {
                Err(NmixError::invalid("at least one feature is required"))
            }
            DetectionMode::Constant(p) if !(0.0..=1.0).contains(&p) => {
                Err(NmixError::invalid("constant detection probability must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthInstance {
    pub factors: FactorModel,
    pub alpha: DVector<f64>,
    pub features: FeatureSet,
    pub detection: DetectionModel,
}

/// Overwrite `rank` distinct random rows with `gamma * e_k`.
fn plant_separable_rows(rng: &mut ChaCha8Rng, m: &mut DMatrix<f64>, gamma: f64) {
    let rank = m.ncols();
    let rows = sample(rng, m.nrows(), rank);
    for (k, r) in rows.iter().enumerate() {
        m.row_mut(r).fill(0.0);
        m[(r, k)] = gamma;
    }
}

pub fn generate_instance(config: &SynthConfig) -> Result<SynthInstance> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (ni, nj, f) = (config.n_rows, config.n_cols, config.rank);

    let mut u = uniform_matrix(&mut rng, ni, f, 0.0, config.gamma);
    let mut v = uniform_matrix(&mut rng, nj, f, 0.0, config.gamma);
    plant_separable_rows(&mut rng, &mut u, config.gamma);
    plant_separable_rows(&mut rng, &mut v, config.gamma);
    let factors = FactorModel::new(u, v)?;

    let (features, alpha) = match config.detection {
        DetectionMode::Constant(p) => (FeatureSet::constant(ni, nj), DVector::from_element(1, p)),
        DetectionMode::Features => {
            let z = uniform_matrix(&mut rng, ni * nj, config.n_features, 0.0, 1.0);
            let mut alpha = uniform_vector(&mut rng, config.n_features, 0.0, 1.0);
            let m = (&z * &alpha).max();
            alpha *= config.target_max_p / m;
            (FeatureSet::new(z, ni, nj)?, alpha)
        }
    };
    let detection = DetectionModel::from_alpha(&features, alpha.clone())?;
    Ok(SynthInstance { factors, alpha, features, detection })
}

/// Generate an instance and draw one network from it. Observation noise
/// uses a seed derived from `config.seed`.
pub fn simulate(config: &SynthConfig) -> Result<(SynthInstance, LatentCounts, CountDataset)> {
    let instance = generate_instance(config)?;
    let noise_seed = config.seed ^ 0x9E37_79B9_7F4A_7C15;
    let (latent, observed) = sample_network(&instance.factors, &instance.detection, noise_seed)?;
    Ok((instance, latent, observed))
}
