//! Seeded synthetic Gaussian-mixture data.
//!
//! All randomness comes from `ChaCha8Rng` (20-byte-key ChaCha with 8 rounds,
//! seeded through `seed_from_u64`), with standard normals from `rand_distr`'s
//! ziggurat sampler.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussian::{repair_covariance, GaussianComponent};
use crate::mixture::{Dataset, MixtureModel};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub n: usize,
    pub k_true: usize,
    pub weights: Vec<f64>,
    pub dim: usize,
    /// Means are uniform in `[-mean_scale, mean_scale]^dim`.
    pub mean_scale: f64,
    /// Covariances are `A Aᵀ + cov_scale · I` with `A ~ N(0, (cov_scale / √dim)²)`.
    pub cov_scale: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Ten thousand 10-dimensional points from four components weighted 0.1..0.4.
    pub fn table1(seed: u64) -> Self {
        GeneratorSpec {
            n: 10_000,
            k_true: 4,
            weights: vec![0.1, 0.2, 0.3, 0.4],
            dim: 10,
            mean_scale: 10.0,
            cov_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.weights.len() != self.k_true {
            return Err(Error::Invalid(format!(
                "expected {} weights, got {}",
                self.k_true,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Invalid("weights must be positive".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("weights sum to {s}, not 1")));
        }
        if self.n < self.k_true {
            return Err(Error::Invalid("n must be at least k_true".into()));
        }
        if self.dim == 0 {
            return Err(Error::Invalid("dim must be positive".into()));
        }
        if !(self.mean_scale > 0.0) || !(self.cov_scale > 0.0) {
            return Err(Error::Invalid("scales must be positive".into()));
        }
        Ok(())
    }

    /// Ground truth from `seed` and a dataset from a seed derived from it.
    pub fn generate(&self) -> Result<(MixtureModel, Dataset, Vec<usize>)> {
        let truth = sample_ground_truth(self)?;
        let (data, labels) = sample_dataset(&truth, self.n, derive_seed(self.seed, &[1]))?;
        Ok((truth, data, labels))
    }
}

/// SplitMix64 finalizer, used to derive independent seeds from a base seed.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed of `base` for the path `tags`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// `A Aᵀ + cov_scale · I`.
pub fn covariance_from_factor(a: &DMatrix<f64>, cov_scale: f64) -> DMatrix<f64> {
    let d = a.nrows();
    a * a.transpose() + DMatrix::identity(d, d) * cov_scale
}

pub fn sample_ground_truth(spec: &GeneratorSpec) -> Result<MixtureModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let a_scale = spec.cov_scale / (d as f64).sqrt();
    let mut components = Vec::with_capacity(spec.k_true);
    for &w in &spec.weights {
        let mean = DVector::from_fn(d, |_, _| {
            rng.random_range(-spec.mean_scale..=spec.mean_scale)
        });
        let a = DMatrix::from_fn(d, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * a_scale
        });
        components.push(GaussianComponent {
            weight: w,
            mean,
            cov: repair_covariance(&covariance_from_factor(&a, spec.cov_scale))?,
        });
    }
    let counts = spec.weights.iter().map(|w| w * spec.n as f64).collect();
    MixtureModel::new(components, counts)
}

/// `n` draws from `truth`; also returns the generating component of each row.
pub fn sample_dataset(truth: &MixtureModel, n: usize, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picker = WeightedIndex::new(truth.weights())
        .map_err(|e| Error::Invalid(format!("bad mixture weights: {e}")))?;
    let d = truth.dim();
    let mut points = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut z = DVector::zeros(d);
    for _ in 0..n {
        let k = picker.sample(&mut rng);
        let comp = &truth.components[k];
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = &comp.mean + comp.cov.cholesky_factor() * &z;
        points.extend(x.iter());
        labels.push(k);
    }
    Ok((Dataset::new(points, d)?, labels))
}
