//! Multivariate Gaussian densities and covariance hygiene.
//!
//! Every covariance held by a learner goes through [`repair_covariance`], which
//! symmetrizes the raw matrix and climbs a small jitter ladder until a
//! Cholesky factorization succeeds. Densities are evaluated in the log domain
//! through the cached triangular factor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Jitter multipliers applied to `trace / dim`, tried in order.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-9, 1e-6, 1e-3];

/// A pivot smaller than this fraction of the largest diagonal entry is treated
/// as a factorization failure.
const PIVOT_RTOL: f64 = 1e-12;

/// Symmetric positive-definite covariance with its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    entries: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
    jitter: f64,
}

impl CovarianceMatrix {
    pub fn identity(dim: usize) -> Self {
        repair_covariance(&DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Lower-triangular `L` with `L * L^T == entries`.
    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// The diagonal shift that was added during repair.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `(x - mean)^T Σ^{-1} (x - mean)` by forward substitution on the factor.
    pub fn mahalanobis_sq(&self, x: &[f64], mean: &[f64]) -> f64 {
        let d = self.dim();
        let mut z = vec![0.0; d];
        let mut acc = 0.0;
        for i in 0..d {
            let mut v = x[i] - mean[i];
            for j in 0..i {
                v -= self.chol[(i, j)] * z[j];
            }
            v /= self.chol[(i, i)];
            z[i] = v;
            acc += v * v;
        }
        acc
    }

    /// Packed lower triangle, row-major: `(0,0), (1,0), (1,1), (2,0), ...`.
    pub fn lower_triangle(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                out.push(self.entries[(i, j)]);
            }
        }
        out
    }

    pub fn from_lower_triangle(dim: usize, packed: &[f64]) -> Result<Self> {
        if packed.len() != dim * (dim + 1) / 2 {
            return Err(Error::Dimension {
                expected: dim * (dim + 1) / 2,
                got: packed.len(),
            });
        }
        let mut m = DMatrix::zeros(dim, dim);
        let mut it = packed.iter();
        for i in 0..dim {
            for j in 0..=i {
                let v = *it.next().unwrap();
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        repair_covariance(&m)
    }
}

/// Lower Cholesky factor, or `None` if a pivot is not safely positive.
fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = a.nrows();
    let max_diag = (0..d).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    if !(max_diag > 0.0) || !max_diag.is_finite() {
        return None;
    }
    let floor = PIVOT_RTOL * max_diag;
    let mut l = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) {
            return None;
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Some(l)
}

/// Symmetrize `raw` and add the smallest ladder jitter that makes it factorizable.
pub fn repair_covariance(raw: &DMatrix<f64>) -> Result<CovarianceMatrix> {
    let d = raw.nrows();
    if raw.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: raw.ncols(),
        });
    }
    if d == 0 {
        return Err(Error::Invalid("empty covariance".into()));
    }
    let mut sym = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            sym[(i, j)] = 0.5 * (raw[(i, j)] + raw[(j, i)]);
        }
    }
    let trace = sym.trace();
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance { dim: d, trace });
    }
    let scale = trace / d as f64;
    for &rung in JITTER_LADDER.iter() {
        let jitter = rung * scale;
        if rung > 0.0 && !(jitter > 0.0) {
            break;
        }
        let mut candidate = sym.clone();
        for i in 0..d {
            candidate[(i, i)] += jitter;
        }
        if let Some(chol) = cholesky_lower(&candidate) {
            let log_det = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
            return Ok(CovarianceMatrix {
                entries: candidate,
                chol,
                log_det,
                jitter,
            });
        }
    }
    Err(Error::SingularCovariance { dim: d, trace })
}

/// One weighted Gaussian component of a mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: CovarianceMatrix,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: DVector<f64>, cov: CovarianceMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Dimension {
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        Ok(GaussianComponent { weight, mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `log N(x | mean, cov)`; the caller guarantees `x.len() == dim`.
    #[inline]
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let q = self.cov.mahalanobis_sq(x, self.mean.as_slice());
        -0.5 * (d * (2.0 * PI).ln() + self.cov.log_det() + q)
    }
}

/// `log N(x | μ, Σ)` for a component, checking dimensions.
pub fn log_pdf(x: &[f64], comp: &GaussianComponent) -> Result<f64> {
    if x.len() != comp.dim() {
        return Err(Error::Dimension {
            expected: comp.dim(),
            got: x.len(),
        });
    }
    Ok(comp.log_density(x))
}

/// `log Σ exp(v)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalize log-weights in place into probabilities; returns the log normalizer.
pub fn normalize_log_weights(logw: &mut [f64]) -> f64 {
    let lse = log_sum_exp(logw);
    for v in logw.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}
