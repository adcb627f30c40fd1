//! Mixture state, the batch EM learner and exact log-likelihood.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{log_sum_exp, normalize_log_weights, repair_covariance, GaussianComponent};
use crate::trace::{relative_change, FicTrace};

/// Rows below this many are processed sequentially; rayon overhead dominates otherwise.
const PAR_ROW_THRESHOLD: usize = 4096;

/// Soft counts below this are degenerate for a `dim`-dimensional component.
pub fn count_floor(dim: usize) -> f64 {
    (dim as f64 * 1e-6).max(1e-8)
}

/// An `n × dim` matrix of observations, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<f64>,
    n: usize,
    dim: usize,
}

impl Dataset {
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("dataset dimension must be positive".into()));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Invalid(format!(
                "{} values do not form rows of width {dim}",
                points.len()
            )));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value in row {}",
                pos / dim
            )));
        }
        let n = points.len() / dim;
        Ok(Dataset { points, n, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(rows.concat(), dim)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    /// This dataset followed by `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.dim != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        Dataset::new(points, self.dim)
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        m / self.n as f64
    }

    /// Maximum-likelihood (divide by `n`) covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut s = DMatrix::zeros(self.dim, self.dim);
        for r in self.rows() {
            let d = DVector::from_column_slice(r) - &m;
            s += &d * d.transpose();
        }
        s / self.n as f64
    }
}

/// Cached per-datum responsibilities `γ(z_nk)` / variational `q(z_nc)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityTable {
    gamma: Vec<f64>,
    n: usize,
    c: usize,
    visited: Vec<bool>,
}

impl ResponsibilityTable {
    /// All-zero, unvisited table.
    pub fn new(n: usize, c: usize) -> Self {
        ResponsibilityTable {
            gamma: vec![0.0; n * c],
            n,
            c,
            visited: vec![false; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Invalid("ragged responsibility rows".into()));
        }
        Ok(ResponsibilityTable {
            gamma: rows.concat(),
            n: rows.len(),
            c,
            visited: vec![true; rows.len()],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_components(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.c..(i + 1) * self.c]
    }

    pub fn set_row(&mut self, i: usize, values: &[f64]) {
        self.gamma[i * self.c..(i + 1) * self.c].copy_from_slice(values);
        self.visited[i] = true;
    }

    pub fn is_visited(&self, i: usize) -> bool {
        self.visited[i]
    }

    pub fn all_visited(&self) -> bool {
        self.visited.iter().all(|&v| v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.c];
        for r in self.gamma.chunks_exact(self.c) {
            for (s, g) in sums.iter_mut().zip(r) {
                *s += g;
            }
        }
        sums
    }

    /// Keeps only the listed columns (in the given order).
    pub(crate) fn select_columns(&self, keep: &[usize]) -> ResponsibilityTable {
        let mut gamma = Vec::with_capacity(self.n * keep.len());
        for r in self.gamma.chunks_exact(self.c) {
            gamma.extend(keep.iter().map(|&k| r[k]));
        }
        ResponsibilityTable {
            gamma,
            n: self.n,
            c: keep.len(),
            visited: self.visited.clone(),
        }
    }

    pub(crate) fn rows_mut(&mut self) -> std::slice::ChunksExactMut<'_, f64> {
        self.gamma.chunks_exact_mut(self.c)
    }
}

/// A Gaussian mixture with its soft counts `N_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub components: Vec<GaussianComponent>,
    pub soft_counts: Vec<f64>,
    dim: usize,
}

impl MixtureModel {
    pub fn new(components: Vec<GaussianComponent>, soft_counts: Vec<f64>) -> Result<Self> {
        let dim = match components.first() {
            Some(c) => c.dim(),
            None => {
                return Err(Error::Invalid(
                    "a mixture needs at least one component".into(),
                ))
            }
        };
        if let Some(bad) = components.iter().find(|c| c.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.dim(),
            });
        }
        if soft_counts.len() != components.len() {
            return Err(Error::Dimension {
                expected: components.len(),
                got: soft_counts.len(),
            });
        }
        Ok(MixtureModel {
            components,
            soft_counts,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// `out[k] = log π_k + log N(x | μ_k, Σ_k)`.
    #[inline]
    pub fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.weight.ln() + c.log_density(x);
        }
    }

    /// Responsibilities of a single point.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let mut row = vec![0.0; self.n_components()];
        self.log_joint(x, &mut row);
        normalize_log_weights(&mut row);
        Ok(row)
    }

    pub(crate) fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got,
            });
        }
        Ok(())
    }

    /// Keeps only the listed components, in order.
    pub(crate) fn select(&self, keep: &[usize]) -> MixtureModel {
        MixtureModel {
            components: keep.iter().map(|&k| self.components[k].clone()).collect(),
            soft_counts: keep.iter().map(|&k| self.soft_counts[k]).collect(),
            dim: self.dim,
        }
    }
}

/// `C` distinct data points as means, the global covariance for every component,
/// uniform weights and soft counts `N / C`.
pub fn initialize_model(data: &Dataset, n_components: usize, seed: u64) -> Result<MixtureModel> {
    if n_components == 0 || n_components > data.n() {
        return Err(Error::Invalid(format!(
            "cannot draw {n_components} initial means from {} points",
            data.n()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, data.n(), n_components).into_vec();
    let cov = repair_covariance(&data.covariance())?;
    let weight = 1.0 / n_components as f64;
    let components = picks
        .iter()
        .map(|&i| GaussianComponent {
            weight,
            mean: DVector::from_column_slice(data.row(i)),
            cov: cov.clone(),
        })
        .collect();
    MixtureModel::new(
        components,
        vec![data.n() as f64 / n_components as f64; n_components],
    )
}

/// Fills `table` with normalized `exp(log π_k + log N + bias_k)` rows and returns
/// the per-row log normalizers.
pub(crate) fn fill_responsibilities(
    model: &MixtureModel,
    data: &Dataset,
    log_bias: Option<&[f64]>,
    table: &mut ResponsibilityTable,
) -> Vec<f64> {
    let c = model.n_components();
    let work = |(i, row): (usize, &mut [f64])| -> f64 {
        model.log_joint(data.row(i), row);
        if let Some(b) = log_bias {
            for (r, bk) in row.iter_mut().zip(b) {
                *r += bk;
            }
        }
        normalize_log_weights(row)
    };
    let norms: Vec<f64> = if data.n() >= PAR_ROW_THRESHOLD {
        table
            .gamma
            .par_chunks_mut(c)
            .enumerate()
            .map(work)
            .collect()
    } else {
        table.gamma.chunks_mut(c).enumerate().map(work).collect()
    };
    table.visited.iter_mut().for_each(|v| *v = true);
    norms
}

/// Posterior responsibilities of every datum under `model`, plus the log-likelihood.
pub(crate) fn e_step_with_loglik(
    model: &MixtureModel,
    data: &Dataset,
) -> Result<(ResponsibilityTable, f64)> {
    model.check_dim(data.dim())?;
    let mut table = ResponsibilityTable::new(data.n(), model.n_components());
    let norms = fill_responsibilities(model, data, None, &mut table);
    Ok((table, norms.iter().sum()))
}

/// `γ(z_nk) ∝ π_k N(x_n | μ_k, Σ_k)` for all n, k.
pub fn batch_e_step(model: &MixtureModel, data: &Dataset) -> Result<ResponsibilityTable> {
    e_step_with_loglik(model, data).map(|(t, _)| t)
}

/// Weighted mean and covariance of each column of `resp`, as a new mixture.
pub fn batch_m_step(data: &Dataset, resp: &ResponsibilityTable) -> Result<MixtureModel> {
    if resp.n() != data.n() {
        return Err(Error::Dimension {
            expected: data.n(),
            got: resp.n(),
        });
    }
    if !resp.all_visited() {
        return Err(Error::Invalid(
            "M-step requires every responsibility row to be visited".into(),
        ));
    }
    let d = data.dim();
    let c = resp.n_components();
    let counts = resp.column_sums();
    let floor = count_floor(d);
    if let Some((k, &nk)) = counts.iter().enumerate().find(|(_, &nk)| !(nk >= floor)) {
        return Err(Error::DegenerateComponent {
            component: k,
            count: nk,
            floor,
        });
    }
    let total: f64 = counts.iter().sum();

    let mut means = vec![DVector::<f64>::zeros(d); c];
    for i in 0..data.n() {
        let x = data.row(i);
        for (k, g) in resp.row(i).iter().enumerate() {
            for (m, xv) in means[k].iter_mut().zip(x) {
                *m += g * xv;
            }
        }
    }
    for (m, nk) in means.iter_mut().zip(&counts) {
        *m /= *nk;
    }

    let mut scatter = vec![DMatrix::<f64>::zeros(d, d); c];
    let mut diff = vec![0.0; d];
    for i in 0..data.n() {
        let x = data.row(i);
        for (k, &g) in resp.row(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for j in 0..d {
                diff[j] = x[j] - means[k][j];
            }
            let s = &mut scatter[k];
            for a in 0..d {
                let ga = g * diff[a];
                for b in 0..=a {
                    s[(a, b)] += ga * diff[b];
                }
            }
        }
    }

    let mut components = Vec::with_capacity(c);
    for k in 0..c {
        let mut s = scatter[k].clone();
        for a in 0..d {
            for b in 0..a {
                s[(b, a)] = s[(a, b)];
            }
        }
        s /= counts[k];
        components.push(GaussianComponent {
            weight: counts[k] / total,
            mean: means[k].clone(),
            cov: repair_covariance(&s)?,
        });
    }
    MixtureModel::new(components, counts)
}

/// `Σ_n log Σ_k π_k N(x_n | μ_k, Σ_k)`.
pub fn log_likelihood(model: &MixtureModel, data: &Dataset) -> Result<f64> {
    model.check_dim(data.dim())?;
    let mut buf = vec![0.0; model.n_components()];
    let mut total = 0.0;
    for x in data.rows() {
        model.log_joint(x, &mut buf);
        total += log_sum_exp(&buf);
    }
    Ok(total)
}

/// Full-batch EM until the relative log-likelihood change drops below `tol`.
///
/// Row 0 of the trace is the initial model; row `t` follows the `t`-th M-step.
pub fn fit_batch_em(
    data: &Dataset,
    init: &MixtureModel,
    tol: f64,
    max_iters: usize,
) -> Result<(MixtureModel, FicTrace)> {
    if max_iters == 0 {
        return Err(Error::Invalid("max_iters must be at least 1".into()));
    }
    let start = Instant::now();
    let mut trace = FicTrace::new();
    let mut model = init.clone();
    let (mut resp, mut ll) = e_step_with_loglik(&model, data)?;
    trace.push(ll, ll, model.n_components(), elapsed_ms(start));

    for it in 1..=max_iters {
        model = batch_m_step(data, &resp).map_err(|e| e.at_iteration(it))?;
        let (next, next_ll) = e_step_with_loglik(&model, data).map_err(|e| e.at_iteration(it))?;
        trace.push(next_ll, next_ll, model.n_components(), elapsed_ms(start));
        let done = relative_change(ll, next_ll) < tol;
        resp = next;
        ll = next_ll;
        if done {
            trace.diagnostics.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
