//! Incremental EM: per-datum responsibility refresh with cached rows, the
//! change vector `s_nk`, and constant-time parameter updates.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{normalize_log_weights, repair_covariance};
use crate::mixture::{
    batch_m_step, count_floor, e_step_with_loglik, elapsed_ms, log_likelihood, Dataset,
    MixtureModel, ResponsibilityTable,
};
use crate::trace::{relative_change, Diagnostics, FicTrace};

/// How covariances are carried through a per-datum update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateMode {
    /// Multiplicative damped rank-one update applied to the previous covariance.
    PaperFaithful,
    /// Raw weighted sums `Σγ`, `Σγx`, `Σγxxᵀ`; parameters re-derived from them.
    #[default]
    ExactStats,
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::PaperFaithful => "paper-faithful",
            UpdateMode::ExactStats => "exact-stats",
        })
    }
}

impl FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "paper-faithful" => Ok(UpdateMode::PaperFaithful),
            "exact-stats" => Ok(UpdateMode::ExactStats),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?} (expected paper-faithful or exact-stats)"
            ))),
        }
    }
}

/// Result of refreshing one datum's responsibility row.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeRecord {
    pub datum_index: usize,
    /// `s_nk = γ_new - γ_old`; sums to zero.
    pub delta: Vec<f64>,
    pub new_gamma: Vec<f64>,
}

impl ChangeRecord {
    pub(crate) fn from_rows(datum_index: usize, new_gamma: Vec<f64>, old_gamma: &[f64]) -> Self {
        let delta = new_gamma
            .iter()
            .zip(old_gamma)
            .map(|(n, o)| n - o)
            .collect();
        ChangeRecord {
            datum_index,
            delta,
            new_gamma,
        }
    }
}

/// Weighted zeroth, first and second moments per component.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub s0: Vec<f64>,
    pub s1: Vec<DVector<f64>>,
    pub s2: Vec<DMatrix<f64>>,
}

impl SufficientStats {
    pub fn zeros(c: usize, d: usize) -> Self {
        SufficientStats {
            s0: vec![0.0; c],
            s1: vec![DVector::zeros(d); c],
            s2: vec![DMatrix::zeros(d, d); c],
        }
    }

    pub fn from_table(data: &Dataset, table: &ResponsibilityTable) -> Self {
        let mut stats = Self::zeros(table.n_components(), data.dim());
        for i in 0..data.n() {
            let x = data.row(i);
            for (k, &g) in table.row(i).iter().enumerate() {
                if g != 0.0 {
                    stats.add(k, g, x);
                }
            }
        }
        stats
    }

    pub fn n_components(&self) -> usize {
        self.s0.len()
    }

    /// Adds weight `w` (possibly negative) of point `x` to component `k`.
    pub fn add(&mut self, k: usize, w: f64, x: &[f64]) {
        self.s0[k] += w;
        for (s, xv) in self.s1[k].iter_mut().zip(x) {
            *s += w * xv;
        }
        let s2 = &mut self.s2[k];
        let d = x.len();
        for a in 0..d {
            let wa = w * x[a];
            for b in 0..=a {
                let v = wa * x[b];
                s2[(a, b)] += v;
                if a != b {
                    s2[(b, a)] += v;
                }
            }
        }
    }

    /// Mean and raw (unrepaired) covariance of component `k`.
    pub fn moments(&self, k: usize) -> (DVector<f64>, DMatrix<f64>) {
        let mean = &self.s1[k] / self.s0[k];
        let cov = &self.s2[k] / self.s0[k] - &mean * mean.transpose();
        (mean, cov)
    }
}

/// Responsibilities of `x` at the current parameters and their change against `old_gamma`.
pub fn e_incremental_step(
    model: &MixtureModel,
    datum_index: usize,
    x: &[f64],
    old_gamma: &[f64],
) -> Result<ChangeRecord> {
    model.check_dim(x.len())?;
    if old_gamma.len() != model.n_components() {
        return Err(Error::Dimension {
            expected: model.n_components(),
            got: old_gamma.len(),
        });
    }
    let mut row = vec![0.0; model.n_components()];
    model.log_joint(x, &mut row);
    normalize_log_weights(&mut row);
    Ok(ChangeRecord::from_rows(datum_index, row, old_gamma))
}

/// `N_k + s_nk`, clamped at `floor`; returns the new counts and the clamped indices.
pub fn update_soft_counts(counts: &[f64], delta: &[f64], floor: f64) -> (Vec<f64>, Vec<usize>) {
    let mut clamped = Vec::new();
    let next = counts
        .iter()
        .zip(delta)
        .enumerate()
        .map(|(k, (c, s))| {
            let v = c + s;
            if v < floor {
                clamped.push(k);
                floor
            } else {
                v
            }
        })
        .collect();
    (next, clamped)
}

/// Per-datum M-step. `model.soft_counts` must already hold the updated counts.
///
/// Components whose count sits at the floor, or whose updated covariance cannot
/// be repaired, keep their previous mean and covariance; their indices are
/// returned so the caller can record them.
pub fn incremental_m_step(
    model: &mut MixtureModel,
    x: &[f64],
    record: &ChangeRecord,
    mode: UpdateMode,
    stats: &mut SufficientStats,
    n_total: usize,
) -> Result<Vec<usize>> {
    model.check_dim(x.len())?;
    let c = model.n_components();
    if record.delta.len() != c || stats.n_components() != c {
        return Err(Error::Dimension {
            expected: c,
            got: record.delta.len(),
        });
    }
    let d = model.dim();
    let floor = count_floor(d);
    let n = n_total as f64;
    let min_weight = floor / n;
    let mut frozen = Vec::new();

    for (k, &s) in record.delta.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        stats.add(k, s, x);
        let nk = model.soft_counts[k];
        let comp = &mut model.components[k];
        match mode {
            UpdateMode::PaperFaithful => {
                comp.weight = (comp.weight + s / n).max(min_weight);
                if nk <= floor {
                    frozen.push(k);
                    continue;
                }
                let r = s / nk;
                let diff = DVector::from_fn(d, |j, _| x[j] - comp.mean[j]);
                let raw = (comp.cov.entries() + (&diff * diff.transpose()) * r) * (1.0 - r);
                match repair_covariance(&raw) {
                    Ok(cov) => {
                        comp.mean += diff * r;
                        comp.cov = cov;
                    }
                    Err(_) => frozen.push(k),
                }
            }
            UpdateMode::ExactStats => {
                let s0 = stats.s0[k];
                comp.weight = (s0 / n).max(min_weight);
                if s0 <= floor || nk <= floor {
                    frozen.push(k);
                    continue;
                }
                let (mean, raw) = stats.moments(k);
                match repair_covariance(&raw) {
                    Ok(cov) => {
                        comp.mean = mean;
                        comp.cov = cov;
                    }
                    Err(_) => frozen.push(k),
                }
            }
        }
    }
    Ok(frozen)
}

/// Shuffled visiting order for sweep `sweep` (1-based), fixed by `order_seed`.
pub fn sweep_order(n: usize, order_seed: u64, sweep: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    rng.set_stream(sweep as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Everything an online learner carries between data points.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalState {
    pub model: MixtureModel,
    pub table: ResponsibilityTable,
    pub stats: SufficientStats,
    pub mode: UpdateMode,
    pub order_seed: u64,
    /// Completed incremental sweeps (the initialization pass is not counted).
    pub sweeps_done: usize,
}

impl IncrementalState {
    /// Aligns a state with a full table: parameters and statistics come from
    /// a batch M-step over `table`.
    pub fn from_table(
        data: &Dataset,
        table: ResponsibilityTable,
        mode: UpdateMode,
        order_seed: u64,
    ) -> Result<Self> {
        let model = batch_m_step(data, &table)?;
        let stats = SufficientStats::from_table(data, &table);
        Ok(IncrementalState {
            model,
            table,
            stats,
            mode,
            order_seed,
            sweeps_done: 0,
        })
    }

    /// Refreshes one datum with a precomputed change record.
    pub(crate) fn apply(
        &mut self,
        data: &Dataset,
        record: &ChangeRecord,
        diag: &mut Diagnostics,
    ) -> Result<()> {
        let i = record.datum_index;
        let floor = count_floor(data.dim());
        let (counts, clamped) = update_soft_counts(&self.model.soft_counts, &record.delta, floor);
        diag.clamp_events += clamped.len();
        self.model.soft_counts = counts;
        let frozen = incremental_m_step(
            &mut self.model,
            data.row(i),
            record,
            self.mode,
            &mut self.stats,
            data.n(),
        )?;
        diag.frozen_updates += frozen.len();
        self.table.set_row(i, &record.new_gamma);
        Ok(())
    }

    /// One shuffled pass of incremental E/M updates over every datum.
    pub fn sweep(&mut self, data: &Dataset, diag: &mut Diagnostics) -> Result<()> {
        let sweep = self.sweeps_done + 1;
        for i in sweep_order(data.n(), self.order_seed, sweep) {
            let record = e_incremental_step(&self.model, i, data.row(i), self.table.row(i))
                .map_err(|e| e.at_datum(sweep, i))?;
            self.apply(data, &record, diag)
                .map_err(|e| e.at_datum(sweep, i))?;
        }
        self.sweeps_done = sweep;
        Ok(())
    }
}

/// Incremental EM. Trace row 0 is the initial model, row 1 the initialization
/// pass (one batch E-step and M-step), and every later row one full sweep.
pub fn fit_incremental_em(
    data: &Dataset,
    init: &MixtureModel,
    mode: UpdateMode,
    tol: f64,
    max_sweeps: usize,
    order_seed: u64,
) -> Result<(MixtureModel, FicTrace)> {
    if max_sweeps == 0 {
        return Err(Error::Invalid("max_sweeps must be at least 1".into()));
    }
    let start = Instant::now();
    let mut trace = FicTrace::new();
    let (table, ll0) = e_step_with_loglik(init, data)?;
    trace.push(ll0, ll0, init.n_components(), elapsed_ms(start));

    let mut state = IncrementalState::from_table(data, table, mode, order_seed)
        .map_err(|e| e.at_iteration(1))?;
    let mut prev = log_likelihood(&state.model, data)?;
    trace.push(prev, prev, state.model.n_components(), elapsed_ms(start));
    if relative_change(ll0, prev) < tol {
        trace.diagnostics.converged = true;
        return Ok((state.model, trace));
    }

    let mut diag = Diagnostics::default();
    for _ in 0..max_sweeps {
        state.sweep(data, &mut diag)?;
        let ll = log_likelihood(&state.model, data)?;
        trace.push(ll, ll, state.model.n_components(), elapsed_ms(start));
        if relative_change(prev, ll) < tol {
            diag.converged = true;
            break;
        }
        prev = ll;
    }
    trace.diagnostics = diag;
    Ok((state.model, trace))
}
