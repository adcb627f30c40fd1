//! Online FAB: per-datum shrunk V-step, incremental M-step and an
//! incrementally maintained FIC.
//!
//! The accumulator caches each datum's contribution to the expected
//! complete-data log-probability plus entropy, so revisiting a datum replaces
//! its old term instead of adding a second copy. Penalty terms depend on the
//! live soft counts non-linearly and are recomputed on every read.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fab::{
    fic_terms, log_shrinkage, penalties, prune_components, row_contribution, shrunk_row,
    v_step_from_counts, FabConfig,
};
use crate::incremental::{
    incremental_m_step, sweep_order, ChangeRecord, IncrementalState, SufficientStats, UpdateMode,
};
use crate::mixture::{elapsed_ms, log_likelihood, Dataset, MixtureModel, ResponsibilityTable};
use crate::trace::{relative_change, Diagnostics, FicTrace};

/// Relative gap between online and recomputed FIC that forces a resync.
pub const DRIFT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineFicAccumulator {
    data_term: f64,
    contributions: Vec<f64>,
}

fn datum_contribution(model: &MixtureModel, x: &[f64], q: &[f64], buf: &mut [f64]) -> f64 {
    model.log_joint(x, buf);
    let (complete, entropy) = row_contribution(q, buf);
    complete + entropy
}

impl OnlineFicAccumulator {
    /// Accumulator whose cached terms are evaluated at the current model.
    pub fn synced(model: &MixtureModel, data: &Dataset, table: &ResponsibilityTable) -> Self {
        let mut acc = OnlineFicAccumulator {
            data_term: 0.0,
            contributions: vec![0.0; data.n()],
        };
        acc.resync(model, data, table);
        acc
    }

    pub fn from_parts(data_term: f64, contributions: Vec<f64>) -> Self {
        OnlineFicAccumulator {
            data_term,
            contributions,
        }
    }

    /// Recomputes every cached term at the current parameters.
    pub fn resync(&mut self, model: &MixtureModel, data: &Dataset, table: &ResponsibilityTable) {
        let mut buf = vec![0.0; model.n_components()];
        let mut total = 0.0;
        for i in 0..data.n() {
            let v = datum_contribution(model, data.row(i), table.row(i), &mut buf);
            self.contributions[i] = v;
            total += v;
        }
        self.data_term = total;
    }

    pub fn data_term(&self) -> f64 {
        self.data_term
    }

    pub fn contributions(&self) -> &[f64] {
        &self.contributions
    }

    /// `data_term - Σ_c (D_c/2) log N_c - ((C-1)/2) log N` at the given live counts.
    pub fn value(&self, counts: &[f64], n_total: usize, cfg: &FabConfig) -> Result<f64> {
        let (component, mixing) = penalties(counts, n_total, cfg)?;
        Ok(self.data_term - component - mixing)
    }
}

fn v_online_inner(
    model: &MixtureModel,
    datum_index: usize,
    x: &[f64],
    old_q: &[f64],
    cfg: &FabConfig,
) -> Result<(ChangeRecord, bool)> {
    model.check_dim(x.len())?;
    if old_q.len() != model.n_components() {
        return Err(Error::Dimension {
            expected: model.n_components(),
            got: old_q.len(),
        });
    }
    let shrink = log_shrinkage(&model.soft_counts, cfg);
    let mut row = vec![0.0; model.n_components()];
    let fell_back = shrunk_row(model, x, &shrink, &mut row);
    Ok((ChangeRecord::from_rows(datum_index, row, old_q), fell_back))
}

/// `q_nc ∝ π_c N(x_n | θ_c) exp(-D_c / (2 N_c))` at the live counts, and its change.
pub fn v_online_step(
    model: &MixtureModel,
    datum_index: usize,
    x: &[f64],
    old_q: &[f64],
    cfg: &FabConfig,
) -> Result<ChangeRecord> {
    v_online_inner(model, datum_index, x, old_q, cfg).map(|(r, _)| r)
}

/// Same contract as [`incremental_m_step`], driven by the shrunk change `s_nc`.
pub fn m_online_step(
    model: &mut MixtureModel,
    x: &[f64],
    record: &ChangeRecord,
    mode: UpdateMode,
    stats: &mut SufficientStats,
    n_total: usize,
) -> Result<Vec<usize>> {
    incremental_m_step(model, x, record, mode, stats, n_total)
}

/// Replaces datum `record.datum_index`'s cached term using the (already
/// updated) model and returns the current online FIC.
pub fn fic_online_accumulate(
    acc: &mut OnlineFicAccumulator,
    model: &MixtureModel,
    x: &[f64],
    record: &ChangeRecord,
    n_total: usize,
    cfg: &FabConfig,
) -> Result<f64> {
    let i = record.datum_index;
    let mut buf = vec![0.0; model.n_components()];
    let fresh = datum_contribution(model, x, &record.new_gamma, &mut buf);
    acc.data_term += fresh - acc.contributions[i];
    acc.contributions[i] = fresh;
    acc.value(&model.soft_counts, n_total, cfg)
}

/// Outcome of one online sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub fic: f64,
    pub loglik: f64,
    pub n_components: usize,
    /// Relative gap to the recomputed bound, measured before any resync.
    pub drift: f64,
    pub resynced: bool,
    pub pruned: Vec<usize>,
}

/// Online FAB learner state.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineFab {
    pub state: IncrementalState,
    pub acc: OnlineFicAccumulator,
    pub cfg: FabConfig,
    /// Original index of each live component.
    pub live: Vec<usize>,
}

impl OnlineFab {
    /// Parameters from a batch M-step over `table`, accumulator synced.
    pub fn from_table(
        data: &Dataset,
        table: ResponsibilityTable,
        cfg: FabConfig,
        mode: UpdateMode,
        order_seed: u64,
    ) -> Result<Self> {
        let live = (0..table.n_components()).collect();
        let state = IncrementalState::from_table(data, table, mode, order_seed)?;
        let acc = OnlineFicAccumulator::synced(&state.model, data, &state.table);
        Ok(OnlineFab {
            state,
            acc,
            cfg,
            live,
        })
    }

    pub fn model(&self) -> &MixtureModel {
        &self.state.model
    }

    pub fn fic(&self, n_total: usize) -> Result<f64> {
        self.acc
            .value(&self.state.model.soft_counts, n_total, &self.cfg)
    }

    /// One shuffled pass of V_online / count update / M_online / accumulate,
    /// then the drift check and the end-of-sweep pruning check.
    pub fn sweep(&mut self, data: &Dataset, diag: &mut Diagnostics) -> Result<SweepReport> {
        let sweep = self.state.sweeps_done + 1;
        let n = data.n();
        for i in sweep_order(n, self.state.order_seed, sweep) {
            let x = data.row(i);
            let step = (|| -> Result<()> {
                let (record, fell_back) =
                    v_online_inner(&self.state.model, i, x, self.state.table.row(i), &self.cfg)?;
                if fell_back {
                    diag.shrink_floor_rows += 1;
                }
                self.state.apply(data, &record, diag)?;
                fic_online_accumulate(&mut self.acc, &self.state.model, x, &record, n, &self.cfg)?;
                Ok(())
            })();
            step.map_err(|e| e.at_datum(sweep, i))?;
        }
        self.state.sweeps_done = sweep;

        let (terms, loglik) = fic_terms(&self.state.model, data, &self.state.table, &self.cfg)?;
        let batch = terms.total();
        let online = self.fic(n)?;
        let drift = relative_change(batch, online);
        diag.max_drift = diag.max_drift.max(drift);
        let resynced = !(drift < DRIFT_TOLERANCE);
        if resynced {
            self.acc.resync(&self.state.model, data, &self.state.table);
            diag.resyncs += 1;
        }

        let outcome = prune_components(&self.state.model, &self.state.table, &self.cfg);
        let pruned: Vec<usize> = outcome.pruned.iter().map(|&k| self.live[k]).collect();
        let (fic, loglik) = if pruned.is_empty() {
            (self.fic(n)?, loglik)
        } else {
            self.live = self
                .live
                .iter()
                .enumerate()
                .filter(|(k, _)| !outcome.pruned.contains(k))
                .map(|(_, &o)| o)
                .collect();
            let mut state = IncrementalState::from_table(
                data,
                outcome.resp,
                self.state.mode,
                self.state.order_seed,
            )?;
            state.sweeps_done = sweep;
            self.state = state;
            self.acc.resync(&self.state.model, data, &self.state.table);
            (self.fic(n)?, log_likelihood(&self.state.model, data)?)
        };
        Ok(SweepReport {
            fic,
            loglik,
            n_components: self.state.model.n_components(),
            drift,
            resynced,
            pruned,
        })
    }
}

/// Online FAB. Trace row 0 is the initial model scored with its own V-step,
/// row 1 the initialization pass (batch V-step, prune, M-step, accumulator
/// sync), and every later row one sweep.
pub fn fit_fab_online(
    data: &Dataset,
    init: &MixtureModel,
    cfg: &FabConfig,
    mode: UpdateMode,
    order_seed: u64,
) -> Result<(MixtureModel, FicTrace)> {
    let (learner, trace) = run_fab_online(data, init, cfg, mode, order_seed)?;
    Ok((learner.state.model, trace))
}

/// [`fit_fab_online`], returning the full learner state for checkpointing.
pub fn run_fab_online(
    data: &Dataset,
    init: &MixtureModel,
    cfg: &FabConfig,
    mode: UpdateMode,
    order_seed: u64,
) -> Result<(OnlineFab, FicTrace)> {
    cfg.validate(init.n_components())?;
    let start = Instant::now();
    let mut trace = FicTrace::new();
    let mut diag = Diagnostics::default();

    let (q0, fb) = v_step_from_counts(init, data, &init.soft_counts, cfg)?;
    diag.shrink_floor_rows += fb;
    let (terms, ll0) = fic_terms(init, data, &q0, cfg)?;
    let fic0 = terms.total();
    trace.push(fic0, ll0, init.n_components(), elapsed_ms(start));

    let outcome = prune_components(init, &q0, cfg);
    if !outcome.pruned.is_empty() {
        diag.pruned.push((1, outcome.pruned.clone()));
    }
    let mut learner = OnlineFab::from_table(data, outcome.resp, cfg.clone(), mode, order_seed)
        .map_err(|e| e.at_iteration(1))?;
    learner.live = (0..init.n_components())
        .filter(|k| !outcome.pruned.contains(k))
        .collect();
    let mut prev = learner.fic(data.n())?;
    let ll1 = log_likelihood(learner.model(), data)?;
    trace.push(prev, ll1, learner.model().n_components(), elapsed_ms(start));
    if relative_change(fic0, prev) < cfg.tol {
        diag.converged = true;
        trace.diagnostics = diag;
        return Ok((learner, trace));
    }

    for _ in 0..cfg.max_iters {
        let report = learner.sweep(data, &mut diag)?;
        if !report.pruned.is_empty() {
            diag.pruned.push((trace.len(), report.pruned.clone()));
        }
        trace.push(
            report.fic,
            report.loglik,
            report.n_components,
            elapsed_ms(start),
        );
        let done = relative_change(prev, report.fic) < cfg.tol;
        prev = report.fic;
        if done {
            diag.converged = true;
            break;
        }
    }
    trace.diagnostics = diag;
    Ok((learner, trace))
}
