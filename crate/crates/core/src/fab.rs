//! FIC lower bound and batch FAB inference with shrinkage-driven pruning.
//!
//! The bound maximized here is
//!
//! ```text
//! J(q, θ) = Σ_n Σ_c q_nc [log π_c + log N(x_n | μ_c, Σ_c)]
//!         - Σ_c (D_c / 2) log(Σ_n q_nc)
//!         - ((C - 1) / 2) log N
//!         - Σ_n Σ_c q_nc log q_nc
//! ```
//!
//! with `D_c = D + D(D+1)/2` free parameters per full-covariance component.
//! The V-step multiplies responsibilities by `exp(-D_c / (2 Ñ_c))`, which
//! starves small components until they fall under the pruning threshold.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::gaussian::normalize_log_weights;
use crate::mixture::{batch_m_step, elapsed_ms, Dataset, MixtureModel, ResponsibilityTable};
use crate::trace::{relative_change, Diagnostics, FicTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct FabConfig {
    /// Free parameters per component (mean plus covariance).
    pub d_component: usize,
    /// Components with `N_c / N` below this are pruned.
    pub prune_threshold: f64,
    pub inner_v_iters: usize,
    pub tol: f64,
    pub max_iters: usize,
}

impl FabConfig {
    pub fn for_dim(dim: usize) -> Self {
        FabConfig {
            d_component: dim + dim * (dim + 1) / 2,
            prune_threshold: 0.01,
            inner_v_iters: 3,
            tol: 1e-6,
            max_iters: 1000,
        }
    }

    pub fn validate(&self, c_init: usize) -> Result<()> {
        if self.inner_v_iters == 0 {
            return Err(Error::Invalid("inner_v_iters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.prune_threshold)
            || (c_init > 1 && self.prune_threshold >= 1.0 / c_init as f64)
        {
            return Err(Error::Invalid(format!(
                "prune threshold {} must lie in [0, 1/{c_init})",
                self.prune_threshold
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Invalid("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    fn half_dc(&self) -> f64 {
        0.5 * self.d_component as f64
    }
}

/// The separate pieces of the FIC lower bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FicTerms {
    /// `Σ_n Σ_c q_nc [log π_c + log N(x_n | θ_c)]`
    pub expected_complete: f64,
    /// `-Σ_n Σ_c q_nc log q_nc`
    pub entropy: f64,
    /// `Σ_c (D_c / 2) log N_c`
    pub component_penalty: f64,
    /// `((C - 1) / 2) log N`
    pub mixing_penalty: f64,
}

impl FicTerms {
    pub fn total(&self) -> f64 {
        self.expected_complete + self.entropy - self.component_penalty - self.mixing_penalty
    }
}

/// `Σ_c q_c [log π_c + log N(x | θ_c)] - Σ_c q_c log q_c` for one row;
/// zero-probability entries contribute nothing.
pub(crate) fn row_contribution(q: &[f64], log_joint: &[f64]) -> (f64, f64) {
    let mut complete = 0.0;
    let mut entropy = 0.0;
    for (&qc, &lj) in q.iter().zip(log_joint) {
        if qc > 0.0 {
            complete += qc * lj;
            entropy -= qc * qc.ln();
        }
    }
    (complete, entropy)
}

pub(crate) fn penalties(counts: &[f64], n: usize, cfg: &FabConfig) -> Result<(f64, f64)> {
    let mut component = 0.0;
    for (k, &nk) in counts.iter().enumerate() {
        if !(nk > 0.0) {
            return Err(Error::DegenerateComponent {
                component: k,
                count: nk,
                floor: 0.0,
            });
        }
        component += cfg.half_dc() * nk.ln();
    }
    let mixing = 0.5 * (counts.len() as f64 - 1.0) * (n as f64).ln();
    Ok((component, mixing))
}

/// FIC terms and the exact log-likelihood in a single pass over the data.
pub fn fic_terms(
    model: &MixtureModel,
    data: &Dataset,
    resp: &ResponsibilityTable,
    cfg: &FabConfig,
) -> Result<(FicTerms, f64)> {
    model.check_dim(data.dim())?;
    if resp.n() != data.n() || resp.n_components() != model.n_components() {
        return Err(Error::Invalid(format!(
            "responsibility table is {}x{}, expected {}x{}",
            resp.n(),
            resp.n_components(),
            data.n(),
            model.n_components()
        )));
    }
    if !resp.all_visited() {
        return Err(Error::Invalid("FIC requires a fully visited table".into()));
    }
    let (component_penalty, mixing_penalty) = penalties(&resp.column_sums(), data.n(), cfg)?;
    let mut buf = vec![0.0; model.n_components()];
    let mut expected_complete = 0.0;
    let mut entropy = 0.0;
    let mut loglik = 0.0;
    for i in 0..data.n() {
        model.log_joint(data.row(i), &mut buf);
        let (c, h) = row_contribution(resp.row(i), &buf);
        expected_complete += c;
        entropy += h;
        loglik += crate::gaussian::log_sum_exp(&buf);
    }
    Ok((
        FicTerms {
            expected_complete,
            entropy,
            component_penalty,
            mixing_penalty,
        },
        loglik,
    ))
}

/// The FIC lower bound `J(q, θ)`.
pub fn fic_lower_bound(
    model: &MixtureModel,
    data: &Dataset,
    resp: &ResponsibilityTable,
    cfg: &FabConfig,
) -> Result<f64> {
    fic_terms(model, data, resp, cfg).map(|(t, _)| t.total())
}

/// Per-component log shrinkage `-D_c / (2 N_c)`; `-inf` for empty components.
pub(crate) fn log_shrinkage(counts: &[f64], cfg: &FabConfig) -> Vec<f64> {
    counts
        .iter()
        .map(|&nk| {
            if cfg.d_component == 0 {
                0.0
            } else if nk > 0.0 {
                -cfg.half_dc() / nk
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// Shrunk responsibilities for one point. Falls back to the plain posterior
/// (and reports `true`) when every component is shrunk to zero.
pub(crate) fn shrunk_row(
    model: &MixtureModel,
    x: &[f64],
    log_shrink: &[f64],
    out: &mut [f64],
) -> bool {
    model.log_joint(x, out);
    for (o, b) in out.iter_mut().zip(log_shrink) {
        *o += b;
    }
    if out.iter().all(|v| *v == f64::NEG_INFINITY) {
        model.log_joint(x, out);
        normalize_log_weights(out);
        return true;
    }
    normalize_log_weights(out);
    false
}

/// V-step starting from explicit counts; returns the table and the number of
/// rows that needed the all-shrunk fallback.
pub(crate) fn v_step_from_counts(
    model: &MixtureModel,
    data: &Dataset,
    counts: &[f64],
    cfg: &FabConfig,
) -> Result<(ResponsibilityTable, usize)> {
    model.check_dim(data.dim())?;
    let c = model.n_components();
    // the model is fixed across inner passes, so the log joints are too
    let mut log_joint = vec![0.0; data.n() * c];
    for (i, lj) in log_joint.chunks_exact_mut(c).enumerate() {
        model.log_joint(data.row(i), lj);
    }
    let mut counts = counts.to_vec();
    let mut table = ResponsibilityTable::new(data.n(), c);
    let mut fallbacks = 0;
    let mut row = vec![0.0; c];
    for _ in 0..cfg.inner_v_iters.max(1) {
        let shrink = log_shrinkage(&counts, cfg);
        fallbacks = 0;
        for (i, lj) in log_joint.chunks_exact(c).enumerate() {
            for ((r, l), b) in row.iter_mut().zip(lj).zip(&shrink) {
                *r = l + b;
            }
            if row.iter().all(|v| *v == f64::NEG_INFINITY) {
                row.copy_from_slice(lj);
                fallbacks += 1;
            }
            normalize_log_weights(&mut row);
            table.set_row(i, &row);
        }
        counts = table.column_sums();
    }
    Ok((table, fallbacks))
}

/// `q_nc ∝ π_c N(x_n | θ_c) exp(-D_c / (2 Ñ_c))`, iterated `inner_v_iters` times
/// with `Ñ_c` taken from the previous pass (the first pass uses `resp`).
pub fn fab_v_step(
    model: &MixtureModel,
    data: &Dataset,
    resp: &ResponsibilityTable,
    cfg: &FabConfig,
) -> Result<ResponsibilityTable> {
    if resp.n_components() != model.n_components() {
        return Err(Error::Dimension {
            expected: model.n_components(),
            got: resp.n_components(),
        });
    }
    v_step_from_counts(model, data, &resp.column_sums(), cfg).map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub model: MixtureModel,
    pub resp: ResponsibilityTable,
    /// Indices (into the input model) of removed components.
    pub pruned: Vec<usize>,
    /// Rows whose surviving mass was zero and were reset to uniform.
    pub reset_rows: usize,
}

/// Removes every component with `N_c / N < δ`, never the last one.
pub fn prune_components(
    model: &MixtureModel,
    resp: &ResponsibilityTable,
    cfg: &FabConfig,
) -> PruneOutcome {
    let counts = resp.column_sums();
    let n = resp.n() as f64;
    let mut pruned: Vec<usize> = (0..counts.len())
        .filter(|&k| counts[k] / n < cfg.prune_threshold)
        .collect();
    if pruned.len() == counts.len() {
        // keep the heaviest component (first on ties)
        let best = (0..counts.len()).fold(0, |b, k| if counts[k] > counts[b] { k } else { b });
        pruned.retain(|&k| k != best);
    }
    if pruned.is_empty() {
        return PruneOutcome {
            model: model.clone(),
            resp: resp.clone(),
            pruned,
            reset_rows: 0,
        };
    }
    let keep: Vec<usize> = (0..counts.len()).filter(|k| !pruned.contains(k)).collect();

    let mut table = resp.select_columns(&keep);
    let mut reset_rows = 0;
    for row in table.rows_mut() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            let u = 1.0 / row.len() as f64;
            row.iter_mut().for_each(|v| *v = u);
            reset_rows += 1;
        }
    }

    let mut next = model.select(&keep);
    let wsum: f64 = next.components.iter().map(|c| c.weight).sum();
    for c in next.components.iter_mut() {
        c.weight /= wsum;
    }
    next.soft_counts = table.column_sums();
    PruneOutcome {
        model: next,
        resp: table,
        pruned,
        reset_rows,
    }
}

/// Batch FAB: V-step, prune, M-step, evaluate; until the relative FIC change
/// falls below `cfg.tol`.
///
/// Row 0 of the trace is the initial model scored with its own V-step; row `t`
/// follows the `t`-th M-step.
pub fn fit_fab_batch(
    data: &Dataset,
    init: &MixtureModel,
    cfg: &FabConfig,
) -> Result<(MixtureModel, FicTrace)> {
    cfg.validate(init.n_components())?;
    let start = Instant::now();
    let mut trace = FicTrace::new();
    let mut diag = Diagnostics::default();

    let mut model = init.clone();
    let (mut q, fb) = v_step_from_counts(&model, data, &model.soft_counts, cfg)?;
    diag.shrink_floor_rows += fb;
    let (terms, ll) = fic_terms(&model, data, &q, cfg)?;
    let mut fic = terms.total();
    trace.push(fic, ll, model.n_components(), elapsed_ms(start));

    // original index of each live component, for reporting prunes
    let mut live: Vec<usize> = (0..model.n_components()).collect();

    for it in 1..=cfg.max_iters {
        let step = (|| -> Result<(f64, f64)> {
            let outcome = prune_components(&model, &q, cfg);
            if !outcome.pruned.is_empty() {
                diag.pruned
                    .push((it, outcome.pruned.iter().map(|&k| live[k]).collect()));
                live = live
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| !outcome.pruned.contains(k))
                    .map(|(_, &o)| o)
                    .collect();
            }
            model = batch_m_step(data, &outcome.resp)?;
            let (next_q, fb) = v_step_from_counts(&model, data, &model.soft_counts, cfg)?;
            diag.shrink_floor_rows += fb;
            q = next_q;
            let (terms, ll) = fic_terms(&model, data, &q, cfg)?;
            Ok((terms.total(), ll))
        })();
        let (next_fic, ll) = step.map_err(|e| e.at_iteration(it))?;
        trace.push(next_fic, ll, model.n_components(), elapsed_ms(start));
        let done = relative_change(fic, next_fic) < cfg.tol;
        fic = next_fic;
        if done {
            diag.converged = true;
            break;
        }
    }
    trace.diagnostics = diag;
    Ok((model, trace))
}
