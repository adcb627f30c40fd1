//! Dataset CSV files and JSON model checkpoints.
//!
//! Every real is written with 17 significant digits so that reading a file
//! back reproduces the exact bits that were written.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fab::FabConfig;
use crate::fab_online::{OnlineFab, OnlineFicAccumulator};
use crate::gaussian::{CovarianceMatrix, GaussianComponent};
use crate::incremental::{IncrementalState, SufficientStats, UpdateMode};
use crate::mixture::{Dataset, MixtureModel, ResponsibilityTable};
use crate::trace::{fmt_real, parse_real};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `x0,...,x{D-1}[,label]` and one row per datum.
pub fn write_dataset_csv<W: Write>(
    mut out: W,
    data: &Dataset,
    labels: Option<&[usize]>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != data.n() {
            return Err(Error::Dimension {
                expected: data.n(),
                got: l.len(),
            });
        }
    }
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    let mut buf = header.join(",");
    buf.push('\n');
    for (i, row) in data.rows().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        if let Some(l) = labels {
            fields.push(l[i].to_string());
        }
        buf.push_str(&fields.join(","));
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

/// Reads a dataset CSV, returning labels when the file has a `label` column.
pub fn read_dataset_csv<R: BufRead>(input: R) -> Result<(Dataset, Option<Vec<usize>>)> {
    let mut lines = input.lines();
    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::Parse("empty dataset file".into())),
        }
    };
    let names: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let has_label = names.last() == Some(&"label");
    let dim = names.len() - usize::from(has_label);
    for (j, name) in names.iter().take(dim).enumerate() {
        if *name != format!("x{j}") {
            return Err(Error::Parse(format!(
                "unexpected column {name:?} at position {j}"
            )));
        }
    }
    if dim == 0 {
        return Err(Error::Parse("dataset has no coordinate columns".into()));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::Parse(format!(
                "row {} has {} fields, expected {}",
                lineno + 1,
                fields.len(),
                names.len()
            )));
        }
        for f in &fields[..dim] {
            points.push(parse_real(f)?);
        }
        if has_label {
            let l = fields[dim]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad label {:?}: {e}", fields[dim])))?;
            labels.push(l);
        }
    }
    if points.is_empty() {
        return Err(Error::Parse("dataset has no rows".into()));
    }
    Ok((Dataset::new(points, dim)?, has_label.then_some(labels)))
}

/// JSON number formatting with 17 significant digits.
struct RealFormatter;

impl serde_json::ser::Formatter for RealFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_real(value).as_bytes())
    }
}

/// Serialized mixture parameters, optionally with the state an online
/// learner needs to resume exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dim: usize,
    pub n_components: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Packed lower triangles, row-major.
    pub covariances: Vec<Vec<f64>>,
    pub soft_counts: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSection {
    pub mode: String,
    pub order_seed: u64,
    pub sweeps_done: usize,
    /// Cached responsibility table, one row per datum.
    pub gamma: Vec<Vec<f64>>,
    pub stats_s0: Vec<f64>,
    pub stats_s1: Vec<Vec<f64>>,
    /// Packed lower triangles of the second-moment sums.
    pub stats_s2: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fab: Option<FabSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabSection {
    pub d_component: usize,
    pub prune_threshold: f64,
    pub inner_v_iters: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub data_term: f64,
    pub contributions: Vec<f64>,
    pub live: Vec<usize>,
}

fn pack_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn unpack_lower(dim: usize, packed: &[f64]) -> Result<DMatrix<f64>> {
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
    Ok(m)
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Parse(format!(
            "{what}: expected {expected} entries, got {got}"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &MixtureModel) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            dim: model.dim(),
            n_components: model.n_components(),
            weights: model.weights(),
            means: model
                .components
                .iter()
                .map(|c| c.mean.iter().copied().collect())
                .collect(),
            covariances: model
                .components
                .iter()
                .map(|c| c.cov.lower_triangle())
                .collect(),
            soft_counts: model.soft_counts.clone(),
            online: None,
        }
    }

    pub fn from_incremental(state: &IncrementalState) -> Self {
        let mut ck = Self::from_model(&state.model);
        let c = state.table.n_components();
        ck.online = Some(OnlineSection {
            mode: state.mode.to_string(),
            order_seed: state.order_seed,
            sweeps_done: state.sweeps_done,
            gamma: state
                .table
                .as_slice()
                .chunks_exact(c)
                .map(<[f64]>::to_vec)
                .collect(),
            stats_s0: state.stats.s0.clone(),
            stats_s1: state
                .stats
                .s1
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            stats_s2: state.stats.s2.iter().map(pack_lower).collect(),
            fab: None,
        });
        ck
    }

    pub fn from_online_fab(learner: &OnlineFab) -> Self {
        let mut ck = Self::from_incremental(&learner.state);
        if let Some(online) = ck.online.as_mut() {
            online.fab = Some(FabSection {
                d_component: learner.cfg.d_component,
                prune_threshold: learner.cfg.prune_threshold,
                inner_v_iters: learner.cfg.inner_v_iters,
                tol: learner.cfg.tol,
                max_iters: learner.cfg.max_iters,
                data_term: learner.acc.data_term(),
                contributions: learner.acc.contributions().to_vec(),
                live: learner.live.clone(),
            });
        }
        ck
    }

    fn validate_shape(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let c = self.n_components;
        check_len("weights", c, self.weights.len())?;
        check_len("means", c, self.means.len())?;
        check_len("covariances", c, self.covariances.len())?;
        check_len("soft_counts", c, self.soft_counts.len())?;
        for m in &self.means {
            check_len("mean", self.dim, m.len())?;
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<MixtureModel> {
        self.validate_shape()?;
        let components = (0..self.n_components)
            .map(|k| {
                GaussianComponent::new(
                    self.weights[k],
                    DVector::from_column_slice(&self.means[k]),
                    CovarianceMatrix::from_lower_triangle(self.dim, &self.covariances[k])?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureModel::new(components, self.soft_counts.clone())
    }

    fn online_section(&self) -> Result<&OnlineSection> {
        self.online
            .as_ref()
            .ok_or_else(|| Error::Parse("checkpoint has no online learner state".into()))
    }

    pub fn to_incremental(&self) -> Result<IncrementalState> {
        let model = self.to_model()?;
        let on = self.online_section()?;
        let c = self.n_components;
        check_len("stats_s0", c, on.stats_s0.len())?;
        check_len("stats_s1", c, on.stats_s1.len())?;
        check_len("stats_s2", c, on.stats_s2.len())?;
        if on.gamma.iter().any(|r| r.len() != c) {
            return Err(Error::Parse(
                "gamma rows must have one entry per component".into(),
            ));
        }
        let stats = SufficientStats {
            s0: on.stats_s0.clone(),
            s1: on
                .stats_s1
                .iter()
                .map(|v| {
                    check_len("stats_s1 row", self.dim, v.len())?;
                    Ok(DVector::from_column_slice(v))
                })
                .collect::<Result<_>>()?,
            s2: on
                .stats_s2
                .iter()
                .map(|v| unpack_lower(self.dim, v))
                .collect::<Result<_>>()?,
        };
        Ok(IncrementalState {
            model,
            table: ResponsibilityTable::from_rows(&on.gamma)?,
            stats,
            mode: on.mode.parse::<UpdateMode>()?,
            order_seed: on.order_seed,
            sweeps_done: on.sweeps_done,
        })
    }

    pub fn to_online_fab(&self) -> Result<OnlineFab> {
        let state = self.to_incremental()?;
        let fab = self
            .online_section()?
            .fab
            .as_ref()
            .ok_or_else(|| Error::Parse("checkpoint has no FAB accumulator".into()))?;
        check_len("contributions", state.table.n(), fab.contributions.len())?;
        check_len("live", self.n_components, fab.live.len())?;
        Ok(OnlineFab {
            state,
            acc: OnlineFicAccumulator::from_parts(fab.data_term, fab.contributions.clone()),
            cfg: FabConfig {
                d_component: fab.d_component,
                prune_threshold: fab.prune_threshold,
                inner_v_iters: fab.inner_v_iters,
                tol: fab.tol,
                max_iters: fab.max_iters,
            },
            live: fab.live.clone(),
        })
    }

    /// JSON cannot spell NaN or infinity, so these are refused on write.
    fn all_finite(&self) -> bool {
        let flat = |v: &[Vec<f64>]| v.iter().flatten().all(|x| x.is_finite());
        let mut ok = self
            .weights
            .iter()
            .chain(&self.soft_counts)
            .all(|x| x.is_finite())
            && flat(&self.means)
            && flat(&self.covariances);
        if let Some(on) = &self.online {
            ok &= flat(&on.gamma)
                && on.stats_s0.iter().all(|x| x.is_finite())
                && flat(&on.stats_s1)
                && flat(&on.stats_s2);
            if let Some(f) = &on.fab {
                ok &= f.data_term.is_finite()
                    && f.prune_threshold.is_finite()
                    && f.tol.is_finite()
                    && f.contributions.iter().all(|x| x.is_finite());
            }
        }
        ok
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::Invalid(
                "checkpoint contains non-finite values".into(),
            ));
        }
        let mut ser = serde_json::Serializer::with_formatter(Vec::new(), RealFormatter);
        self.serialize(&mut ser)
            .map_err(|e| Error::Invalid(format!("cannot serialize checkpoint: {e}")))?;
        let mut bytes = ser.into_inner();
        bytes.push(b'\n');
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_json<R: io::Read>(input: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(input)
            .map_err(|e| Error::Parse(format!("bad checkpoint: {e}")))?;
        ck.validate_shape()?;
        Ok(ck)
    }
}
