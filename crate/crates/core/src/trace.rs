//! Per-iteration traces and their CSV form.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "iteration,fic,loglik,n_components,wall_ms";

/// Formats a real with 17 significant digits so it parses back bit-exactly.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn parse_real(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("bad real {s:?}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub fic: f64,
    pub loglik: f64,
    pub n_components: usize,
    pub wall_ms: f64,
}

/// Counters a learner accumulates alongside its trace.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// The learner's own stopping rule fired before `max_iters`.
    pub converged: bool,
    /// Soft counts clamped at the count floor during incremental updates.
    pub clamp_events: usize,
    /// Per-component parameter updates skipped because the component was degenerate.
    pub frozen_updates: usize,
    /// Rows where every component was shrunk to zero and the floor kicked in.
    pub shrink_floor_rows: usize,
    /// Online FIC accumulator resynchronizations forced by the drift bound.
    pub resyncs: usize,
    /// Largest observed relative gap between the online FIC and its batch recomputation.
    pub max_drift: f64,
    /// Components removed by pruning, in original-index terms per event.
    pub pruned: Vec<(usize, Vec<usize>)>,
}

/// FIC (or log-likelihood, for plain EM learners) recorded once per iteration.
///
/// For EM learners the `fic` column carries the log-likelihood, so that
/// convergence counting works on the same column for every learner.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FicTrace {
    pub rows: Vec<TraceRow>,
    pub diagnostics: Diagnostics,
}

impl FicTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, fic: f64, loglik: f64, n_components: usize, wall_ms: f64) {
        let iteration = self.rows.len();
        self.rows.push(TraceRow {
            iteration,
            fic,
            loglik,
            n_components,
            wall_ms,
        });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn fic_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.fic).collect()
    }

    pub fn loglik_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loglik).collect()
    }

    /// Writes the CSV form. `comments` become leading `# ...` lines; wall time is
    /// written as zero unless `with_wall_time`, which keeps reruns byte-identical.
    pub fn write_csv<W: Write>(
        &self,
        mut out: W,
        comments: &[String],
        with_wall_time: bool,
    ) -> Result<()> {
        let mut buf = String::new();
        for c in comments {
            writeln!(buf, "# {c}").unwrap();
        }
        writeln!(buf, "{TRACE_HEADER}").unwrap();
        for r in &self.rows {
            let wall = if with_wall_time { r.wall_ms } else { 0.0 };
            writeln!(
                buf,
                "{},{},{},{},{}",
                r.iteration,
                fmt_real(r.fic),
                fmt_real(r.loglik),
                r.n_components,
                fmt_real(wall)
            )
            .unwrap();
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// Reads a trace CSV, skipping `#` comment lines. Diagnostics are not stored in CSV.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut trace = FicTrace::new();
        let mut saw_header = false;
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != TRACE_HEADER {
                    return Err(Error::Parse(format!("unexpected trace header {line:?}")));
                }
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("trace row has {} fields", f.len())));
            }
            let parse_int = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad integer {s:?}: {e}")))
            };
            trace.rows.push(TraceRow {
                iteration: parse_int(f[0])?,
                fic: parse_real(f[1])?,
                loglik: parse_real(f[2])?,
                n_components: parse_int(f[3])?,
                wall_ms: parse_real(f[4])?,
            });
        }
        if !saw_header {
            return Err(Error::Parse("missing trace header".into()));
        }
        Ok(trace)
    }
}

/// `|cur - prev| / |prev|`, falling back to the absolute change when `prev == 0`.
pub fn relative_change(prev: f64, cur: f64) -> f64 {
    let d = (cur - prev).abs();
    if prev == 0.0 {
        d
    } else {
        d / prev.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvergencePoint {
    pub iterations: usize,
    pub converged: bool,
}

/// Smallest `t >= 1` from which every recorded relative FIC change stays below `tol`.
///
/// Returns the trace length, flagged as not converged, when no such `t` exists.
pub fn count_iterations_to_convergence(trace: &FicTrace, tol: f64) -> ConvergencePoint {
    let fic = trace.fic_values();
    let not_converged = ConvergencePoint {
        iterations: fic.len(),
        converged: false,
    };
    if fic.len() < 2 {
        return not_converged;
    }
    // walk backwards to find where the tail of small deltas begins
    let mut start = None;
    for t in (1..fic.len()).rev() {
        if relative_change(fic[t - 1], fic[t]) < tol {
            start = Some(t);
        } else {
            break;
        }
    }
    match start {
        Some(t) => ConvergencePoint {
            iterations: t,
            converged: true,
        },
        None => not_converged,
    }
}
