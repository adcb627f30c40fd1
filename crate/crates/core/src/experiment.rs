//! Seeded races between batch and online learners over grids of data sizes
//! and dimensions, with per-run traces and averaged convergence curves.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::datagen::{derive_seed, GeneratorSpec};
use crate::error::{Error, Result};
use crate::fab::{fit_fab_batch, FabConfig};
use crate::fab_online::run_fab_online;
use crate::incremental::{fit_incremental_em, UpdateMode};
use crate::io::{write_dataset_csv, Checkpoint};
use crate::mixture::{fit_batch_em, initialize_model, Dataset, MixtureModel};
use crate::trace::{count_iterations_to_convergence, fmt_real, ConvergencePoint, FicTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Learner {
    EmBatch,
    EmOnline,
    FabBatch,
    FabOnline,
}

impl Learner {
    pub const ALL: [Learner; 4] = [
        Learner::EmBatch,
        Learner::EmOnline,
        Learner::FabBatch,
        Learner::FabOnline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Learner::EmBatch => "em_batch",
            Learner::EmOnline => "em_online",
            Learner::FabBatch => "fab_batch",
            Learner::FabOnline => "fab_online",
        }
    }
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Learner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Learner::ALL
            .into_iter()
            .find(|l| l.name() == s.trim().replace('-', "_"))
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "unknown learner {s:?} (expected em_batch, em_online, fab_batch or fab_online)"
                ))
            })
    }
}

/// Knobs shared by every learner in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub mode: UpdateMode,
    pub prune_threshold: f64,
    pub order_seed: u64,
}

impl RunSettings {
    pub fn fab_config(&self, dim: usize) -> FabConfig {
        FabConfig {
            prune_threshold: self.prune_threshold,
            tol: self.tol,
            max_iters: self.max_iters,
            ..FabConfig::for_dim(dim)
        }
    }
}

/// A finished fit: final model, its trace and a checkpoint of the learner.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: MixtureModel,
    pub trace: FicTrace,
    pub checkpoint: Checkpoint,
}

pub fn run_learner(
    learner: Learner,
    data: &Dataset,
    init: &MixtureModel,
    settings: &RunSettings,
) -> Result<Fitted> {
    let (model, trace, checkpoint) = match learner {
        Learner::EmBatch => {
            let (m, t) = fit_batch_em(data, init, settings.tol, settings.max_iters)?;
            let ck = Checkpoint::from_model(&m);
            (m, t, ck)
        }
        Learner::EmOnline => {
            let (m, t) = fit_incremental_em(
                data,
                init,
                settings.mode,
                settings.tol,
                settings.max_iters,
                settings.order_seed,
            )?;
            let ck = Checkpoint::from_model(&m);
            (m, t, ck)
        }
        Learner::FabBatch => {
            let (m, t) = fit_fab_batch(data, init, &settings.fab_config(data.dim()))?;
            let ck = Checkpoint::from_model(&m);
            (m, t, ck)
        }
        Learner::FabOnline => {
            let (l, t) = run_fab_online(
                data,
                init,
                &settings.fab_config(data.dim()),
                settings.mode,
                settings.order_seed,
            )?;
            let ck = Checkpoint::from_online_fab(&l);
            (l.state.model, t, ck)
        }
    };
    Ok(Fitted {
        model,
        trace,
        checkpoint,
    })
}

/// Hex SHA-256 of the dataset's CSV form.
pub fn dataset_hash(data: &Dataset) -> String {
    let mut buf = Vec::new();
    write_dataset_csv(&mut buf, data, None).expect("writing to memory cannot fail");
    hex(&Sha256::digest(&buf))
}

/// Hex SHA-256 of the model's checkpoint form.
pub fn model_hash(model: &MixtureModel) -> Result<String> {
    let mut buf = Vec::new();
    Checkpoint::from_model(model).write_json(&mut buf)?;
    Ok(hex(&Sha256::digest(&buf)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    /// Template for data generation; `n`, `dim` and `seed` are set per cell.
    pub generator: GeneratorSpec,
    pub n_values: Vec<usize>,
    pub dim_values: Vec<usize>,
    pub k_init: usize,
    pub repetitions: usize,
    pub learners: Vec<Learner>,
    pub tol: f64,
    pub max_iters: usize,
    /// One base seed per repetition.
    pub seeds: Vec<u64>,
    pub mode: UpdateMode,
    pub prune_threshold: f64,
    pub output_dir: PathBuf,
    /// Record measured wall time in traces (makes reruns differ byte-wise).
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            generator: GeneratorSpec::table1(0),
            n_values: vec![10_000],
            dim_values: vec![2, 4, 20],
            k_init: 8,
            repetitions: 10,
            learners: vec![Learner::FabBatch, Learner::FabOnline],
            tol: 1e-6,
            max_iters: 1000,
            seeds: (0..10).collect(),
            mode: UpdateMode::ExactStats,
            prune_threshold: 0.01,
            output_dir: PathBuf::from("out"),
            wall_clock: false,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let value = value.trim().trim_start_matches('[').trim_end_matches(']');
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Parse(format!("{key}: bad entry {s:?}: {e}")))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| Error::Parse(format!("{key}: bad value {value:?}: {e}")))
}

impl ExperimentConfig {
    /// Parses flat `key = value` text. Lines starting with `#` are comments;
    /// lists are comma-separated, optionally in brackets.
    ///
    /// Without an explicit `seeds` list, repetition `r` uses `base_seed + r`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seeds: Option<Vec<u64>> = None;
        let mut base_seed = 0u64;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => cfg.name = value.to_string(),
                "n_values" => cfg.n_values = parse_list(key, value)?,
                "dim_values" => cfg.dim_values = parse_list(key, value)?,
                "k_init" => cfg.k_init = parse_one(key, value)?,
                "k_true" => cfg.generator.k_true = parse_one(key, value)?,
                "weights" => cfg.generator.weights = parse_list(key, value)?,
                "mean_scale" => cfg.generator.mean_scale = parse_one(key, value)?,
                "cov_scale" => cfg.generator.cov_scale = parse_one(key, value)?,
                "repetitions" => cfg.repetitions = parse_one(key, value)?,
                "learners" => cfg.learners = parse_list(key, value)?,
                "tol" => cfg.tol = parse_one(key, value)?,
                "max_iters" => cfg.max_iters = parse_one(key, value)?,
                "seeds" => seeds = Some(parse_list(key, value)?),
                "base_seed" => base_seed = parse_one(key, value)?,
                "mode" => cfg.mode = parse_one(key, value)?,
                "prune_threshold" => cfg.prune_threshold = parse_one(key, value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "wall_clock" => cfg.wall_clock = parse_one(key, value)?,
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.seeds = match seeds {
            Some(s) => s,
            None => (0..cfg.repetitions as u64)
                .map(|r| base_seed.wrapping_add(r))
                .collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Invalid("repetitions must be at least 1".into()));
        }
        if self.seeds.len() != self.repetitions {
            return Err(Error::Invalid(format!(
                "{} seeds given for {} repetitions",
                self.seeds.len(),
                self.repetitions
            )));
        }
        if self.n_values.is_empty() || self.dim_values.is_empty() {
            return Err(Error::Invalid(
                "n_values and dim_values must be non-empty".into(),
            ));
        }
        if self.learners.is_empty() {
            return Err(Error::Invalid("at least one learner is required".into()));
        }
        if self.k_init == 0 {
            return Err(Error::Invalid("k_init must be at least 1".into()));
        }
        if !(self.tol >= 0.0) || self.max_iters == 0 {
            return Err(Error::Invalid(
                "tol must be non-negative and max_iters positive".into(),
            ));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Invalid(format!(
                "bad experiment name {:?}",
                self.name
            )));
        }
        for &n in &self.n_values {
            for &dim in &self.dim_values {
                self.cell_spec(n, dim, 0).validate()?;
                if n < self.k_init {
                    return Err(Error::Invalid(format!("n = {n} is smaller than k_init")));
                }
            }
        }
        Ok(())
    }

    fn cell_spec(&self, n: usize, dim: usize, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            n,
            dim,
            seed,
            ..self.generator.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// Seeds for one (n, dim, repetition) cell, all derived from the repetition's base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSeeds {
    pub data: u64,
    pub init: u64,
    pub order: u64,
}

impl CellSeeds {
    pub fn derive(base: u64, n: usize, dim: usize) -> Self {
        let (n, dim) = (n as u64, dim as u64);
        CellSeeds {
            data: derive_seed(base, &[n, dim, 0]),
            init: derive_seed(base, &[n, dim, 1]),
            order: derive_seed(base, &[n, dim, 2]),
        }
    }
}

/// Outcome of one learner on one cell.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub learner: Learner,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: FicTrace,
    pub convergence: ConvergencePoint,
    pub final_components: usize,
}

/// Averages for one (learner, n, dim).
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub learner: Learner,
    pub n: usize,
    pub dim: usize,
    /// Mean over repetitions, shorter runs padded with their last value.
    pub mean_fic_per_iteration: Vec<f64>,
    pub mean_iters_to_converge: f64,
    pub mean_final_fic: f64,
    pub mean_final_components: f64,
    pub repetitions_used: usize,
}

#[derive(Debug, Clone)]
pub struct RaceSummary {
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunRecord>,
}

impl RaceSummary {
    pub fn cell(&self, learner: Learner, n: usize, dim: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.learner == learner && c.n == n && c.dim == dim)
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.outcome.is_err())
    }
}

/// Column-wise mean of curves, each padded to the longest with its last value.
pub fn padded_mean(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|t| {
            let sum: f64 = curves
                .iter()
                .map(|c| c.get(t).or(c.last()).copied().unwrap_or(f64::NAN))
                .sum();
            sum / curves.len() as f64
        })
        .collect()
}

pub fn trace_file_name(learner: Learner, n: usize, dim: usize, seed: u64) -> String {
    format!("{learner}_n{n}_d{dim}_s{seed}.csv")
}

/// Dataset and shared initial model for one cell.
pub fn cell_inputs(
    cfg: &ExperimentConfig,
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<(Dataset, MixtureModel, CellSeeds)> {
    let seeds = CellSeeds::derive(seed, n, dim);
    let (_, data, _) = cfg.cell_spec(n, dim, seeds.data).generate()?;
    let init = initialize_model(&data, cfg.k_init, seeds.init)?;
    Ok((data, init, seeds))
}

fn run_cell(cfg: &ExperimentConfig, dir: &Path, n: usize, dim: usize, seed: u64) -> Vec<RunRecord> {
    let fail_all = |msg: String| {
        cfg.learners
            .iter()
            .map(|&learner| RunRecord {
                learner,
                n,
                dim,
                seed,
                outcome: Err(msg.clone()),
            })
            .collect::<Vec<_>>()
    };
    let (data, init, seeds) = match cell_inputs(cfg, n, dim, seed) {
        Ok(v) => v,
        Err(e) => return fail_all(e.to_string()),
    };
    let (data_hash, init_hash) = match model_hash(&init) {
        Ok(h) => (dataset_hash(&data), h),
        Err(e) => return fail_all(e.to_string()),
    };
    let settings = RunSettings {
        tol: cfg.tol,
        max_iters: cfg.max_iters,
        mode: cfg.mode,
        prune_threshold: cfg.prune_threshold,
        order_seed: seeds.order,
    };
    cfg.learners
        .par_iter()
        .map(|&learner| {
            let outcome = (|| -> Result<RunOutcome> {
                let fitted = run_learner(learner, &data, &init, &settings)?;
                let comments = vec![
                    format!("learner = {learner}"),
                    format!("n = {n}"),
                    format!("dim = {dim}"),
                    format!("seed = {seed}"),
                    format!("dataset_sha256 = {data_hash}"),
                    format!("init_sha256 = {init_hash}"),
                ];
                let mut buf = Vec::new();
                fitted
                    .trace
                    .write_csv(&mut buf, &comments, cfg.wall_clock)?;
                fs::write(dir.join(trace_file_name(learner, n, dim, seed)), buf)?;
                Ok(RunOutcome {
                    convergence: count_iterations_to_convergence(&fitted.trace, cfg.tol),
                    final_components: fitted.model.n_components(),
                    trace: fitted.trace,
                })
            })();
            RunRecord {
                learner,
                n,
                dim,
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect()
}

fn summarize(cfg: &ExperimentConfig, runs: &[RunRecord]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &n in &cfg.n_values {
        for &dim in &cfg.dim_values {
            for &learner in &cfg.learners {
                let ok: Vec<&RunOutcome> = runs
                    .iter()
                    .filter(|r| r.learner == learner && r.n == n && r.dim == dim)
                    .filter_map(|r| r.outcome.as_ref().ok())
                    .collect();
                let used = ok.len();
                let mean = |f: &dyn Fn(&RunOutcome) -> f64| {
                    ok.iter().map(|o| f(o)).sum::<f64>() / used as f64
                };
                let curves: Vec<Vec<f64>> = ok.iter().map(|o| o.trace.fic_values()).collect();
                cells.push(CellSummary {
                    learner,
                    n,
                    dim,
                    mean_fic_per_iteration: padded_mean(&curves),
                    mean_iters_to_converge: mean(&|o| o.convergence.iterations as f64),
                    mean_final_fic: mean(&|o| o.trace.last().map_or(f64::NAN, |r| r.fic)),
                    mean_final_components: mean(&|o| o.final_components as f64),
                    repetitions_used: used,
                });
            }
        }
    }
    cells
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_outputs(cfg: &ExperimentConfig, dir: &Path, summary: &RaceSummary) -> Result<()> {
    let mut s = String::from(
        "learner,n,dim,repetitions_used,mean_iters_to_converge,mean_final_fic,mean_final_components\n",
    );
    for c in &summary.cells {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.learner,
            c.n,
            c.dim,
            c.repetitions_used,
            fmt_real(c.mean_iters_to_converge),
            fmt_real(c.mean_final_fic),
            fmt_real(c.mean_final_components)
        ));
    }
    fs::write(dir.join("summary.csv"), s)?;

    let mut f = String::from("learner,n,dim,seed,error\n");
    for r in summary.failures() {
        if let Err(e) = &r.outcome {
            f.push_str(&format!(
                "{},{},{},{},{}\n",
                r.learner,
                r.n,
                r.dim,
                r.seed,
                csv_field(e)
            ));
        }
    }
    fs::write(dir.join("failures.csv"), f)?;

    for &n in &cfg.n_values {
        for &dim in &cfg.dim_values {
            let series: Vec<&CellSummary> = cfg
                .learners
                .iter()
                .filter_map(|&l| summary.cell(l, n, dim))
                .collect();
            let len = series
                .iter()
                .map(|c| c.mean_fic_per_iteration.len())
                .max()
                .unwrap_or(0);
            let mut p = String::from("iteration");
            for c in &series {
                p.push_str(&format!(",{}", c.learner));
            }
            p.push('\n');
            for t in 0..len {
                p.push_str(&t.to_string());
                for c in &series {
                    let v = c
                        .mean_fic_per_iteration
                        .get(t)
                        .or(c.mean_fic_per_iteration.last());
                    p.push(',');
                    if let Some(v) = v {
                        p.push_str(&fmt_real(*v));
                    }
                }
                p.push('\n');
            }
            fs::write(dir.join(format!("panel_n{n}_d{dim}.csv")), p)?;
        }
    }
    Ok(())
}

/// Runs every (n, dim, repetition, learner) combination in parallel, writes
/// per-run traces, `summary.csv`, `failures.csv` and one `panel_n<N>_d<D>.csv`
/// per cell under `output_dir/name`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RaceSummary> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let jobs: Vec<(usize, usize, u64)> = cfg
        .n_values
        .iter()
        .flat_map(|&n| {
            cfg.dim_values
                .iter()
                .flat_map(move |&d| cfg.seeds.iter().map(move |&s| (n, d, s)))
        })
        .collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .flat_map_iter(|&(n, dim, seed)| run_cell(cfg, &dir, n, dim, seed))
        .collect();
    let summary = RaceSummary {
        cells: summarize(cfg, &runs),
        runs,
    };
    write_outputs(cfg, &dir, &summary)?;
    Ok(summary)
}

/// Side-by-side CSV of two traces, shorter one padded with its last row.
pub fn write_race_csv<W: std::io::Write>(
    mut out: W,
    a: (Learner, &FicTrace),
    b: (Learner, &FicTrace),
) -> Result<()> {
    let mut s = format!(
        "iteration,{0}_fic,{0}_n_components,{1}_fic,{1}_n_components\n",
        a.0, b.0
    );
    let len = a.1.len().max(b.1.len());
    for t in 0..len {
        let ra = a.1.rows.get(t).or(a.1.last());
        let rb = b.1.rows.get(t).or(b.1.last());
        s.push_str(&t.to_string());
        for r in [ra, rb] {
            match r {
                Some(r) => s.push_str(&format!(",{},{}", fmt_real(r.fic), r.n_components)),
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    out.write_all(s.as_bytes())?;
    Ok(())
}
