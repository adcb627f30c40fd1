use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use hetmix::datagen::{derive_seed, GeneratorSpec};
use hetmix::experiment::{
    run_experiment, run_learner, write_race_csv, ExperimentConfig, Learner, RunSettings,
};
use hetmix::incremental::UpdateMode;
use hetmix::io::{read_dataset_csv, write_dataset_csv};
use hetmix::mixture::{initialize_model, Dataset};

#[derive(Parser)]
#[command(
    name = "hetmix",
    version,
    about = "Batch and online EM / FAB for Gaussian mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labelled dataset from a random ground-truth mixture.
    Generate {
        #[command(flatten)]
        gen: GenArgs,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one learner and write `checkpoint.json` and `trace.csv`.
    Fit {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "fab_online")]
        learner: Learner,
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit two learners from one shared initial model and write their traces side by side.
    Race {
        #[command(flatten)]
        input: InputArgs,
        /// Give exactly twice; defaults to fab_batch and fab_online.
        #[arg(long = "learner", num_args = 1)]
        learners: Vec<Learner>,
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment described by a key = value config file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record measured wall time in traces.
        #[arg(long)]
        wall_clock: bool,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    k_true: usize,
    /// Comma-separated mixing weights.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4")]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    mean_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    cov_scale: f64,
}

impl GenArgs {
    fn spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            n: self.n,
            k_true: self.k_true,
            weights: self.weights.clone(),
            dim: self.dim,
            mean_scale: self.mean_scale,
            cov_scale: self.cov_scale,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct InputArgs {
    /// Dataset CSV; when absent the data are generated from the generator flags.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    gen: GenArgs,
}

impl InputArgs {
    fn load(&self) -> anyhow::Result<Dataset> {
        match &self.data {
            Some(path) => {
                let f =
                    fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                Ok(read_dataset_csv(BufReader::new(f))?.0)
            }
            None => Ok(self.gen.spec().generate()?.1),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 8)]
    k_init: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    #[arg(long, default_value_t = UpdateMode::ExactStats)]
    mode: UpdateMode,
    #[arg(long, default_value_t = 0.01)]
    prune_threshold: f64,
    /// Record measured wall time in traces.
    #[arg(long)]
    wall_clock: bool,
}

impl RunArgs {
    fn settings(&self, seed: u64) -> RunSettings {
        RunSettings {
            tol: self.tol,
            max_iters: self.max_iters,
            mode: self.mode,
            prune_threshold: self.prune_threshold,
            order_seed: derive_seed(seed, &[2]),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { gen, out } => {
            let (_, data, labels) = gen.spec().generate()?;
            let mut buf = Vec::new();
            write_dataset_csv(&mut buf, &data, Some(&labels))?;
            write_file(&out, &buf)?;
        }
        Command::Fit {
            input,
            learner,
            run,
            out,
        } => {
            let data = input.load()?;
            let seed = input.gen.seed;
            let init = initialize_model(&data, run.k_init, derive_seed(seed, &[1]))?;
            let fitted = run_learner(learner, &data, &init, &run.settings(seed))?;
            let mut ck = Vec::new();
            fitted.checkpoint.write_json(&mut ck)?;
            write_file(&out.join("checkpoint.json"), &ck)?;
            let mut tr = Vec::new();
            fitted
                .trace
                .write_csv(&mut tr, &[format!("learner = {learner}")], run.wall_clock)?;
            write_file(&out.join("trace.csv"), &tr)?;
        }
        Command::Race {
            input,
            learners,
            run,
            out,
        } => {
            let pair = match learners.as_slice() {
                [] => [Learner::FabBatch, Learner::FabOnline],
                [a, b] => [*a, *b],
                other => bail!(
                    "--learner must be given exactly twice (got {})",
                    other.len()
                ),
            };
            let data = input.load()?;
            let seed = input.gen.seed;
            let init = initialize_model(&data, run.k_init, derive_seed(seed, &[1]))?;
            let settings = run.settings(seed);
            let mut traces = Vec::new();
            for learner in pair {
                let fitted = run_learner(learner, &data, &init, &settings)?;
                let mut tr = Vec::new();
                fitted.trace.write_csv(
                    &mut tr,
                    &[format!("learner = {learner}")],
                    run.wall_clock,
                )?;
                write_file(&out.join(format!("{learner}.csv")), &tr)?;
                traces.push(fitted.trace);
            }
            let mut buf = Vec::new();
            write_race_csv(&mut buf, (pair[0], &traces[0]), (pair[1], &traces[1]))?;
            write_file(&out.join("race.csv"), &buf)?;
        }
        Command::Experiment {
            config,
            out,
            wall_clock,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            cfg.wall_clock |= wall_clock;
            let summary = run_experiment(&cfg)?;
            let failed = summary.failures().count();
            if failed > 0 {
                eprintln!(
                    "{failed} run(s) failed; see {}",
                    cfg.run_dir().join("failures.csv").display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .filter_map(|c| c.downcast_ref::<hetmix::Error>())
                .any(hetmix::Error::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
