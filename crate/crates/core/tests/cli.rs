use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hetmix::io::{read_dataset_csv, Checkpoint};
use hetmix::trace::TRACE_HEADER;

fn hetmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetmix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let file = dir.join("d.csv");
    let out = hetmix(&[
        "generate",
        "--n",
        "400",
        "--dim",
        "2",
        "--seed",
        "5",
        "--out",
        p(&file),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    file
}

#[test]
fn generate_writes_table1_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.csv");
    let out = hetmix(&[
        "generate",
        "--n",
        "10000",
        "--dim",
        "10",
        "--k-true",
        "4",
        "--weights",
        "0.1,0.2,0.3,0.4",
        "--seed",
        "7",
        "--out",
        p(&file),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&file).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "x0,x1,x2,x3,x4,x5,x6,x7,x8,x9,label"
    );
    let (data, labels) = read_dataset_csv(text.as_bytes()).unwrap();
    assert_eq!((data.n(), data.dim()), (10_000, 10));
    assert!(labels.unwrap().iter().all(|&l| l < 4));
}

#[test]
fn fit_writes_trace_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out_dir = dir.path().join("fit");
    let out = hetmix(&[
        "fit",
        "--data",
        p(&data),
        "--learner",
        "fab_online",
        "--k-init",
        "8",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.lines().any(|l| l == TRACE_HEADER));
    assert_eq!(TRACE_HEADER, "iteration,fic,loglik,n_components,wall_ms");
    let ck =
        Checkpoint::read_json(fs::File::open(out_dir.join("checkpoint.json")).unwrap()).unwrap();
    assert!(ck.n_components <= 8);
    assert!(ck.to_online_fab().is_ok());
}

#[test]
fn every_learner_and_mode_fits() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    for learner in ["em_batch", "em_online", "fab_batch", "fab_online"] {
        for mode in ["paper-faithful", "exact-stats"] {
            let out_dir = dir.path().join(format!("{learner}_{mode}"));
            let out = hetmix(&[
                "fit",
                "--data",
                p(&data),
                "--learner",
                learner,
                "--mode",
                mode,
                "--k-init",
                "4",
                "--tol",
                "1e-5",
                "--max-iters",
                "200",
                "--prune-threshold",
                "0.02",
                "--out",
                p(&out_dir),
            ]);
            assert_eq!(
                out.status.code(),
                Some(0),
                "{learner} {mode}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
    }
}

#[test]
fn race_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = hetmix(&[
            "race",
            "--data",
            p(&data),
            "--seed",
            "3",
            "--k-init",
            "6",
            "--learner",
            "fab_batch",
            "--learner",
            "fab_online",
            "--out",
            p(&out_dir),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        files.push(
            ["race.csv", "fab_batch.csv", "fab_online.csv"]
                .map(|f| fs::read(out_dir.join(f)).unwrap()),
        );
    }
    assert!(files[0] == files[1]);
}

#[test]
fn race_needs_exactly_two_learners() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = hetmix(&[
        "race",
        "--data",
        p(&data),
        "--learner",
        "em_batch",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one_and_name_the_culprit() {
    let out = hetmix(&["fit", "--frobnicate", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frobnicate"));

    let out = hetmix(&["fit", "--learner", "kmeans", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--learner") && err.contains("kmeans"));

    let out = hetmix(&["fit", "--mode", "sloppy", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));

    let out = hetmix(&["fit", "--data", "/nonexistent/file.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(hetmix(&["--help"]).status.code(), Some(0));
    assert_eq!(hetmix(&["--version"]).status.code(), Some(0));
    assert_eq!(hetmix(&[]).status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("flat.csv");
    let mut text = String::from("x0,x1\n");
    for _ in 0..20 {
        text.push_str("1.0,2.0\n");
    }
    fs::write(&file, text).unwrap();
    let out = hetmix(&[
        "fit",
        "--data",
        p(&file),
        "--learner",
        "em_batch",
        "--k-init",
        "2",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn experiment_runs_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.conf");
    fs::write(
        &cfg,
        "name = tiny\nn_values = 150\ndim_values = 2\nk_init = 3\nrepetitions = 2\n\
         learners = em_batch, em_online\nmax_iters = 50\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = hetmix(&["experiment", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = out_dir.join("tiny");
    for f in [
        "summary.csv",
        "failures.csv",
        "panel_n150_d2.csv",
        "em_online_n150_d2_s1.csv",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "colour = blue\n").unwrap();
    assert_eq!(
        hetmix(&["experiment", "--config", p(&bad)]).status.code(),
        Some(1)
    );
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for f in ["fig1_data_sweep.conf", "fig2_dim_sweep.conf", "desk.conf"] {
        let cfg = hetmix::experiment::ExperimentConfig::from_file(&root.join(f)).unwrap();
        assert_eq!(cfg.repetitions, 10);
    }
    let fig1 = hetmix::experiment::ExperimentConfig::from_file(&root.join("fig1_data_sweep.conf"))
        .unwrap();
    assert_eq!(fig1.n_values, vec![500, 10_000]);
    let fig2 =
        hetmix::experiment::ExperimentConfig::from_file(&root.join("fig2_dim_sweep.conf")).unwrap();
    assert_eq!(fig2.dim_values, vec![2, 4, 20]);
}
