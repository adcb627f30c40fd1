#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hetmix::experiment::{ExperimentConfig, Learner};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn golden_dir() -> PathBuf {
    repo_root().join("crates/core/tests/golden")
}

/// The shipped desk-scale race configuration, writing under `out`.
pub fn desk_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_file(&repo_root().join("configs/desk.conf")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

pub const FINAL_COMPONENTS_FILE: &str = "desk_final_components.csv";

/// `(learner, seed, final component count)` rows of the captured pruning outcome.
pub fn read_final_components(text: &str) -> Vec<(Learner, u64, usize)> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
            )
        })
        .collect()
}

pub fn format_final_components(rows: &[(Learner, u64, usize)]) -> String {
    let mut s = String::from("learner,seed,final_components\n");
    for (l, seed, c) in rows {
        s.push_str(&format!("{l},{seed},{c}\n"));
    }
    s
}
