//! Shared world for the application tests: a synthetic corpus, feature
//! store, verdicts file, and trained checkpoint, all produced by driving
//! the actual `depscreen` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub struct World {
    pub root: tempfile::TempDir,
    pub corpus: PathBuf,
    pub store: PathBuf,
    pub verdicts: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub hyperparams: PathBuf,
    /// id -> (phq8_binary, phq8_score) from labels.csv.
    pub labels: BTreeMap<u32, (u8, u8)>,
    pub exemplar_ids: Vec<u32>,
}

pub fn depscreen() -> Command {
    Command::new(env!("CARGO_BIN_EXE_depscreen"))
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("binary runs");
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

pub fn read_labels(corpus: &Path) -> BTreeMap<u32, (u8, u8)> {
    let text = std::fs::read_to_string(corpus.join("labels.csv")).expect("labels exist");
    text.lines()
        .skip(1)
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[0].parse().unwrap(), (cols[1].parse().unwrap(), cols[2].parse().unwrap()))
        })
        .collect()
}

/// Synthesizes an 11-interview corpus, classifies transcripts with the
/// stub backend, builds features (coarse 256 ms hop so training is quick),
/// and trains a small checkpoint.
pub fn build_world() -> World {
    let root = tempfile::tempdir().expect("tempdir");
    let corpus = root.path().join("corpus");
    let store = root.path().join("store");
    let verdicts = root.path().join("verdicts.json");
    let model_dir = root.path().join("model");
    let config = root.path().join("config.toml");
    let hyperparams = root.path().join("hyperparams.toml");

    std::fs::write(
        &config,
        "[mfcc]\nwindow_ms = 256\noverlap_ms = 0\n\n[service]\nqueue_capacity = 3\nworkers = 1\n",
    )
    .unwrap();
    std::fs::write(
        &hyperparams,
        "bilstm1_units = 8\ndropout1 = 0.1\nbilstm2_units = 8\ndropout2 = 0.1\n\
         bilstm3_units = 8\ndropout3 = 0.1\nn_dense = 4\nfusion_bilstm_units = 8\n\
         fusion_dropout = 0.1\nlearning_rate = 0.003\nbatch_size = 16\n",
    )
    .unwrap();

    run_ok(depscreen()
        .args(["synth", "--n", "11", "--fraction", "0.5", "--seed", "7"])
        .arg("--out")
        .arg(&corpus));

    let labels = read_labels(&corpus);
    let depressed: Vec<u32> =
        labels.iter().filter(|(_, (b, _))| *b == 1).map(|(id, _)| *id).collect();
    let healthy: Vec<u32> =
        labels.iter().filter(|(_, (b, _))| *b == 0).map(|(id, _)| *id).collect();
    let exemplar_ids = vec![depressed[0], depressed[1], healthy[0], healthy[1]];
    let exemplar_arg =
        exemplar_ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",");

    run_ok(depscreen()
        .args(["llm-classify", "--exemplar-ids", &exemplar_arg])
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(&verdicts));

    run_ok(depscreen()
        .arg("--config")
        .arg(&config)
        .args(["features", "--exclude", &exemplar_arg, "--seed", "7"])
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(&store));

    run_ok(depscreen()
        .arg("--config")
        .arg(&config)
        .args(["train", "--max-epochs", "12", "--seed", "7"])
        .arg("--store")
        .arg(&store)
        .arg("--verdicts")
        .arg(&verdicts)
        .arg("--hyperparams")
        .arg(&hyperparams)
        .arg("--out")
        .arg(&model_dir));

    World {
        corpus,
        store,
        verdicts,
        checkpoint: model_dir.join("checkpoint.dsck"),
        config,
        hyperparams,
        labels,
        exemplar_ids,
        root,
    }
}
