#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use selflabel::data::{make_blobs, Dataset};
use selflabel::trainer::TrainConfig;
use selflabel::Rng;

pub fn selflabel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selflabel"))
        .args(args)
        .env("SELFLABEL_THREADS", "1")
        .output()
        .expect("binary runs")
}

pub fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// The desk-scale benchmark: 4 blobs of 500 points in 32-d, spread 0.5.
pub fn acceptance_blobs() -> Dataset {
    make_blobs(&mut Rng::new(0), 4, 500, 32, 0.5).unwrap()
}

/// Default run settings with narrower encoder layers so a 300-epoch run fits
/// the single-core time budget.
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 300, seed, encoder_hidden: vec![256, 256], ..TrainConfig::default() }
}

/// Small run used by CLI tests.
pub fn write_tiny_config(dir: &Path, data: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        "data = {:?}\nepochs = 3\nbatch_size = 32\noutput_dim = 8\nembedding_dim = 3\n\
         encoder_hidden = [16]\nclassifier_hidden = [16]\nwarmup_epochs = 1\nprobe_epochs = 5\n",
        data.display().to_string()
    );
    std::fs::write(&path, text).unwrap();
    path
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
