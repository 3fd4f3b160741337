#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small end-to-end configuration that runs in well under a second.
pub const TINY: &str = r#"
[dataset]
kind = "synthetic"
num_classes = 3
per_class = 12
test_per_class = 6
size = 8

[classifier]
kind = "linear"

[federation]
n_clients = 4
clients_per_round = 3
rounds = 4
local_epochs = 1
learning_rate = 0.01
batch_size = 4
pmr = 0.5
poison_ratio = 0.5
seed = 3

[psg]
iterations = 3
batch_size = 4
noise_dim = 4
arch_scale = 2

[attack]
kind = "poicgan"
"#;

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn fplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fplab")).args(args).env("FPLAB_THREADS", "1").output().unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
