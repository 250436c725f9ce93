#![allow(dead_code)]

use std::io::Write as _;
use std::path::PathBuf;

use scent_vc::features::SynthConfig;
use scent_vc::training::TrainConfig;

pub fn desk_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

/// Synthetic voices, (train, valid, test) split sizes and the training config
/// used by the desk-scale experiment.
pub fn desk_config() -> (SynthConfig, (usize, usize, usize), TrainConfig) {
    let cfg = TrainConfig::load(&desk_config_path()).expect("configs/desk.conf");
    (SynthConfig::default(), (200, 10, 20), cfg)
}

pub fn report_line(n: usize, name: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n} [{status}] {name}: {detail}").unwrap();
}
