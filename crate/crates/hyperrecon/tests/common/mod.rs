#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hyperrecon::config::RunConfig;
use hyperrecon::pipeline::{build_datasets, train_run};

/// A 16x16 run that trains in well under a second.
pub fn tiny_config(out: &Path, three_terms: bool) -> RunConfig {
    let loss = if three_terms { r#""loss_mode": "ao", "baseline_lambda": [0.5, 0.5]"# } else { r#""loss_mode": "sl""# };
    let json = format!(
        r#"{{
            "task": {{"kind": "csmri", "acceleration": 2.0, "calibration": 4}},
            {loss},
            "hnet": "S",
            "main": {{"hidden_channels": 4, "depth": 1}},
            "train": {{"epochs": 2, "batch_size": 4, "val_grid": 2}},
            "data": {{"pool": 14, "size": 16}},
            "out": {out:?}
        }}"#
    );
    let cfg: RunConfig = serde_json::from_str(&json).unwrap();
    cfg.validate().unwrap();
    cfg
}

pub fn write_config(cfg: &RunConfig, path: &Path) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_path_buf()
}

/// Trains the tiny hypernetwork and returns its checkpoint path.
pub fn train_tiny(out: &Path, three_terms: bool) -> PathBuf {
    let cfg = tiny_config(out, three_terms);
    let data = build_datasets(&cfg.task, &cfg.data).unwrap();
    train_run(&cfg, &data, false, None, |_| {}).unwrap().checkpoint
}
