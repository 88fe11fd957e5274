#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ssct_bench::config::ExperimentConfig;

/// A 16×16 setup small enough for a full pipeline in seconds.
pub fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(root.join("out"));
    cfg.seed = 7;
    let d = &mut cfg.dataset;
    d.size = 16;
    d.angles = 24;
    d.limited_angles = 12;
    d.train = 2;
    d.val = 1;
    d.test = 2;
    d.calibration_frames = 256;
    d.foam.bubbles = 4;
    cfg.network.depth = 1;
    cfg.network.base_channels = 2;
    cfg.optimizer.lr = 1e-3;
    cfg.optimizer.batch_size = 2;
    cfg.optimizer.max_epochs = 3;
    cfg.optimizer.patience = 3;
    cfg.sweep.lambdas = vec![0.1, 1.0];
    cfg
}

/// Every file below `root`, keyed by its relative path.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
