#![allow(dead_code)]

use std::path::{Path, PathBuf};

use bevcar_cli::config::RunConfig;

/// Small model and grid that train in well under a second per step.
pub const TINY: &str = r#"{
  "model": {
    "grid": {"x_cells": 16, "y_cells": 16, "z_cells": 2, "x_extent": 32.0, "y_extent": 32.0, "z_min": 0.0, "z_max": 4.0},
    "image_height": 32, "image_width": 64,
    "backbone": {"channels": 8, "width": 4},
    "lifting": {"blocks": 1, "heads": 2, "points": 2, "init_heads": 2, "init_points": 2},
    "fusion": {"blocks": 1, "heads": 2, "points": 2}
  },
  "optimizer": {"lr": 0.003, "steps": 4},
  "loader_workers": 1,
  "scene_vehicles": [1, 2]
}"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn overrides(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Tiny config over `data`, checkpoints in `out`.
pub fn tiny_config(dir: &Path, data: &Path, out: &Path, extra: &[(&str, &str)]) -> RunConfig {
    let file = write_config(dir, TINY);
    let mut set = overrides(extra);
    set.push(("dataset".into(), serde_json::to_string(data).unwrap()));
    set.push(("checkpoint_dir".into(), serde_json::to_string(out).unwrap()));
    RunConfig::resolve(Some(&file), &set, None).unwrap()
}
