//! Whole-dataset generation.

use std::path::Path;

use bevcar_core::geometry::BevGrid;

use crate::error::{DataError, Result};
use crate::io::save_sample;
use crate::render::{render_sample, Sample};
use crate::scene::{generate_scene, Condition, SceneParams};
use crate::split::ConditionSplit;

pub fn sample_token(index: usize) -> String {
    format!("s{index:05}")
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64)
}

pub fn generate_sample(seed: u64, index: usize, condition: Condition, params: &SceneParams, grid: &BevGrid) -> Result<Sample> {
    let scene = generate_scene(sample_seed(seed, index), condition, params)?;
    render_sample(&scene, grid, &sample_token(index))
}

/// Generates `num` samples, conditions assigned round-robin, writes them
/// under `root` in parallel, and returns the split.
pub fn generate_dataset(root: &Path, num: usize, seed: u64, conditions: &[Condition], params: &SceneParams, threads: usize) -> Result<ConditionSplit> {
    if conditions.is_empty() {
        return Err(DataError::Generation("no conditions requested".into()));
    }
    std::fs::create_dir_all(root)?;
    let threads = threads.clamp(1, num.max(1));
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || -> Result<()> {
                    for i in (t..num).step_by(threads) {
                        let sample = generate_sample(seed, i, conditions[i % conditions.len()], params, &params.grid)?;
                        save_sample(root, &sample)?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generation worker panicked")).collect()
    });
    for r in results {
        r?;
    }
    let split = ConditionSplit::from_pairs((0..num).map(|i| (sample_token(i), conditions[i % conditions.len()])))?;
    split.save(&root.join("split.json"))?;
    Ok(split)
}
