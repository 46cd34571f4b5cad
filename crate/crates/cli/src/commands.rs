//! Subcommand implementations shared by the binary and the tests.

use std::path::{Path, PathBuf};

use bevcar_core::metrics::{measure_runtime, RuntimeReport};
use bevcar_data::dataset::generate_dataset;
use bevcar_data::io::{list_tokens, load_sample};
use bevcar_data::{load_split, Condition, ConditionSplit, SceneParams};
use candle_core::Device;

use crate::checkpoint::load_model;
use crate::config::RunConfig;
use crate::convert::model_input;
use crate::error::{CliError, Result};
use crate::eval::{evaluate, predictions, EvalOptions, EvalReport};
use crate::predict::{render_error_map, render_masks};

/// Scene parameters matching a run configuration's grid and image size.
pub fn scene_params(cfg: &RunConfig) -> SceneParams {
    SceneParams {
        grid: cfg.model.grid.clone(),
        image_height: cfg.model.image_height,
        image_width: cfg.model.image_width,
        min_vehicles: cfg.scene_vehicles[0],
        max_vehicles: cfg.scene_vehicles[1],
        ..Default::default()
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path, num: usize, seed: u64, conditions: &[Condition]) -> Result<ConditionSplit> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok(generate_dataset(out, num, seed, conditions, &scene_params(cfg), threads)?)
}

pub fn eval(ckpt: &Path, data: &Path, split: Option<&Path>, opts: EvalOptions) -> Result<EvalReport> {
    let (model, _) = load_model(ckpt, &Device::Cpu)?;
    let split = match split {
        Some(p) => Some(load_split(p)?),
        None if data.join("split.json").is_file() && opts.conditions => Some(load_split(&data.join("split.json"))?),
        None => None,
    };
    let tokens = list_tokens(data)?;
    let samples = tokens.iter().map(|t| load_sample(data, t).map_err(CliError::from));
    evaluate(&model, samples, split.as_ref(), opts)
}

pub struct PredictOutput {
    pub logits: PathBuf,
    pub render: Option<PathBuf>,
}

/// Writes logits as `<out>.npy` (or next to the render) and optionally a
/// BEV raster.
pub fn predict(ckpt: &Path, data: &Path, token: &str, logits_out: &Path, render: Option<&Path>, error_map: bool) -> Result<PredictOutput> {
    let (model, _) = load_model(ckpt, &Device::Cpu)?;
    let sample = load_sample(data, token)?;
    let out = model.forward(&model_input(&model, &sample)?, false)?;
    out.logits.write_npy(logits_out)?;
    if let Some(path) = render {
        let pred = predictions(&out.logits)?;
        let raster = if error_map {
            render_error_map(&pred, &sample.gt)
        } else {
            render_masks(&pred, sample.gt.x_cells, sample.gt.y_cells)
        };
        raster.save_png(path)?;
    }
    Ok(PredictOutput {
        logits: logits_out.to_path_buf(),
        render: render.map(Path::to_path_buf),
    })
}

/// Median forward time on a dataset sample, or on a generated scene when
/// no dataset is given. One untimed warm-up pass runs first.
pub fn bench(ckpt: &Path, data: Option<&Path>, reps: usize) -> Result<RuntimeReport> {
    let (model, manifest) = load_model(ckpt, &Device::Cpu)?;
    let sample = match data {
        Some(d) => {
            let t = list_tokens(d)?.into_iter().next().ok_or_else(|| CliError::Config(format!("no samples in {}", d.display())))?;
            load_sample(d, &t)?
        }
        None => {
            let p = scene_params(&manifest.config);
            bevcar_data::dataset::generate_sample(manifest.config.seed, 0, Condition::Day, &p, &p.grid)?
        }
    };
    let input = model_input(&model, &sample)?;
    model.forward(&input, false)?;
    Ok(measure_runtime(|| model.forward(&input, false).map(|_| ()), reps)?)
}
