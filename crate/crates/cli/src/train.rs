//! Training loop: AdamW with warm-up and cosine decay, JSON-lines log,
//! periodic evaluation and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use bevcar_core::loss::segmentation_loss;
use bevcar_core::metrics::{MetricsReport, RangeIntervals};
use bevcar_core::{BevCar, ModelInput};
use bevcar_data::io::list_tokens;
use bevcar_data::loader::{Loader, LoaderConfig};
use bevcar_data::Sample;
use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::convert::model_input;
use crate::error::{CliError, Result};
use crate::eval::{predict_masks, EvalOptions, Evaluator};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Fixed sample order from the loader. Batch order always follows the
    /// seed.
    pub deterministic: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub last_eval: Option<MetricsReport>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: usize,
    lr: f64,
    loss: f64,
    bce: f64,
    focal: f64,
    tokens: &'a [String],
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    step: usize,
    eval: &'a MetricsReport,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    tokens: &'a [String],
    loss: f64,
    bce: f64,
    focal: f64,
}

/// Loads samples for `tokens` in token order.
pub fn load_samples(root: &Path, tokens: Vec<String>, cfg: &RunConfig, deterministic: bool) -> Result<Vec<Sample>> {
    let loader = Loader::new(
        root,
        tokens,
        &LoaderConfig {
            prefetch: cfg.prefetch,
            workers: cfg.loader_workers,
            deterministic_order: deterministic,
        },
    );
    let mut out: Vec<(usize, Sample)> = Vec::new();
    for (i, s) in loader {
        out.push((i, s?));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, s)| s).collect())
}

/// Splits the sorted dataset tokens into training and held-out lists.
pub fn dataset_tokens(cfg: &RunConfig) -> Result<(Vec<String>, Vec<String>)> {
    let mut tokens = list_tokens(&cfg.dataset)?;
    if tokens.is_empty() {
        return Err(CliError::Config(format!("no samples under {}", cfg.dataset.display())));
    }
    let holdout = tokens.split_off(tokens.len().saturating_sub(cfg.holdout));
    if cfg.max_samples > 0 {
        tokens.truncate(cfg.max_samples);
    }
    if tokens.is_empty() {
        return Err(CliError::Config("holdout leaves no training samples".into()));
    }
    Ok((tokens, holdout))
}

/// Overall metrics of `model` on prepared inputs.
pub fn evaluate_inputs(model: &BevCar, data: &[(Sample, ModelInput)]) -> Result<MetricsReport> {
    let mut ev = Evaluator::default();
    for (s, input) in data {
        ev.add(&predict_masks(model, input)?, &s.gt, None, None)?;
    }
    Ok(ev.report(EvalOptions::default(), &RangeIntervals::default()).overall)
}

fn reached(report: &MetricsReport, targets: &std::collections::BTreeMap<String, f64>) -> bool {
    !targets.is_empty() && targets.iter().all(|(c, &t)| report.iou(c).is_some_and(|v| v / 100.0 > t))
}

fn log_line<T: Serialize>(log: &mut std::fs::File, rec: &T) -> Result<()> {
    let mut line = serde_json::to_string(rec)?;
    line.push('\n');
    log.write_all(line.as_bytes())?;
    Ok(())
}

pub fn prepare(model: &BevCar, samples: Vec<Sample>) -> Result<Vec<(Sample, ModelInput)>> {
    samples
        .into_iter()
        .map(|s| {
            let input = model_input(model, &s)?;
            Ok((s, input))
        })
        .collect()
}

/// Trains from scratch per `cfg`.
pub fn train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let device = Device::Cpu;
    let (train_tokens, holdout_tokens) = dataset_tokens(cfg)?;
    let model = BevCar::new(cfg.model.clone(), cfg.seed, DType::F32, &device)?;
    let train_set = prepare(&model, load_samples(&cfg.dataset, train_tokens, cfg, opts.deterministic)?)?;
    let eval_set = if holdout_tokens.is_empty() {
        None
    } else {
        Some(prepare(&model, load_samples(&cfg.dataset, holdout_tokens, cfg, opts.deterministic)?)?)
    };
    train_model(cfg, &model, &train_set, eval_set.as_deref())
}

/// Runs the optimization on prepared data; `eval_set` defaults to the
/// training data.
pub fn train_model(cfg: &RunConfig, model: &BevCar, train_set: &[(Sample, ModelInput)], eval_set: Option<&[(Sample, ModelInput)]>) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;
    let mut log = std::fs::File::create(cfg.log_path())?;
    let eval_set = eval_set.unwrap_or(train_set);
    let vars = model.params().named_vars().into_iter().map(|(_, v)| v).collect();
    let o = &cfg.optimizer;
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: o.lr_at(0),
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(o.steps);
    let mut last_eval = None;
    let mut steps_done = 0;
    for step in 0..o.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let tokens: Vec<String> = batch.iter().map(|&i| train_set[i].0.token.clone()).collect();
        let mut total: Option<Tensor> = None;
        let (mut bce, mut focal) = (0.0, 0.0);
        for &i in &batch {
            let (sample, input) = &train_set[i];
            let out = model.forward(input, true)?;
            let (l, b, f) = segmentation_loss(&out.logits, &sample.gt, &cfg.loss)?;
            bce += b / batch.len() as f64;
            focal += f / batch.len() as f64;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            let dump = cfg.checkpoint_dir.join(format!("nan_step_{step}.json"));
            std::fs::write(&dump, serde_json::to_string_pretty(&NanDump { step, tokens: &tokens, loss: value, bce, focal })?)?;
            return Err(CliError::NonFinite { step, tokens, dump });
        }
        let lr = o.lr_at(step);
        opt.set_learning_rate(lr);
        opt.backward_step(&loss)?;
        losses.push(value);
        log_line(&mut log, &StepRecord { step, lr, loss: value, bce, focal, tokens: &tokens })?;
        steps_done = step + 1;
        if cfg.checkpoint_every > 0 && steps_done % cfg.checkpoint_every == 0 {
            save_checkpoint(&cfg.checkpoint_dir.join(format!("step_{steps_done:06}.ckpt")), model, cfg, steps_done)?;
        }
        if cfg.eval_every > 0 && steps_done % cfg.eval_every == 0 && steps_done < o.steps {
            let report = evaluate_inputs(model, eval_set)?;
            log_line(&mut log, &EvalRecord { step: steps_done, eval: &report })?;
            let stop = reached(&report, &cfg.stop_at);
            last_eval = Some(report);
            if stop {
                break;
            }
        }
    }
    if last_eval.is_none() || cfg.eval_every == 0 || steps_done == o.steps {
        let report = evaluate_inputs(model, eval_set)?;
        log_line(&mut log, &EvalRecord { step: steps_done, eval: &report })?;
        last_eval = Some(report);
    }
    let checkpoint = cfg.checkpoint_dir.join("last.ckpt");
    save_checkpoint(&checkpoint, model, cfg, steps_done)?;
    Ok(TrainOutcome {
        steps: steps_done,
        losses,
        checkpoint,
        last_eval,
    })
}
