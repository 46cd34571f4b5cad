//! Dataset evaluation: overall, per distance interval and per condition.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use bevcar_core::head::output_classes;
use bevcar_core::loss::BevGroundTruth;
use bevcar_core::metrics::{format_table, range_masks, summarize, IoUAccumulator, MetricsReport, RangeIntervals};
use bevcar_core::{BevCar, ModelInput};
use bevcar_data::{Condition, ConditionSplit, Sample};
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::convert::model_input;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub ranges: bool,
    pub conditions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub overall: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ranges: Option<BTreeMap<String, MetricsReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<BTreeMap<String, MetricsReport>>,
}

/// Boolean predictions per output channel, thresholded at probability 0.5.
pub fn predictions(logits: &Tensor) -> Result<Vec<Vec<bool>>> {
    let (c, x, y) = logits.dims3()?;
    let v: Vec<f32> = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((0..c).map(|k| v[k * x * y..(k + 1) * x * y].iter().map(|&l| l > 0.0).collect()).collect())
}

/// Adds one sample to `acc`, restricted to valid cells and `region`.
pub fn accumulate(acc: &mut IoUAccumulator, pred: &[Vec<bool>], gt: &BevGroundTruth, region: Option<&[bool]>) -> Result<()> {
    let mask: Vec<bool> = match region {
        Some(r) => gt.valid.iter().zip(r).map(|(&a, &b)| a && b).collect(),
        None => gt.valid.clone(),
    };
    for (c, name) in output_classes().into_iter().enumerate() {
        acc.update(name, &pred[c], gt.channel(c), &mask)?;
    }
    Ok(())
}

/// Running evaluation state; per-sample updates merge by addition.
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    pub overall: IoUAccumulator,
    pub ranges: Vec<IoUAccumulator>,
    pub conditions: BTreeMap<Condition, IoUAccumulator>,
    pub samples: usize,
}

impl Evaluator {
    pub fn add(&mut self, pred: &[Vec<bool>], gt: &BevGroundTruth, range_masks: Option<&[Vec<bool>]>, condition: Option<Condition>) -> Result<()> {
        accumulate(&mut self.overall, pred, gt, None)?;
        if let Some(masks) = range_masks {
            self.ranges.resize(masks.len(), IoUAccumulator::new());
            for (acc, m) in self.ranges.iter_mut().zip(masks) {
                accumulate(acc, pred, gt, Some(m))?;
            }
        }
        if let Some(c) = condition {
            accumulate(self.conditions.entry(c).or_default(), pred, gt, None)?;
        }
        self.samples += 1;
        Ok(())
    }

    pub fn report(&self, opts: EvalOptions, intervals: &RangeIntervals) -> EvalReport {
        EvalReport {
            samples: self.samples,
            overall: summarize(&self.overall),
            ranges: opts.ranges.then(|| intervals.labels().into_iter().zip(&self.ranges).map(|(l, a)| (l, summarize(a))).collect()),
            conditions: opts.conditions.then(|| {
                Condition::ALL
                    .iter()
                    .map(|c| (c.name().to_string(), summarize(self.conditions.get(c).unwrap_or(&IoUAccumulator::new()))))
                    .collect()
            }),
        }
    }
}

/// Evaluates `model` on samples yielded in order. With `conditions`, every
/// token must be covered by `split`.
pub fn evaluate<I>(model: &BevCar, samples: I, split: Option<&ConditionSplit>, opts: EvalOptions) -> Result<EvalReport>
where
    I: IntoIterator<Item = Result<Sample>>,
{
    let samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;
    if opts.conditions {
        let split = split.ok_or_else(|| CliError::Eval("condition evaluation needs a split file".into()))?;
        let tokens: Vec<String> = samples.iter().map(|s| s.token.clone()).collect();
        let missing = split.missing(&tokens);
        if !missing.is_empty() {
            return Err(CliError::Eval(format!("tokens missing from the split: {}", missing.join(", "))));
        }
    }
    let intervals = RangeIntervals::default();
    let masks = opts.ranges.then(|| range_masks(&model.config.grid, &intervals));
    let mut ev = Evaluator::default();
    for s in &samples {
        let input = model_input(model, s)?;
        let pred = predict_masks(model, &input)?;
        let cond = if opts.conditions { split.and_then(|sp| sp.condition(&s.token)) } else { None };
        ev.add(&pred, &s.gt, masks.as_deref(), cond)?;
    }
    Ok(ev.report(opts, &intervals))
}

pub fn predict_masks(model: &BevCar, input: &ModelInput) -> Result<Vec<Vec<bool>>> {
    predictions(&model.forward(input, false)?.logits)
}

/// Per-interval table: one row per class and aggregate, one column per
/// interval.
pub fn format_range_table(ranges: &BTreeMap<String, MetricsReport>, intervals: &RangeIntervals) -> String {
    let labels = intervals.labels();
    let mut rows: Vec<Vec<String>> = vec![std::iter::once(String::new()).chain(labels.iter().cloned()).collect()];
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}", bevcar_core::metrics::round1(v)));
    let mut names: Vec<String> = output_classes().into_iter().map(String::from).collect();
    names.push("map".into());
    names.push("mIoU".into());
    for n in &names {
        let mut row = vec![n.clone()];
        for l in &labels {
            let r = &ranges[l];
            row.push(fmt(match n.as_str() {
                "map" => r.map,
                "mIoU" => r.miou,
                c => r.iou(c),
            }));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

pub fn format_report(report: &EvalReport) -> String {
    let mut out = format_table(&[("all".to_string(), report.overall.clone())]);
    if let Some(r) = &report.ranges {
        out.push('\n');
        out.push_str(&format_range_table(r, &RangeIntervals::default()));
    }
    if let Some(c) = &report.conditions {
        for cond in Condition::ALL {
            let _ = write!(out, "\n[{}]\n", cond.name());
            out.push_str(&format_table(&[(cond.name().to_string(), c[cond.name()].clone())]));
        }
    }
    for n in &report.overall.notices {
        let _ = writeln!(out, "note: {n}");
    }
    out
}
