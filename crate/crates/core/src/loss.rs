//! Ground truth masks and the training losses: binary cross-entropy for the
//! vehicle channel and the alpha-balanced focal loss summed over map
//! classes. Both are evaluated in logit space and averaged over valid cells.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::head::MAP_CLASSES;

/// Boolean BEV masks, row-major `[X, Y]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevGroundTruth {
    pub x_cells: usize,
    pub y_cells: usize,
    pub vehicle: Vec<bool>,
    /// One mask per map class, in [`MAP_CLASSES`] order.
    pub maps: Vec<Vec<bool>>,
    pub valid: Vec<bool>,
}

impl BevGroundTruth {
    pub fn empty(x_cells: usize, y_cells: usize) -> Self {
        let n = x_cells * y_cells;
        Self {
            x_cells,
            y_cells,
            vehicle: vec![false; n],
            maps: vec![vec![false; n]; MAP_CLASSES.len()],
            valid: vec![true; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x_cells * self.y_cells;
        if self.vehicle.len() != n || self.valid.len() != n || self.maps.len() != MAP_CLASSES.len() || self.maps.iter().any(|m| m.len() != n) {
            return Err(shape_err("ground truth masks disagree with the grid size"));
        }
        Ok(())
    }

    /// Mask of output channel `c` (0 = vehicle).
    pub fn channel(&self, c: usize) -> &[bool] {
        if c == 0 {
            &self.vehicle
        } else {
            &self.maps[c - 1]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub w_bce: f64,
    pub w_focal: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 3.0,
            w_bce: 1.0,
            w_focal: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(config_err(format!("focal alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(config_err(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// A scalar loss; `no_valid_cells` is set when the mean had nothing to
/// average over and the value was defined as zero.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: Tensor,
    pub no_valid_cells: bool,
}

impl LossValue {
    pub fn scalar(&self) -> Result<f64> {
        Ok(self.value.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

fn mask_tensor(mask: &[bool], like: &Tensor) -> Result<Tensor> {
    let v: Vec<f32> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// Signed logit `z = l` where the label is set and `-l` elsewhere, so that
/// `p_t = sigmoid(z)`.
fn signed_logits(logits: &Tensor, gt: &[bool]) -> Result<Tensor> {
    let y = mask_tensor(gt, logits)?;
    Ok(logits.mul(&((y * 2.0)? - 1.0)?)?)
}

fn check(logits: &Tensor, gt: &[bool], valid: &[bool]) -> Result<usize> {
    let n = logits.elem_count();
    if gt.len() != n || valid.len() != n {
        return Err(shape_err(format!(
            "loss: {n} logits, {} labels, {} validity flags",
            gt.len(),
            valid.len()
        )));
    }
    Ok(valid.iter().filter(|&&v| v).count())
}

/// Mean over valid cells of `-log p_t`.
pub fn bce_loss(logits: &Tensor, gt: &[bool], valid: &[bool]) -> Result<LossValue> {
    let n_valid = check(logits, gt, valid)?;
    if n_valid == 0 {
        log::warn!("binary cross-entropy over zero valid cells, defined as 0");
        return Ok(LossValue {
            value: (logits.flatten_all()?.sum(0)? * 0.0)?,
            no_valid_cells: true,
        });
    }
    let z = signed_logits(logits, gt)?;
    let per_cell = softplus(&z.neg()?)?.mul(&mask_tensor(valid, logits)?)?;
    Ok(LossValue {
        value: (per_cell.flatten_all()?.sum(0)? / n_valid as f64)?,
        no_valid_cells: false,
    })
}

/// Sum over classes of the per-class mean over valid cells of
/// `alpha_t * (1 - p_t)^gamma * (-log p_t)`. `logits` is `[M, X, Y]`.
pub fn focal_loss(logits: &Tensor, gt: &[Vec<bool>], valid: &[bool], cfg: &LossConfig) -> Result<LossValue> {
    let m = logits.dim(0)?;
    if gt.len() != m {
        return Err(shape_err(format!("focal loss: {m} logit channels, {} label masks", gt.len())));
    }
    let plane = logits.elem_count() / m.max(1);
    if valid.len() != plane {
        return Err(shape_err("focal loss: validity mask size mismatch"));
    }
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 || m == 0 {
        log::warn!("focal loss over zero valid cells, defined as 0");
        return Ok(LossValue {
            value: (logits.flatten_all()?.sum(0)? * 0.0)?,
            no_valid_cells: true,
        });
    }
    let mut total: Option<Tensor> = None;
    for (c, labels) in gt.iter().enumerate() {
        let l = logits.get(c)?;
        check(&l, labels, valid)?;
        let z = signed_logits(&l, labels)?;
        let y = mask_tensor(labels, &l)?;
        let alpha_t = ((&y * (2.0 * cfg.alpha - 1.0))? + (1.0 - cfg.alpha))?;
        let modulating = (softplus(&z)? * -cfg.gamma)?.exp()?;
        let term = alpha_t.mul(&modulating)?.mul(&softplus(&z.neg()?)?)?;
        let mean = (term.mul(&mask_tensor(valid, &l)?)?.flatten_all()?.sum(0)? / n_valid as f64)?;
        total = Some(match total {
            Some(t) => (t + mean)?,
            None => mean,
        });
    }
    Ok(LossValue {
        value: total.expect("at least one class"),
        no_valid_cells: false,
    })
}

/// `w_bce * bce + w_focal * focal`.
pub fn total_loss(bce: &Tensor, focal: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(((bce * cfg.w_bce)? + (focal * cfg.w_focal)?)?)
}

/// Vehicle BCE plus map focal loss for `[1 + M, X, Y]` logits.
pub fn segmentation_loss(logits: &Tensor, gt: &BevGroundTruth, cfg: &LossConfig) -> Result<(Tensor, f64, f64)> {
    gt.validate()?;
    let (c, x, y) = logits.dims3()?;
    if c != 1 + MAP_CLASSES.len() || (x, y) != (gt.x_cells, gt.y_cells) {
        return Err(shape_err(format!("logits {:?} do not match ground truth {}x{}", logits.dims(), gt.x_cells, gt.y_cells)));
    }
    let bce = bce_loss(&logits.get(0)?, &gt.vehicle, &gt.valid)?;
    let focal = focal_loss(&logits.narrow(0, 1, c - 1)?, &gt.maps, &gt.valid, cfg)?;
    let total = total_loss(&bce.value, &focal.value, cfg)?;
    Ok((total, bce.scalar()?, focal.scalar()?))
}
