//! Multi-head deformable attention.
//!
//! Each query predicts, per head, reference slot and sampling point, a 2D
//! offset (in pixels of the referenced map) and an attention logit. The
//! value maps are read bilinearly at `reference + offset`, and the samples
//! are combined with a softmax over all valid samples of the head. Value and
//! output projections carry no bias, so the output is linear in the values.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::sampler::{weighted_sample, MapShape, INVALID_MAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformableAttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    /// Reference slots per query.
    pub refs: usize,
}

impl DeformableAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.points == 0 || self.refs == 0 || self.channels == 0 {
            return Err(config_err("deformable attention sizes must be positive"));
        }
        if self.channels % self.heads != 0 {
            return Err(config_err(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn samples_per_head(&self) -> usize {
        self.refs * self.points
    }
}

/// Stacked value maps: `data` is `[P, C]`, with the pixels of map `m`
/// occupying rows `maps[m].offset..`.
#[derive(Clone, Debug)]
pub struct ValueMaps {
    pub data: Tensor,
    pub maps: Arc<[MapShape]>,
}

impl ValueMaps {
    /// A single `[C, H, W]` map.
    pub fn single(map: &Tensor) -> Result<Self> {
        let (c, h, w) = map.dims3()?;
        Ok(Self {
            data: map.reshape((c, h * w))?.t()?.contiguous()?,
            maps: vec![MapShape { offset: 0, height: h, width: w }].into(),
        })
    }

    /// Tokens `[H*W, C]` of one row-major map.
    pub fn from_tokens(tokens: &Tensor, height: usize, width: usize) -> Result<Self> {
        if tokens.dim(0)? != height * width {
            return Err(shape_err("token count does not match map size"));
        }
        Ok(Self {
            data: tokens.clone(),
            maps: vec![MapShape { offset: 0, height, width }].into(),
        })
    }
}

/// Per-query reference locations with the map each one lives on.
#[derive(Clone, Debug)]
pub struct ReferencePoints {
    pub queries: usize,
    pub refs: usize,
    /// `queries * refs` normalized `(x, y)` pairs.
    pub locations: Vec<[f64; 2]>,
    /// `queries * refs` map indices, [`INVALID_MAP`] where the reference is invalid.
    pub map_ids: Vec<u32>,
}

impl ReferencePoints {
    pub fn new(queries: usize, refs: usize, locations: Vec<[f64; 2]>, map_ids: Vec<u32>) -> Result<Self> {
        if locations.len() != queries * refs || map_ids.len() != queries * refs {
            return Err(shape_err(format!(
                "reference points: expected {} entries, got {} locations and {} map ids",
                queries * refs,
                locations.len(),
                map_ids.len()
            )));
        }
        Ok(Self {
            queries,
            refs,
            locations,
            map_ids,
        })
    }

    /// One reference per query on a single map, all valid.
    pub fn single_map(locations: Vec<[f64; 2]>) -> Self {
        let n = locations.len();
        Self {
            queries: n,
            refs: 1,
            locations,
            map_ids: vec![0; n],
        }
    }

    /// References of queries `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let (a, b) = (start * self.refs, (start + len) * self.refs);
        Self {
            queries: len,
            refs: self.refs,
            locations: self.locations[a..b].to_vec(),
            map_ids: self.map_ids[a..b].to_vec(),
        }
    }

    pub fn is_valid(&self, query: usize, reference: usize) -> bool {
        self.map_ids[query * self.refs + reference] != INVALID_MAP
    }

    pub fn any_valid(&self, query: usize) -> bool {
        (0..self.refs).any(|r| self.is_valid(query, r))
    }
}

/// Tensors derived from [`ReferencePoints`] for one dtype and point count.
struct PreparedRefs {
    /// `[Q, 1, R, 1, 2]`
    locations: Tensor,
    /// `[Q, 1, R, 1, 2]`: pixel offset to normalized offset.
    scale: Tensor,
    /// `[Q, 1, R*points]`
    mask: Tensor,
    /// `[Q, 1]`
    any_valid: Tensor,
    /// `Q * R * points` map ids
    sample_ids: Arc<[u32]>,
}

fn prepare(refs: &ReferencePoints, maps: &[MapShape], points: usize, dtype: DType, device: &Device) -> Result<PreparedRefs> {
    let (q, r) = (refs.queries, refs.refs);
    let mut locs = Vec::with_capacity(q * r * 2);
    let mut scale = Vec::with_capacity(q * r * 2);
    let mut mask = Vec::with_capacity(q * r * points);
    let mut ids = Vec::with_capacity(q * r * points);
    let mut any = vec![0.0f64; q];
    for qi in 0..q {
        for ri in 0..r {
            let idx = qi * r + ri;
            let id = refs.map_ids[idx];
            locs.extend_from_slice(&refs.locations[idx]);
            if id == INVALID_MAP {
                scale.extend_from_slice(&[0.0, 0.0]);
            } else {
                let m = maps
                    .get(id as usize)
                    .ok_or_else(|| shape_err(format!("reference map id {id} out of range")))?;
                scale.extend_from_slice(&[1.0 / m.width as f64, 1.0 / m.height as f64]);
                any[qi] = 1.0;
            }
            for _ in 0..points {
                mask.push(if id == INVALID_MAP { 0.0 } else { 1.0 });
                ids.push(id);
            }
        }
    }
    let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?) };
    Ok(PreparedRefs {
        locations: t(locs, &[q, 1, r, 1, 2])?,
        scale: t(scale, &[q, 1, r, 1, 2])?,
        mask: t(mask, &[q, 1, r * points])?,
        any_valid: t(any, &[q, 1])?,
        sample_ids: ids.into(),
    })
}

#[derive(Clone, Debug)]
pub struct DeformableAttention {
    config: DeformableAttentionConfig,
    value_proj: Linear,
    offset_proj: Linear,
    attn_proj: Linear,
    out_proj: Linear,
}

/// Initial sampling pattern: points spread on a unit-radius ring (in pixels
/// of the referenced map), rotated per head, identical for every reference.
pub fn ring_offsets(cfg: &DeformableAttentionConfig) -> Vec<f64> {
    let n = (cfg.heads * cfg.points) as f64;
    let mut out = Vec::with_capacity(cfg.heads * cfg.refs * cfg.points * 2);
    for h in 0..cfg.heads {
        for _ in 0..cfg.refs {
            for p in 0..cfg.points {
                let theta = 2.0 * std::f64::consts::PI * (h * cfg.points + p) as f64 / n;
                out.push(theta.cos());
                out.push(theta.sin());
            }
        }
    }
    out
}

impl DeformableAttention {
    pub fn new(p: &ParamStore, config: DeformableAttentionConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let n_off = config.heads * config.refs * config.points * 2;
        let n_attn = config.heads * config.refs * config.points;
        Ok(Self {
            config,
            value_proj: Linear::xavier(&p.pp("value"), c, c, false)?,
            offset_proj: Linear::with_init(&p.pp("offset"), c, n_off, Init::Zeros, Some(Init::Values(ring_offsets(&config))))?,
            attn_proj: Linear::with_init(&p.pp("attn"), c, n_attn, Init::Zeros, Some(Init::Zeros))?,
            out_proj: Linear::xavier(&p.pp("out"), c, c, false)?,
        })
    }

    pub fn config(&self) -> &DeformableAttentionConfig {
        &self.config
    }

    /// Sampling locations `[Q, H, R*points, 2]` and softmax weights
    /// `[Q, H, R*points]` for `queries` (`[Q, C]`).
    pub fn sampling(&self, queries: &Tensor, refs: &ReferencePoints, maps: &[MapShape]) -> Result<(Tensor, Tensor, Arc<[u32]>, Tensor)> {
        let cfg = &self.config;
        let (q, c) = queries.dims2()?;
        if c != cfg.channels || refs.queries != q || refs.refs != cfg.refs {
            return Err(config_err(format!(
                "deformable attention configured for C={} R={}, got queries {:?} with {} refs for {} queries",
                cfg.channels, cfg.refs, queries.dims(), refs.refs, refs.queries
            )));
        }
        let (h, r, pts) = (cfg.heads, cfg.refs, cfg.points);
        let prep = prepare(refs, maps, pts, queries.dtype(), queries.device())?;
        let offsets = self.offset_proj.forward(queries)?.reshape((q, h, r, pts, 2))?;
        let locs = offsets
            .broadcast_mul(&prep.scale)?
            .broadcast_add(&prep.locations)?
            .reshape((q, h, r * pts, 2))?;
        let logits = self.attn_proj.forward(queries)?.reshape((q, h, r * pts))?;
        // Invalid samples are pinned to a large negative logit before the
        // max shift and zeroed after the exponential.
        let penalty = ((&prep.mask - 1.0)? * 1e4)?;
        let masked = logits.broadcast_mul(&prep.mask)?.broadcast_add(&penalty)?;
        let shift = masked.max_keepdim(D::Minus1)?.detach();
        let e = masked.broadcast_sub(&shift)?.exp()?.broadcast_mul(&prep.mask)?;
        let none_valid = (1.0 - &prep.any_valid)?.unsqueeze(2)?;
        let denom = e.sum_keepdim(D::Minus1)?.broadcast_add(&none_valid)?;
        let weights = e.broadcast_div(&denom)?;
        Ok((locs, weights, prep.sample_ids, prep.any_valid))
    }

    /// `queries` is `[Q, C]`; returns `[Q, C]`. Queries without any valid
    /// reference produce exactly zero.
    pub fn forward(&self, queries: &Tensor, refs: &ReferencePoints, values: &ValueMaps) -> Result<Tensor> {
        let v = self.project_values(values)?;
        self.attend(queries, refs, &v, &values.maps)
    }

    /// Gradient-free forward over blocks of `chunk` queries, which bounds
    /// the memory held by intermediate tensors.
    pub fn forward_detached(&self, queries: &Tensor, refs: &ReferencePoints, values: &ValueMaps, chunk: usize) -> Result<Tensor> {
        let v = self.project_values(values)?.detach();
        let q = queries.dim(0)?;
        let chunk = chunk.max(1);
        let mut parts = Vec::with_capacity(q.div_ceil(chunk));
        let mut start = 0;
        while start < q {
            let len = chunk.min(q - start);
            let out = self.attend(&queries.narrow(0, start, len)?.detach(), &refs.slice(start, len), &v, &values.maps)?;
            parts.push(out.detach());
            start += len;
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    fn project_values(&self, values: &ValueMaps) -> Result<Tensor> {
        let cfg = &self.config;
        let (p, c) = values.data.dims2()?;
        if c != cfg.channels {
            return Err(config_err(format!("value maps have {c} channels, expected {}", cfg.channels)));
        }
        Ok(self.value_proj.forward(&values.data)?.reshape((p, cfg.heads, cfg.head_dim()))?)
    }

    fn attend(&self, queries: &Tensor, refs: &ReferencePoints, v: &Tensor, maps: &Arc<[MapShape]>) -> Result<Tensor> {
        let q = queries.dim(0)?;
        let (locs, weights, ids, any_valid) = self.sampling(queries, refs, maps)?;
        let sampled = weighted_sample(v, &locs, &weights, maps.clone(), ids)?;
        let out = self.out_proj.forward(&sampled.reshape((q, self.config.channels))?)?;
        Ok(out.broadcast_mul(&any_valid)?)
    }
}

/// Pre-normalized transformer block: deformable cross-attention followed by
/// a feed-forward sublayer, each with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm1: LayerNorm,
    pub attention: DeformableAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl AttentionBlock {
    pub fn new(p: &ParamStore, config: DeformableAttentionConfig, ffn_expansion: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&p.pp("norm1"), config.channels)?,
            attention: DeformableAttention::new(&p.pp("attn"), config)?,
            norm2: LayerNorm::new(&p.pp("norm2"), config.channels)?,
            ffn: FeedForward::new(&p.pp("ffn"), config.channels, ffn_expansion)?,
        })
    }

    /// Attention sublayer output for `x`, before the residual add.
    pub fn attention_input(&self, x: &Tensor, refs: &ReferencePoints, values: &ValueMaps, chunk: Option<usize>) -> Result<Tensor> {
        let q = self.norm1.forward(x)?;
        match chunk {
            Some(c) => self.attention.forward_detached(&q, refs, values, c),
            None => self.attention.forward(&q, refs, values),
        }
    }

    /// `chunk = Some(n)` runs without gradients in blocks of `n` queries.
    pub fn forward(&self, x: &Tensor, refs: &ReferencePoints, values: &ValueMaps, chunk: Option<usize>) -> Result<Tensor> {
        let x = (x + self.attention_input(x, refs, values, chunk)?)?;
        let y = (&x + self.ffn.forward(&self.norm2.forward(&x)?)?)?;
        Ok(if chunk.is_some() { y.detach() } else { y })
    }
}
