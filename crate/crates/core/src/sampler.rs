//! Weighted multi-map bilinear sampling, the kernel underneath deformable
//! attention and ray splatting.
//!
//! For every query `q`, head `h` and sample `s`, the kernel reads value map
//! `map_ids[q * S + s]` at normalized location `locations[q, h, s]` and
//! accumulates `weights[q, h, s] * bilinear(...)` into `out[q, h]`. Value
//! maps are stacked row-major into one `[P, H, Dh]` buffer described by
//! [`MapShape`]s. Normalized coordinates put pixel `i` of a `w`-wide map at
//! `(i + 0.5) / w`; reads outside a map are zero.
//!
//! Derivatives at exact pixel-grid crossings are taken from the cell whose
//! lower corner is the crossing.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor};
use num_traits::Float;

use crate::error::{shape_err, Result};

/// Marks a sample slot with no map to read; it contributes nothing.
pub const INVALID_MAP: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapShape {
    /// First pixel row of this map in the stacked value buffer.
    pub offset: usize,
    pub height: usize,
    pub width: usize,
}

impl MapShape {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Stacks maps of the given `(height, width)` sizes back to back.
pub fn stack_maps(sizes: &[(usize, usize)]) -> Vec<MapShape> {
    let mut offset = 0;
    sizes
        .iter()
        .map(|&(height, width)| {
            let m = MapShape { offset, height, width };
            offset += height * width;
            m
        })
        .collect()
}

/// Samples `values` (`[P, H, Dh]`) at `locations` (`[Q, H, S, 2]`, normalized
/// `(x, y)`) and sums with `weights` (`[Q, H, S]`), giving `[Q, H, Dh]`.
/// Differentiable in all three tensors.
pub fn weighted_sample(
    values: &Tensor,
    locations: &Tensor,
    weights: &Tensor,
    maps: Arc<[MapShape]>,
    map_ids: Arc<[u32]>,
) -> Result<Tensor> {
    let (p, h, dh) = values.dims3()?;
    let (q, h2, s, two) = locations.dims4()?;
    let (q3, h3, s3) = weights.dims3()?;
    if h2 != h || h3 != h || q3 != q || s3 != s || two != 2 {
        return Err(shape_err(format!(
            "sampler: values {:?}, locations {:?}, weights {:?} disagree",
            values.dims(),
            locations.dims(),
            weights.dims()
        )));
    }
    if map_ids.len() != q * s {
        return Err(shape_err(format!("sampler: {} map ids for {q}x{s} samples", map_ids.len())));
    }
    let needed = maps.iter().map(|m| m.offset + m.pixels()).max().unwrap_or(0);
    if needed > p {
        return Err(shape_err(format!("sampler: maps need {needed} pixels, values hold {p}")));
    }
    if let Some(bad) = map_ids.iter().find(|&&id| id != INVALID_MAP && id as usize >= maps.len()) {
        return Err(shape_err(format!("sampler: map id {bad} out of range")));
    }
    let op = SampleOp {
        maps,
        map_ids,
        queries: q,
        heads: h,
        samples: s,
        head_dim: dh,
    };
    Ok(values
        .contiguous()?
        .apply_op3(&locations.contiguous()?, &weights.contiguous()?, op)?)
}

struct SampleOp {
    maps: Arc<[MapShape]>,
    map_ids: Arc<[u32]>,
    queries: usize,
    heads: usize,
    samples: usize,
    head_dim: usize,
}

/// One bilinear corner: stacked pixel row (`None` outside the map),
/// interpolation weight, and the weight's derivative w.r.t. the normalized
/// x and y coordinates.
#[derive(Clone, Copy)]
struct Tap<T> {
    pixel: Option<usize>,
    weight: T,
    d_x: T,
    d_y: T,
}

/// Corners in the order (x0, y0), (x1, y0), (x0, y1), (x1, y1), plus the
/// fractional position inside the cell.
fn taps<T: Float>(m: &MapShape, xn: T, yn: T) -> Option<([Tap<T>; 4], T, T)> {
    let w = T::from(m.width).unwrap();
    let h = T::from(m.height).unwrap();
    let half = T::from(0.5).unwrap();
    let px = xn * w - half;
    let py = yn * h - half;
    if !(px.is_finite() && py.is_finite()) {
        return None;
    }
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let one = T::one();
    let (xi, yi) = (x0.to_i64()?, y0.to_i64()?);
    let corner = |cx: i64, cy: i64, weight: T, dpx: T, dpy: T| Tap {
        pixel: (cx >= 0 && cy >= 0 && (cx as usize) < m.width && (cy as usize) < m.height)
            .then(|| m.offset + cy as usize * m.width + cx as usize),
        weight,
        d_x: dpx * w,
        d_y: dpy * h,
    };
    Some((
        [
            corner(xi, yi, (one - fx) * (one - fy), -(one - fy), -(one - fx)),
            corner(xi + 1, yi, fx * (one - fy), one - fy, -fx),
            corner(xi, yi + 1, (one - fx) * fy, -fy, one - fx),
            corner(xi + 1, yi + 1, fx * fy, fy, fx),
        ],
        fx,
        fy,
    ))
}

impl SampleOp {
    fn forward<T: Float>(&self, values: &[T], locs: &[T], weights: &[T]) -> Vec<T> {
        let (hn, s, dh) = (self.heads, self.samples, self.head_dim);
        let mut out = vec![T::zero(); self.queries * hn * dh];
        for q in 0..self.queries {
            for h in 0..hn {
                let qh = q * hn + h;
                let acc = &mut out[qh * dh..(qh + 1) * dh];
                for si in 0..s {
                    let id = self.map_ids[q * s + si];
                    if id == INVALID_MAP {
                        continue;
                    }
                    let a = weights[qh * s + si];
                    let li = (qh * s + si) * 2;
                    let Some((tp, fx, fy)) = taps(&self.maps[id as usize], locs[li], locs[li + 1]) else {
                        continue;
                    };
                    let read = |t: &Tap<T>, c: usize| t.pixel.map_or(T::zero(), |px| values[(px * hn + h) * dh + c]);
                    // Nested lerps keep constant maps exact.
                    for (c, o) in acc.iter_mut().enumerate() {
                        let top = read(&tp[0], c) + fx * (read(&tp[1], c) - read(&tp[0], c));
                        let bottom = read(&tp[2], c) + fx * (read(&tp[3], c) - read(&tp[2], c));
                        *o = *o + a * (top + fy * (bottom - top));
                    }
                }
            }
        }
        out
    }

    fn backward<T: Float>(&self, values: &[T], locs: &[T], weights: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (hn, s, dh) = (self.heads, self.samples, self.head_dim);
        let mut g_values = vec![T::zero(); values.len()];
        let mut g_locs = vec![T::zero(); locs.len()];
        let mut g_weights = vec![T::zero(); weights.len()];
        for q in 0..self.queries {
            for h in 0..hn {
                let qh = q * hn + h;
                let g = &grad[qh * dh..(qh + 1) * dh];
                for si in 0..s {
                    let id = self.map_ids[q * s + si];
                    if id == INVALID_MAP {
                        continue;
                    }
                    let wi = qh * s + si;
                    let a = weights[wi];
                    let li = wi * 2;
                    let Some((tp, _, _)) = taps(&self.maps[id as usize], locs[li], locs[li + 1]) else {
                        continue;
                    };
                    let (mut gw, mut gx, mut gy) = (T::zero(), T::zero(), T::zero());
                    for tap in &tp {
                        let Some(px) = tap.pixel else { continue };
                        let base = (px * hn + h) * dh;
                        let row = &values[base..base + dh];
                        let dot = row.iter().zip(g).fold(T::zero(), |acc, (&v, &gg)| acc + v * gg);
                        gw = gw + tap.weight * dot;
                        gx = gx + tap.d_x * dot;
                        gy = gy + tap.d_y * dot;
                        let f = a * tap.weight;
                        for (gv, &gg) in g_values[base..base + dh].iter_mut().zip(g) {
                            *gv = *gv + f * gg;
                        }
                    }
                    g_weights[wi] = gw;
                    g_locs[li] = a * gx;
                    g_locs[li + 1] = a * gy;
                }
            }
        }
        (g_values, g_locs, g_weights)
    }
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("sampler expects contiguous inputs"),
    }
}

impl CustomOp3 for SampleOp {
    fn name(&self) -> &'static str {
        "weighted-bilinear-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from((self.queries, self.heads, self.head_dim));
        let storage = match (s1, s2, s3) {
            (CpuStorage::F32(v), CpuStorage::F32(l), CpuStorage::F32(w)) => {
                CpuStorage::F32(self.forward(slice(v, l1)?, slice(l, l2)?, slice(w, l3)?))
            }
            (CpuStorage::F64(v), CpuStorage::F64(l), CpuStorage::F64(w)) => {
                CpuStorage::F64(self.forward(slice(v, l1)?, slice(l, l2)?, slice(w, l3)?))
            }
            _ => candle_core::bail!("sampler supports matching f32 or f64 inputs"),
        };
        Ok((storage, shape))
    }

    fn bwd(
        &self,
        values: &Tensor,
        locs: &Tensor,
        weights: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        fn flat<T: candle_core::WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
            t.flatten_all()?.to_vec1::<T>()
        }
        let dev = values.device();
        let (gv, gl, gw) = match values.dtype() {
            DType::F32 => {
                let (a, b, c) = self.backward(
                    &flat::<f32>(values)?,
                    &flat::<f32>(locs)?,
                    &flat::<f32>(weights)?,
                    &flat::<f32>(grad)?,
                );
                (
                    Tensor::from_vec(a, values.shape(), dev)?,
                    Tensor::from_vec(b, locs.shape(), dev)?,
                    Tensor::from_vec(c, weights.shape(), dev)?,
                )
            }
            DType::F64 => {
                let (a, b, c) = self.backward(
                    &flat::<f64>(values)?,
                    &flat::<f64>(locs)?,
                    &flat::<f64>(weights)?,
                    &flat::<f64>(grad)?,
                );
                (
                    Tensor::from_vec(a, values.shape(), dev)?,
                    Tensor::from_vec(b, locs.shape(), dev)?,
                    Tensor::from_vec(c, weights.shape(), dev)?,
                )
            }
            dt => candle_core::bail!("sampler backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gv), Some(gl), Some(gw)))
    }
}
