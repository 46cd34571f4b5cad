//! Lifting image features into the BEV plane.
//!
//! Queries start from a radar-guided initialization over splatted 1/8-scale
//! features, are summed with learnable position and BEV embeddings, and are
//! refined by a stack of deformable-attention blocks whose references are
//! the projections of each cell's voxel centers into its assigned cameras,
//! replicated over all pyramid levels.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, DeformableAttention, DeformableAttentionConfig, ReferencePoints, ValueMaps};
use crate::backbone::FeaturePyramid;
use crate::error::{config_err, shape_err, Result};
use crate::geometry::{BevGrid, CameraRig, VoxelCameraAssignment, MAX_CAMERAS_PER_VOXEL};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};
use crate::sampler::{stack_maps, INVALID_MAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftingConfig {
    pub blocks: usize,
    pub heads: usize,
    pub points: usize,
    /// Heads and points of the query-initialization attention.
    pub init_heads: usize,
    pub init_points: usize,
    pub ffn_expansion: usize,
}

impl Default for LiftingConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            heads: 4,
            points: 4,
            init_heads: 4,
            init_points: 4,
            ffn_expansion: 2,
        }
    }
}

/// Elementwise sum of query summands of equal shape.
pub fn compose_queries(q_img: &Tensor, q_pos: &Tensor, q_bev: &Tensor) -> Result<Tensor> {
    if q_img.dims() != q_pos.dims() || q_img.dims() != q_bev.dims() {
        return Err(shape_err(format!(
            "query summands differ in shape: {:?}, {:?}, {:?}",
            q_img.dims(),
            q_pos.dims(),
            q_bev.dims()
        )));
    }
    Ok(((q_img + q_pos)? + q_bev)?)
}

/// Sinusoidal embedding of cell `(i, j)`: the first half of the channels
/// encodes `i`, the second half `j`. Returned as `X*Y*F` row-major values.
pub fn sinusoidal_embedding(x_cells: usize, y_cells: usize, channels: usize) -> Vec<f64> {
    let half = channels / 2;
    let pairs = (half / 2).max(1);
    let enc = |pos: usize, c: usize| -> f64 {
        let k = c / 2;
        let freq = 1.0 / 10000f64.powf(k as f64 / pairs as f64);
        let a = pos as f64 * freq;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut out = Vec::with_capacity(x_cells * y_cells * channels);
    for i in 0..x_cells {
        for j in 0..y_cells {
            for c in 0..channels {
                out.push(if c < half {
                    enc(i, c)
                } else {
                    enc(j, c - half)
                });
            }
        }
    }
    out
}

/// Learnable `[X*Y, F]` embeddings: position (sinusoidal start) and BEV
/// queries (small normal start).
#[derive(Clone, Debug)]
pub struct BevEmbeddings {
    pub position: Tensor,
    pub bev: Tensor,
}

impl BevEmbeddings {
    pub fn new(p: &ParamStore, grid: &BevGrid, channels: usize) -> Result<Self> {
        let n = grid.bev_cells();
        Ok(Self {
            position: p.get(
                (n, channels),
                "position",
                Init::Values(sinusoidal_embedding(grid.x_cells, grid.y_cells, channels)),
            )?,
            bev: p.get((n, channels), "bev", Init::Normal { std: 0.02 })?,
        })
    }
}

/// One reference per BEV cell at its own location on the BEV plane, which
/// is read as a map of height `X` and width `Y`.
pub fn cell_references(grid: &BevGrid) -> ReferencePoints {
    let mut locs = Vec::with_capacity(grid.bev_cells());
    for i in 0..grid.x_cells {
        for j in 0..grid.y_cells {
            locs.push(grid.cell_normalized(i, j));
        }
    }
    ReferencePoints::single_map(locs)
}

/// `[1|0]` occupancy as a `[X*Y, 1]` tensor.
fn occupancy_column(occupancy: &[bool], like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = occupancy.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (occupancy.len(), 1), like.device())?.to_dtype(like.dtype())?)
}

/// Radar-guided query initialization: the height stack of splatted features
/// is collapsed to `F` channels per cell, a learned occupied/free embedding
/// is added to form per-cell queries, and one BEV-plane deformable
/// attention pass reads the collapsed map around each cell.
#[derive(Clone, Debug)]
pub struct QueryInitializer {
    collapse: Linear,
    occupancy: Tensor,
    pub attention: DeformableAttention,
    z_cells: usize,
    channels: usize,
}

impl QueryInitializer {
    pub fn new(p: &ParamStore, z_cells: usize, channels: usize, heads: usize, points: usize) -> Result<Self> {
        let cfg = DeformableAttentionConfig {
            channels,
            heads,
            points,
            refs: 1,
        };
        Ok(Self {
            collapse: Linear::xavier(&p.pp("collapse"), z_cells * channels, channels, true)?,
            occupancy: p.get((2, channels), "occupancy", Init::Normal { std: 0.02 })?,
            attention: DeformableAttention::new(&p.pp("attn"), cfg)?,
            z_cells,
            channels,
        })
    }

    /// `splat` is `[X*Y, Z*F]` with channel `k*F + f`; returns `Q_img` tokens `[X*Y, F]`.
    pub fn forward_tokens(&self, splat: &Tensor, occupancy: &[bool], grid: &BevGrid, chunk: Option<usize>) -> Result<Tensor> {
        let (n, zf) = splat.dims2()?;
        if n != grid.bev_cells() || zf != self.z_cells * self.channels || occupancy.len() != n {
            return Err(config_err(format!(
                "query init expects [{}, {}] splat and {} occupancy flags, got {:?} and {}",
                grid.bev_cells(),
                self.z_cells * self.channels,
                grid.bev_cells(),
                splat.dims(),
                occupancy.len()
            )));
        }
        let collapsed = self.collapse.forward(splat)?;
        let occ = occupancy_column(occupancy, splat)?;
        let free = self.occupancy.get(0)?.unsqueeze(0)?;
        let occupied = self.occupancy.get(1)?.unsqueeze(0)?;
        let emb = (free.broadcast_mul(&(1.0 - &occ)?)? + occupied.broadcast_mul(&occ)?)?;
        let queries = (&collapsed + emb)?;
        let values = ValueMaps::from_tokens(&collapsed, grid.x_cells, grid.y_cells)?;
        let refs = cell_references(grid);
        match chunk {
            Some(c) => self.attention.forward_detached(&queries, &refs, &values, c),
            None => self.attention.forward(&queries, &refs, &values),
        }
    }

    /// `splat` is `[F, X, Y, Z]`; returns `Q_img` as `[F, X, Y]`.
    pub fn forward(&self, splat: &Tensor, occupancy: &[bool], grid: &BevGrid) -> Result<Tensor> {
        let (f, x, y, z) = splat.dims4()?;
        let tokens = splat.permute((1, 2, 3, 0))?.reshape((x * y, z * f))?;
        let q = self.forward_tokens(&tokens, occupancy, grid, None)?;
        crate::nn::tokens_to_grid(&q, x, y)
    }
}

/// Reference points for lifting. Query `i*Y + j` has `2 * Z * L` references,
/// reference `(slot * Z + k) * L + l` being the projection of voxel
/// `(i, j, k)` into its `slot`-th assigned camera, read on pyramid level
/// `l`. Value maps are ordered level-major: map `l * N + camera`.
#[derive(Clone, Debug)]
pub struct LiftPlan {
    pub refs: ReferencePoints,
    pub cameras: usize,
    pub level_sizes: Vec<(usize, usize)>,
}

impl LiftPlan {
    pub fn new(
        grid: &BevGrid,
        rig: &CameraRig,
        assignment: &VoxelCameraAssignment,
        level_sizes: &[(usize, usize)],
    ) -> Result<Self> {
        if assignment.len() != grid.voxel_count() {
            return Err(config_err("camera assignment does not match the grid"));
        }
        let (h, w) = rig.image_size()?;
        let (z, l, n) = (grid.z_cells, level_sizes.len(), rig.len());
        let r = MAX_CAMERAS_PER_VOXEL * z * l;
        let q = grid.bev_cells();
        let mut locations = vec![[0.0, 0.0]; q * r];
        let mut map_ids = vec![INVALID_MAP; q * r];
        for cell in 0..q {
            for k in 0..z {
                let voxel = cell * z + k;
                for slot in 0..MAX_CAMERAS_PER_VOXEL {
                    let Some(hit) = assignment.slot(voxel, slot) else { continue };
                    let loc = [(hit.u + 0.5) / w as f64, (hit.v + 0.5) / h as f64];
                    for lev in 0..l {
                        let idx = cell * r + (slot * z + k) * l + lev;
                        locations[idx] = loc;
                        map_ids[idx] = (lev * n + hit.camera) as u32;
                    }
                }
            }
        }
        Ok(Self {
            refs: ReferencePoints::new(q, r, locations, map_ids)?,
            cameras: n,
            level_sizes: level_sizes.to_vec(),
        })
    }

    pub fn refs_per_query(&self) -> usize {
        self.refs.refs
    }

    /// Stacks a pyramid into value maps in this plan's order.
    pub fn values(&self, pyramid: &FeaturePyramid) -> Result<ValueMaps> {
        if pyramid.sizes()? != self.level_sizes || pyramid.cameras()? != self.cameras {
            return Err(config_err(format!(
                "pyramid of {} cameras at {:?} does not match lifting plan for {} cameras at {:?}",
                pyramid.cameras()?,
                pyramid.sizes()?,
                self.cameras,
                self.level_sizes
            )));
        }
        let parts = pyramid
            .levels
            .iter()
            .map(|lv| {
                let (n, f, h, w) = lv.dims4()?;
                lv.permute((0, 2, 3, 1))?.reshape((n * h * w, f))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let sizes: Vec<(usize, usize)> = self
            .level_sizes
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, self.cameras))
            .collect();
        Ok(ValueMaps {
            data: Tensor::cat(&parts, 0)?,
            maps: stack_maps(&sizes).into(),
        })
    }
}

/// Cascade of deformable cross-attention blocks from BEV queries to image
/// pyramids.
#[derive(Clone, Debug)]
pub struct Lifter {
    pub blocks: Vec<AttentionBlock>,
}

impl Lifter {
    pub fn new(p: &ParamStore, cfg: &LiftingConfig, channels: usize, refs: usize) -> Result<Self> {
        let att = DeformableAttentionConfig {
            channels,
            heads: cfg.heads,
            points: cfg.points,
            refs,
        };
        let blocks = (0..cfg.blocks)
            .map(|b| AttentionBlock::new(&p.pp(format!("block{b}")), att, cfg.ffn_expansion))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// `queries` is `Q^L` as `[X*Y, F]` tokens; returns `f_img,bev` tokens.
    pub fn forward(&self, queries: &Tensor, plan: &LiftPlan, values: &ValueMaps, chunk: Option<usize>) -> Result<Tensor> {
        let mut x = queries.clone();
        for block in &self.blocks {
            x = block.forward(&x, &plan.refs, values, chunk)?;
        }
        Ok(x)
    }
}

/// Reduces `[X*Y, F]` to per-cell max absolute value, handy for locating
/// changed cells in tests.
pub fn cell_abs_max(tokens: &Tensor) -> Result<Vec<f64>> {
    Ok(tokens
        .abs()?
        .max(D::Minus1)?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assign_cameras, CameraModel};
    use candle_core::{DType, Device};
    use nalgebra::Point3;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn compose_is_elementwise_sum() {
        let a = Tensor::full(1.0f64, (3, 2), &dev()).unwrap();
        let b = Tensor::full(2.0f64, (3, 2), &dev()).unwrap();
        let c = Tensor::full(4.0f64, (3, 2), &dev()).unwrap();
        let z = Tensor::zeros((3, 2), DType::F64, &dev()).unwrap();
        let s = compose_queries(&a, &b, &c).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|&v| v == 7.0));
        let id = compose_queries(&a, &z, &z).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(id.iter().all(|&v| v == 1.0));
        assert!(compose_queries(&a, &z.reshape((2, 3)).unwrap(), &z).is_err());
    }

    #[test]
    fn sinusoid_distinguishes_cells() {
        let e = sinusoidal_embedding(4, 4, 8);
        assert_eq!(e.len(), 4 * 4 * 8);
        let cell = |i: usize, j: usize| &e[(i * 4 + j) * 8..(i * 4 + j + 1) * 8];
        assert_ne!(cell(0, 1), cell(1, 0));
        assert_eq!(&cell(2, 3)[..4], &cell(2, 0)[..4]);
    }

    #[test]
    fn zero_splat_gives_zero_queries() {
        let grid = BevGrid::new((4, 4, 2), (4.0, 4.0), (0.0, 2.0)).unwrap();
        let p = ParamStore::new(0, DType::F64, &dev());
        let init = QueryInitializer::new(&p, 2, 4, 2, 2).unwrap();
        let splat = Tensor::zeros((4, 4, 4, 2), DType::F64, &dev()).unwrap();
        let q = init.forward(&splat, &[false; 16], &grid).unwrap();
        assert!(q.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occupancy_flip_is_local_at_init() {
        let grid = BevGrid::new((8, 8, 2), (8.0, 8.0), (0.0, 2.0)).unwrap();
        let p = ParamStore::new(4, DType::F64, &dev());
        let init = QueryInitializer::new(&p, 2, 4, 2, 2).unwrap();
        // queries only steer offsets and weights once those layers are non-zero
        p.set("attn.attn.weight", &Tensor::randn(0.0, 1.0, (4, 4), &dev()).unwrap()).unwrap();
        p.set("attn.offset.weight", &(Tensor::randn(0.0, 1.0, (8, 4), &dev()).unwrap() * 0.1).unwrap()).unwrap();
        let splat = Tensor::randn(0.0, 1.0, (4, 8, 8, 2), &dev()).unwrap();
        let mut occ = vec![false; 64];
        let a = init.forward(&splat, &occ, &grid).unwrap();
        occ[3 * 8 + 4] = true;
        let b = init.forward(&splat, &occ, &grid).unwrap();
        let diff = cell_abs_max(&crate::nn::grid_to_tokens(&(a - b).unwrap()).unwrap()).unwrap();
        for (c, d) in diff.iter().enumerate() {
            if c == 3 * 8 + 4 {
                assert!(*d > 0.0);
            } else {
                assert_eq!(*d, 0.0, "cell {c} changed");
            }
        }
    }

    #[test]
    fn constant_splat_identity_path_is_constant() {
        let grid = BevGrid::new((6, 6, 1), (6.0, 6.0), (0.0, 1.0)).unwrap();
        let p = ParamStore::new(0, DType::F64, &dev());
        let f = 2;
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        p.pp("collapse").get((f, f), "weight", Init::Values(eye.clone())).unwrap();
        p.pp("collapse").get(f, "bias", Init::Zeros).unwrap();
        p.pp("attn.value").get((f, f), "weight", Init::Values(eye.clone())).unwrap();
        p.pp("attn.out").get((f, f), "weight", Init::Values(eye)).unwrap();
        p.pp("attn.offset").get(2 * 2, "bias", Init::Zeros).unwrap();
        let init = QueryInitializer::new(&p, 1, f, 1, 2).unwrap();
        let splat = Tensor::full(0.7f64, (f, 6, 6, 1), &dev()).unwrap();
        let q = init.forward(&splat, &[true; 36], &grid).unwrap();
        assert!(q.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    fn front_rig() -> CameraRig {
        let cam = CameraModel::looking("front", Point3::new(0.0, 0.0, 1.0), 0.0, 0.0, 90f64.to_radians(), 32, 64).unwrap();
        CameraRig::new(vec![cam]).unwrap()
    }

    #[test]
    fn lift_plan_references_follow_assignment() {
        let grid = BevGrid::new((4, 4, 2), (8.0, 8.0), (0.0, 2.0)).unwrap();
        let rig = front_rig();
        let a = assign_cameras(&grid, &rig);
        let sizes = [(8, 16), (4, 8), (2, 4), (1, 2)];
        let plan = LiftPlan::new(&grid, &rig, &a, &sizes).unwrap();
        assert_eq!(plan.refs_per_query(), 2 * 2 * 4);
        for cell in 0..16 {
            for k in 0..2 {
                let voxel = cell * 2 + k;
                let hit = a.slot(voxel, 0);
                for lev in 0..4 {
                    let r = (k) * 4 + lev;
                    assert_eq!(plan.refs.is_valid(cell, r), hit.is_some());
                    if let Some(h) = hit {
                        assert_eq!(plan.refs.map_ids[cell * 16 + r], lev as u32);
                        assert_eq!(plan.refs.locations[cell * 16 + r], [(h.u + 0.5) / 64.0, (h.v + 0.5) / 32.0]);
                    }
                }
                // second slot never used with one camera
                for lev in 0..4 {
                    assert!(!plan.refs.is_valid(cell, (2 + k) * 4 + lev));
                }
            }
        }
    }

    #[test]
    fn zero_pyramid_passes_queries_through_residual_path() {
        let grid = BevGrid::new((4, 4, 2), (8.0, 8.0), (0.0, 2.0)).unwrap();
        let rig = front_rig();
        let a = assign_cameras(&grid, &rig);
        let sizes = [(8, 16), (4, 8), (2, 4), (1, 2)];
        let plan = LiftPlan::new(&grid, &rig, &a, &sizes).unwrap();
        let p = ParamStore::new(2, DType::F64, &dev());
        let cfg = LiftingConfig {
            blocks: 2,
            ..Default::default()
        };
        let lifter = Lifter::new(&p, &cfg, 8, plan.refs_per_query()).unwrap();
        let pyr = FeaturePyramid {
            levels: sizes
                .iter()
                .map(|&(h, w)| Tensor::zeros((1, 8, h, w), DType::F64, &dev()).unwrap())
                .collect(),
        };
        let values = plan.values(&pyr).unwrap();
        let q = Tensor::randn(0.0, 1.0, (16, 8), &dev()).unwrap();
        let out = lifter.forward(&q, &plan, &values, None).unwrap();
        // oracle: attention contributes nothing, only the FFN sublayers act
        let mut x = q.clone();
        for b in &lifter.blocks {
            let att = b.attention_input(&x, &plan.refs, &values, None).unwrap();
            assert_eq!(att.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
            x = b.forward(&x, &plan.refs, &values, None).unwrap();
        }
        let d = (out - x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }
}
