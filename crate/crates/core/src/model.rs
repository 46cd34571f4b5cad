//! The full camera-radar network.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneRegistry, PYRAMID_STRIDES, SPLAT_LEVEL};
use crate::error::{config_err, Result};
use crate::fusion::{compose_fusion_queries, BevEncoder, Fuser, FusionConfig};
use crate::geometry::{assign_cameras, geometry_key, BevGrid, CameraRig, SplatPlan, VoxelCameraAssignment};
use crate::head::{output_classes, SegmentationHead};
use crate::lifting::{compose_queries, BevEmbeddings, LiftPlan, Lifter, LiftingConfig, QueryInitializer};
use crate::nn::{grid_to_tokens, tokens_to_grid};
use crate::params::ParamStore;
use crate::radar::{voxelize_radar, RadarEncoder, RadarPointCloud, VoxelizedRadar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub grid: BevGrid,
    pub image_height: usize,
    pub image_width: usize,
    pub backbone: BackboneConfig,
    pub lifting: LiftingConfig,
    pub fusion: FusionConfig,
    /// Radar points kept per voxel.
    pub radar_cap: usize,
    /// Radar sweeps aggregated per sample.
    pub radar_sweeps: usize,
    /// `false` builds the camera-only variant: no radar features and every
    /// cell marked free for query initialization.
    pub use_radar: bool,
    /// Hidden width of the segmentation head; `0` means the feature width.
    pub head_hidden: usize,
    /// Query block size for gradient-free forward passes.
    pub inference_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: BevGrid::default(),
            image_height: 448,
            image_width: 896,
            backbone: BackboneConfig::default(),
            lifting: LiftingConfig::default(),
            fusion: FusionConfig::default(),
            radar_cap: 10,
            radar_sweeps: 5,
            use_radar: true,
            head_hidden: 0,
            inference_chunk: 2048,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.backbone.channels
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.image_height % 32 != 0 || self.image_width % 32 != 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(config_err(format!(
                "image size {}x{} is not divisible by 32",
                self.image_height, self.image_width
            )));
        }
        if self.grid.x_cells % 4 != 0 || self.grid.y_cells % 4 != 0 {
            return Err(config_err("grid cell counts must be divisible by 4"));
        }
        if self.radar_cap == 0 {
            return Err(config_err("radar_cap must be at least 1"));
        }
        let f = self.channels();
        for (what, heads) in [
            ("lifting", self.lifting.heads),
            ("query init", self.lifting.init_heads),
            ("fusion", self.fusion.heads),
        ] {
            if heads == 0 || f % heads != 0 {
                return Err(config_err(format!("{what}: F={f} not divisible by {heads} heads")));
            }
        }
        Ok(())
    }

    pub fn level_sizes(&self) -> Vec<(usize, usize)> {
        PYRAMID_STRIDES
            .iter()
            .map(|s| (self.image_height / s, self.image_width / s))
            .collect()
    }

    /// Conservative bound, in cells, on how far a change in one BEV cell's
    /// query-init input can travel to the logits of a freshly initialized
    /// model, whose sampling offsets are the fixed unit ring.
    pub fn init_receptive_radius(&self) -> usize {
        // ring taps reach 2 cells; encoder: stem 1, down path 2+2+2+4,
        // up path 2+3 (upsample alignment) + 1+1; head 1+1
        let ring = 2;
        let encoder = 1 + 4 + 6 + 5 + 2;
        let head = 2;
        ring * (1 + self.fusion.blocks) + encoder + head
    }
}

/// Per-calibration sampling plans.
#[derive(Debug)]
pub struct GeometryPlan {
    pub assignment: VoxelCameraAssignment,
    pub splat: SplatPlan,
    pub lift: LiftPlan,
}

/// One sample's network inputs.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `[N, 3, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub rig: CameraRig,
    pub radar: VoxelizedRadar,
}

/// Logits and the intermediate BEV maps, all `[C, X, Y]`.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub f_rad: Tensor,
    pub q_img: Tensor,
    pub q_lift: Tensor,
    pub f_img_bev: Tensor,
    pub fused: Tensor,
    pub encoded: Tensor,
}

#[derive(Debug)]
pub struct BevCar {
    pub config: ModelConfig,
    params: ParamStore,
    pub backbone: Box<dyn Backbone>,
    pub radar: Option<RadarEncoder>,
    pub query_init: QueryInitializer,
    pub lift_queries: BevEmbeddings,
    pub lifter: Lifter,
    pub fusion_queries: BevEmbeddings,
    pub fuser: Fuser,
    pub encoder: BevEncoder,
    pub head: SegmentationHead,
    plans: Mutex<HashMap<[u8; 32], Arc<GeometryPlan>>>,
}

impl BevCar {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_registry(config, &BackboneRegistry::default(), ParamStore::new(seed, dtype, device))
    }

    pub fn with_registry(config: ModelConfig, registry: &BackboneRegistry, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let f = config.channels();
        let z = config.grid.z_cells;
        let p = &params;
        let refs = crate::geometry::MAX_CAMERAS_PER_VOXEL * z * PYRAMID_STRIDES.len();
        let out_ch = if config.fusion.out_channels == 0 { f } else { config.fusion.out_channels };
        let hidden = if config.head_hidden == 0 { f } else { config.head_hidden };
        Ok(Self {
            backbone: registry.build(&p.pp("backbone"), &config.backbone)?,
            radar: if config.use_radar {
                Some(RadarEncoder::new(&p.pp("radar"), z, f)?)
            } else {
                None
            },
            query_init: QueryInitializer::new(&p.pp("query_init"), z, f, config.lifting.init_heads, config.lifting.init_points)?,
            lift_queries: BevEmbeddings::new(&p.pp("lift_queries"), &config.grid, f)?,
            lifter: Lifter::new(&p.pp("lift"), &config.lifting, f, refs)?,
            fusion_queries: BevEmbeddings::new(&p.pp("fusion_queries"), &config.grid, f)?,
            fuser: Fuser::new(&p.pp("fusion"), &config.fusion, f)?,
            encoder: BevEncoder::new(&p.pp("bev_encoder"), f, out_ch)?,
            head: SegmentationHead::new(&p.pp("head"), out_ch, hidden, output_classes().len())?,
            plans: Mutex::new(HashMap::new()),
            config,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Sampling plans for a calibration, computed once per distinct rig.
    pub fn plan(&self, rig: &CameraRig) -> Result<Arc<GeometryPlan>> {
        let (h, w) = rig.image_size()?;
        if (h, w) != (self.config.image_height, self.config.image_width) {
            return Err(config_err(format!(
                "rig images are {h}x{w}, model expects {}x{}",
                self.config.image_height, self.config.image_width
            )));
        }
        let key = geometry_key(&self.config.grid, rig);
        if let Some(p) = self.plans.lock().expect("plan cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let grid = &self.config.grid;
        let assignment = assign_cameras(grid, rig);
        let plan = Arc::new(GeometryPlan {
            splat: SplatPlan::new(grid, rig, &assignment)?,
            lift: LiftPlan::new(grid, rig, &assignment, &self.config.level_sizes())?,
            assignment,
        });
        self.plans.lock().expect("plan cache poisoned").insert(key, plan.clone());
        Ok(plan)
    }

    /// Groups a point cloud into this model's voxels.
    pub fn voxelize(&self, cloud: &RadarPointCloud, seed: u64) -> Result<VoxelizedRadar> {
        voxelize_radar(cloud, &self.config.grid, self.config.radar_cap, seed)
    }

    /// Full forward pass. With `train = false` no gradient graph is kept and
    /// attention runs in query blocks to bound memory.
    pub fn forward(&self, input: &ModelInput, train: bool) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let grid = &cfg.grid;
        let (x, y) = (grid.x_cells, grid.y_cells);
        let chunk = (!train).then_some(cfg.inference_chunk);
        let settle = |t: Tensor| if train { t } else { t.detach() };
        let plan = self.plan(&input.rig)?;
        let images = input.images.to_dtype(self.dtype())?;
        let pyramid = self.backbone.forward(&images)?;
        let pyramid = if train { pyramid } else { pyramid.detach() };

        let f = cfg.channels();
        let f_rad = match &self.radar {
            Some(enc) if cfg.use_radar => settle(enc.forward(&input.radar, self.dtype(), self.device())?),
            _ => Tensor::zeros((f, x, y), self.dtype(), self.device())?,
        };
        let occupancy = if cfg.use_radar {
            input.radar.bev_occupancy()
        } else {
            vec![false; grid.bev_cells()]
        };

        let splat = plan.splat.splat_tokens(&pyramid.levels[SPLAT_LEVEL])?;
        let splat = splat.reshape((grid.bev_cells(), grid.z_cells * f))?;
        let q_img = settle(self.query_init.forward_tokens(&splat, &occupancy, grid, chunk)?);
        let q_lift = compose_queries(&q_img, &self.lift_queries.position, &self.lift_queries.bev)?;
        let values = plan.lift.values(&pyramid)?;
        let f_img_bev = settle(self.lifter.forward(&q_lift, &plan.lift, &values, chunk)?);

        let q_fuse = compose_fusion_queries(&grid_to_tokens(&f_rad)?, &self.fusion_queries.position, &self.fusion_queries.bev)?;
        let fused = settle(self.fuser.forward(&q_fuse, &f_img_bev, grid, chunk)?);
        let fused_grid = tokens_to_grid(&fused, x, y)?;
        let encoded = settle(self.encoder.forward(&fused_grid)?);
        let logits = settle(self.head.forward(&encoded)?);
        Ok(ForwardOutput {
            logits,
            f_rad,
            q_img: tokens_to_grid(&q_img, x, y)?,
            q_lift: tokens_to_grid(&q_lift, x, y)?,
            f_img_bev: tokens_to_grid(&f_img_bev, x, y)?,
            fused: fused_grid,
            encoded,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraModel;
    use nalgebra::Point3;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            grid: BevGrid::new((8, 8, 2), (16.0, 16.0), (0.0, 4.0)).unwrap(),
            image_height: 32,
            image_width: 64,
            backbone: BackboneConfig {
                channels: 8,
                width: 4,
                ..Default::default()
            },
            lifting: LiftingConfig {
                blocks: 1,
                heads: 2,
                points: 2,
                init_heads: 2,
                init_points: 2,
                ffn_expansion: 2,
            },
            fusion: FusionConfig {
                blocks: 1,
                heads: 2,
                points: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn rig() -> CameraRig {
        let cam = CameraModel::looking("front", Point3::new(0.0, 0.0, 1.5), 0.0, 0.0, 90f64.to_radians(), 32, 64).unwrap();
        CameraRig::new(vec![cam]).unwrap()
    }

    fn input(model: &BevCar) -> ModelInput {
        let cloud = RadarPointCloud::new(vec![[3.0, 1.0, 0.5, 1.0, 0.0, 5.0], [-4.0, 2.0, 0.5, 0.0, 0.0, 2.0]], 5).unwrap();
        ModelInput {
            images: Tensor::full(0.3f32, (1, 3, 32, 64), &Device::Cpu).unwrap(),
            rig: rig(),
            radar: model.voxelize(&cloud, 0).unwrap(),
        }
    }

    #[test]
    fn output_shapes() {
        let model = BevCar::new(tiny_config(), 0, DType::F32, &Device::Cpu).unwrap();
        let out = model.forward(&input(&model), false).unwrap();
        assert_eq!(out.logits.dims(), &[8, 8, 8]);
        assert_eq!(out.f_rad.dims(), &[8, 8, 8]);
        assert_eq!(out.f_img_bev.dims(), &[8, 8, 8]);
        assert_eq!(out.encoded.dims(), &[8, 8, 8]);
    }

    #[test]
    fn train_and_inference_agree() {
        let model = BevCar::new(tiny_config(), 1, DType::F64, &Device::Cpu).unwrap();
        let inp = input(&model);
        let a = model.forward(&inp, true).unwrap().logits;
        let b = model.forward(&inp, false).unwrap().logits;
        let d = (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }

    #[test]
    fn camera_only_ignores_radar() {
        let cfg = ModelConfig {
            use_radar: false,
            ..tiny_config()
        };
        let model = BevCar::new(cfg, 2, DType::F32, &Device::Cpu).unwrap();
        let mut inp = input(&model);
        let a = model.forward(&inp, false).unwrap().logits.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        inp.radar = VoxelizedRadar::empty(&model.config.grid, 10);
        let b = model.forward(&inp, false).unwrap().logits.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert!(model.radar.is_none());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = tiny_config();
        cfg.image_height = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.grid = BevGrid::new((6, 8, 2), (12.0, 16.0), (0.0, 4.0)).unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.fusion.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plans_are_cached() {
        let model = BevCar::new(tiny_config(), 0, DType::F32, &Device::Cpu).unwrap();
        let a = model.plan(&rig()).unwrap();
        let b = model.plan(&rig()).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn single_cell_change_stays_within_receptive_radius() {
        let cfg = ModelConfig {
            grid: BevGrid::new((48, 48, 1), (48.0, 48.0), (0.0, 2.0)).unwrap(),
            ..tiny_config()
        };
        let model = BevCar::new(cfg, 3, DType::F64, &Device::Cpu).unwrap();
        let grid = model.config.grid.clone();
        let f = model.config.channels();
        let run = |bump: f64| -> Vec<f64> {
            let mut splat = vec![0.0; grid.bev_cells() * grid.z_cells * f];
            let c = 24 * 48 + 24;
            for v in &mut splat[c * f..(c + 1) * f] {
                *v = bump;
            }
            let splat = Tensor::from_vec(splat, (grid.bev_cells(), f), &Device::Cpu).unwrap();
            let q = model.query_init.forward_tokens(&splat, &vec![false; grid.bev_cells()], &grid, None).unwrap();
            let q = compose_queries(&q, &model.lift_queries.position, &model.lift_queries.bev).unwrap();
            let fq = compose_fusion_queries(&Tensor::zeros_like(&q).unwrap(), &model.fusion_queries.position, &model.fusion_queries.bev).unwrap();
            let fused = model.fuser.forward(&fq, &q, &grid, None).unwrap();
            let logits = model.head.forward(&model.encoder.forward(&tokens_to_grid(&fused, 48, 48).unwrap()).unwrap()).unwrap();
            logits.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        };
        let a = run(0.0);
        let b = run(5.0);
        let radius = model.config.init_receptive_radius() as i64;
        let plane = grid.bev_cells();
        let mut reach = 0;
        for (idx, (u, v)) in a.iter().zip(&b).enumerate() {
            if u != v {
                let cell = idx % plane;
                let (i, j) = ((cell / 48) as i64, (cell % 48) as i64);
                reach = reach.max((i - 24).abs().max((j - 24).abs()));
            }
        }
        assert!(reach > 0);
        assert!(reach <= radius, "change reached {reach} cells, bound {radius}");
    }
}
