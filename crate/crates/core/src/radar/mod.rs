//! Radar point clouds, voxel grouping and the learned radar BEV encoder.

mod cloud;
mod encoder;
mod voxelize;

pub use cloud::{RadarPointCloud, RADAR_ATTRIBUTES, RADAR_CSV_HEADER};
pub use encoder::{encode_points, pool_voxels, HeightCompressor, PointEncoder, PointFeatures, RadarEncoder};
pub use voxelize::{voxelize_radar, VoxelizedRadar};
