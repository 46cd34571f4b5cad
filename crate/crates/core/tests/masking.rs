//! Camera masking: a camera's pixels only reach BEV cells it observes, up to
//! the fixed spatial reach of a freshly initialized model.

use bevcar_core::backbone::BackboneConfig;
use bevcar_core::fusion::FusionConfig;
use bevcar_core::geometry::{BevGrid, CameraModel, CameraRig};
use bevcar_core::lifting::LiftingConfig;
use bevcar_core::radar::RadarPointCloud;
use bevcar_core::{BevCar, ModelConfig, ModelInput};
use candle_core::{DType, Device, Tensor};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: usize = 32;
const W: usize = 64;
const CELLS: usize = 96;

fn config() -> ModelConfig {
    ModelConfig {
        grid: BevGrid::new((CELLS, CELLS, 2), (96.0, 96.0), (0.0, 4.0)).unwrap(),
        image_height: H,
        image_width: W,
        backbone: BackboneConfig { channels: 8, width: 4, ..Default::default() },
        lifting: LiftingConfig { blocks: 1, heads: 2, points: 2, init_heads: 2, init_points: 2, ffn_expansion: 2 },
        fusion: FusionConfig { blocks: 1, heads: 2, points: 2, ..Default::default() },
        ..Default::default()
    }
}

/// Front and left cameras; the rear-right quadrant is unobserved.
fn rig() -> CameraRig {
    let pitch = 8f64.to_radians();
    let fov = 80f64.to_radians();
    let eye = Point3::new(0.0, 0.0, 1.6);
    CameraRig::new(vec![
        CameraModel::looking("front", eye, 0.0, pitch, fov, H, W).unwrap(),
        CameraModel::looking("left", eye, std::f64::consts::FRAC_PI_2, pitch, fov, H, W).unwrap(),
    ])
    .unwrap()
}

fn random_images(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2 * 3 * H * W).map(|_| rng.random::<f32>()).collect()
}

fn input(model: &BevCar, images: Vec<f32>) -> ModelInput {
    let cloud = RadarPointCloud::new(
        vec![[10.0, 3.0, 0.5, 1.0, 0.0, 5.0], [-30.0, -30.0, 0.5, 0.0, 1.0, 2.0], [5.0, 20.0, 1.0, 0.0, 0.0, 0.0]],
        5,
    )
    .unwrap();
    ModelInput {
        images: Tensor::from_vec(images, (2, 3, H, W), &Device::Cpu).unwrap(),
        rig: rig(),
        radar: model.voxelize(&cloud, 0).unwrap(),
    }
}

fn cell_changes(a: &Tensor, b: &Tensor) -> Vec<bool> {
    let (c, x, y) = a.dims3().unwrap();
    let a = a.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let b = b.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    (0..x * y).map(|cell| (0..c).any(|ch| a[ch * x * y + cell] != b[ch * x * y + cell])).collect()
}

/// Cells within Chebyshev distance `r` of a marked cell.
fn dilate(mask: &[bool], r: usize) -> Vec<bool> {
    let r = r as i64;
    let n = CELLS as i64;
    (0..mask.len())
        .map(|cell| {
            let (i, j) = ((cell / CELLS) as i64, (cell % CELLS) as i64);
            (i - r..=i + r).any(|a| (j - r..=j + r).any(|b| a >= 0 && b >= 0 && a < n && b < n && mask[(a * n + b) as usize]))
        })
        .collect()
}

fn model() -> BevCar {
    BevCar::new(config(), 5, DType::F64, &Device::Cpu).unwrap()
}

#[test]
fn zeroing_a_camera_is_confined_to_its_cells() {
    let model = model();
    let images = random_images(1);
    let mut masked = images.clone();
    masked[..3 * H * W].iter_mut().for_each(|v| *v = 0.0);
    let a = model.forward(&input(&model, images), false).unwrap();
    let b = model.forward(&input(&model, masked), false).unwrap();
    let plan = model.plan(&rig()).unwrap();
    let seen = plan.assignment.cells_seen_by(&model.config.grid, 0);
    let reach = dilate(&seen, model.config.init_receptive_radius());

    let changed = cell_changes(&a.logits, &b.logits);
    assert!(changed.iter().any(|&c| c));
    for (cell, &c) in changed.iter().enumerate() {
        assert!(!c || reach[cell], "cell {cell} changed but is out of reach of camera 0");
    }
    // f_rad never sees images
    assert!(cell_changes(&a.f_rad, &b.f_rad).iter().all(|&c| !c));
}

#[test]
fn splat_and_lift_change_exactly_on_assigned_cells() {
    let model = model();
    let grid = model.config.grid.clone();
    let images = random_images(2);
    let mut masked = images.clone();
    masked[..3 * H * W].iter_mut().for_each(|v| *v = 0.0);
    let plan = model.plan(&rig()).unwrap();
    let seen = plan.assignment.cells_seen_by(&grid, 0);
    let pyr = |imgs: Vec<f32>| {
        let t = Tensor::from_vec(imgs, (2, 3, H, W), &Device::Cpu).unwrap().to_dtype(DType::F64).unwrap();
        model.backbone.forward(&t).unwrap()
    };
    let (pa, pb) = (pyr(images), pyr(masked));
    let splat = |p: &bevcar_core::backbone::FeaturePyramid| {
        let s = plan.splat.splat_tokens(&p.levels[1]).unwrap();
        s.reshape((grid.bev_cells(), grid.z_cells * 8)).unwrap().t().unwrap().reshape((grid.z_cells * 8, CELLS, CELLS)).unwrap()
    };
    let changed = cell_changes(&splat(&pa), &splat(&pb));
    assert_eq!(changed, seen);

    // lifting with fixed queries: only cells whose references hit camera 0
    let q = Tensor::ones((grid.bev_cells(), 8), DType::F64, &Device::Cpu).unwrap();
    let lift = |p| model.lifter.forward(&q, &plan.lift, &plan.lift.values(p).unwrap(), None).unwrap();
    let grid_of = |t: Tensor| bevcar_core::nn::tokens_to_grid(&t, CELLS, CELLS).unwrap();
    let changed = cell_changes(&grid_of(lift(&pa)), &grid_of(lift(&pb)));
    assert!(changed.iter().any(|&c| c));
    for (cell, &c) in changed.iter().enumerate() {
        assert!(!c || seen[cell], "lifted cell {cell} changed without a camera-0 reference");
    }
}

#[test]
fn unobserved_cells_ignore_image_content() {
    let model = model();
    let grid = model.config.grid.clone();
    let plan = model.plan(&rig()).unwrap();
    let observed = plan.assignment.observed_cells(&grid);
    let reach = dilate(&observed, model.config.init_receptive_radius());
    let far: Vec<usize> = (0..grid.bev_cells()).filter(|&c| !reach[c]).collect();
    assert!(far.len() > 100, "test rig leaves only {} cells out of reach", far.len());

    let base = model.forward(&input(&model, random_images(3)), false).unwrap().logits;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..3 {
        let other = model.forward(&input(&model, random_images(100 + rng.random_range(0..1000u64))), false).unwrap().logits;
        let changed = cell_changes(&base, &other);
        assert!(changed.iter().any(|&c| c), "trial {trial}: images had no effect at all");
        for &cell in &far {
            assert!(!changed[cell], "trial {trial}: out-of-view cell {cell} changed");
        }
    }
}
