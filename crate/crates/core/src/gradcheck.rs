//! Central finite-difference gradient checks on toy-sized modules.
//!
//! Every check builds its module in `f64`, redraws all parameters from a
//! normal distribution (so sampling offsets and attention logits are live),
//! and compares autograd against `(L(θ+ε) - L(θ-ε)) / 2ε` for the scalar
//! `L = Σ out ⊙ w` with a fixed random projection `w`. Error per tensor is
//! `‖g_analytic - g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` over the
//! sampled coordinates.

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{DeformableAttention, DeformableAttentionConfig, ReferencePoints, ValueMaps};
use crate::backbone::FeaturePyramid;
use crate::error::{config_err, Result};
use crate::fusion::{Fuser, FusionConfig};
use crate::geometry::{assign_cameras, BevGrid, CameraRig};
use crate::lifting::{LiftPlan, Lifter, LiftingConfig};
use crate::loss::{bce_loss, focal_loss, LossConfig};
use crate::params::ParamStore;
use crate::radar::{voxelize_radar, PointEncoder, RadarEncoder, RadarPointCloud};
use crate::sampler::{stack_maps, INVALID_MAP};

pub const STEP: f64 = 1e-6;
/// Coordinates sampled per tensor and draw.
pub const COORDS: usize = 6;
/// Gradient norms below this count as zero on both sides.
const NEGLIGIBLE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub module: &'static str,
    pub draws: usize,
    pub tensors_checked: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Tensor with the largest error, as `draw:name`.
    pub worst: String,
}

fn random_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let v: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn input_var(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Var> {
    Ok(Var::from_tensor(&random_tensor(shape, 1.0, rng)?)?)
}

/// Redraws every parameter of `p` as `N(0, std^2)`.
pub fn randomize(p: &ParamStore, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for (name, var) in p.named_vars() {
        p.set(&name, &random_tensor(var.dims(), std, rng)?)?;
    }
    Ok(())
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Vector relative error, zero when both sides are negligible.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < NEGLIGIBLE {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error over `vars` for one parameter draw, with the name
/// of the offending tensor and the number of coordinates compared.
pub fn check_draw(
    vars: &[(String, Var)],
    forward: &dyn Fn() -> Result<Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, String, usize)> {
    let out = forward()?;
    let proj = random_tensor(out.dims(), 1.0, rng)?;
    let objective = || -> Result<f64> { Ok(forward()?.mul(&proj)?.sum_all()?.to_scalar::<f64>()?) };
    let grads = out.mul(&proj)?.sum_all()?.backward()?;
    let (mut worst, mut worst_name, mut coords) = (0.0f64, String::new(), 0);
    for (name, var) in vars {
        let n = var.elem_count();
        let analytic_all = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?,
            None => vec![0.0; n],
        };
        let picked: Vec<usize> = if n <= COORDS { (0..n).collect() } else { sample(rng, n, COORDS).into_vec() };
        let base = var.as_tensor().copy()?;
        let mut values = flat(&base)?;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for &i in &picked {
            let orig = values[i];
            values[i] = orig + STEP;
            var.set(&Tensor::from_slice(&values, var.dims(), &Device::Cpu)?)?;
            let up = objective()?;
            values[i] = orig - STEP;
            var.set(&Tensor::from_slice(&values, var.dims(), &Device::Cpu)?)?;
            let down = objective()?;
            values[i] = orig;
            analytic.push(analytic_all[i]);
            numeric.push((up - down) / (2.0 * STEP));
        }
        var.set(&base)?;
        coords += picked.len();
        let err = relative_error(&analytic, &numeric);
        if err >= worst {
            worst = err;
            worst_name = name.clone();
        }
    }
    Ok((worst, worst_name, coords))
}

fn run(
    module: &'static str,
    draws: usize,
    seed: u64,
    mut build: impl FnMut(u64, &mut ChaCha8Rng) -> Result<(Vec<(String, Var)>, Box<dyn Fn() -> Result<Tensor>>)>,
) -> Result<GradCheck> {
    let mut report = GradCheck {
        module,
        draws,
        tensors_checked: 0,
        coords_checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(d as u64 * 7919));
        let (vars, forward) = build(d as u64, &mut rng)?;
        let (err, name, coords) = check_draw(&vars, forward.as_ref(), &mut rng)?;
        report.tensors_checked += vars.len();
        report.coords_checked += coords;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = format!("{d}:{name}");
        }
    }
    Ok(report)
}

fn store(seed: u64) -> ParamStore {
    ParamStore::new(seed, DType::F64, &Device::Cpu)
}

fn with_inputs(p: &ParamStore, inputs: &[(&str, &Var)]) -> Vec<(String, Var)> {
    let mut vars = p.named_vars();
    vars.extend(inputs.iter().map(|(n, v)| (n.to_string(), (*v).clone())));
    vars
}

/// Two value maps (4x4 and 2x3), two references per query, one of which is
/// invalid for the first query.
pub fn deformable_attention(draws: usize, seed: u64) -> Result<GradCheck> {
    run("deformable attention", draws, seed, |d, rng| {
        let cfg = DeformableAttentionConfig { channels: 8, heads: 2, points: 2, refs: 2 };
        let p = store(d);
        let att = DeformableAttention::new(&p, cfg)?;
        randomize(&p, 0.5, rng)?;
        let queries = 5;
        let q = input_var(&[queries, 8], rng)?;
        let sizes = [(4, 4), (2, 3)];
        let v = input_var(&[16 + 6, 8], rng)?;
        let locations = (0..queries * 2).map(|_| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]).collect();
        let mut map_ids: Vec<u32> = (0..queries * 2).map(|i| (i % 2) as u32).collect();
        map_ids[1] = INVALID_MAP;
        let refs = ReferencePoints::new(queries, 2, locations, map_ids)?;
        let vars = with_inputs(&p, &[("queries", &q), ("values", &v)]);
        let fwd = move || {
            let values = ValueMaps { data: v.as_tensor().clone(), maps: stack_maps(&sizes).into() };
            att.forward(q.as_tensor(), &refs, &values)
        };
        Ok((vars, Box::new(fwd)))
    })
}

/// Shared per-point MLP, gradients to its weights and its input points.
pub fn radar_point_encoder(draws: usize, seed: u64) -> Result<GradCheck> {
    run("radar point encoder", draws, seed, |d, rng| {
        let p = store(d);
        let enc = PointEncoder::new(&p, &[6, 4, 8], true)?;
        randomize(&p, 0.5, rng)?;
        let x = input_var(&[3, 4, 6], rng)?;
        let vars = with_inputs(&p, &[("points", &x)]);
        Ok((vars, Box::new(move || enc.forward(x.as_tensor()))))
    })
}

fn toy_grid() -> Result<BevGrid> {
    BevGrid::new((4, 4, 2), (16.0, 16.0), (0.0, 4.0))
}

/// Point encoder, voxel max pooling and height compression on a 4x4x2 grid.
pub fn radar_encoder(draws: usize, seed: u64) -> Result<GradCheck> {
    run("radar encoder", draws, seed, |d, rng| {
        let grid = toy_grid()?;
        let p = store(d);
        let enc = RadarEncoder::new(&p, grid.z_cells, 8)?;
        randomize(&p, 0.5, rng)?;
        let points = (0..12)
            .map(|_| {
                [
                    rng.random_range(-7.9..7.9),
                    rng.random_range(-7.9..7.9),
                    rng.random_range(0.1..3.9),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-10.0..20.0),
                ]
            })
            .collect();
        let voxels = voxelize_radar(&RadarPointCloud::new(points, 1)?, &grid, 10, d)?;
        let vars = p.named_vars();
        Ok((vars, Box::new(move || enc.forward(&voxels, DType::F64, &Device::Cpu))))
    })
}

/// One lifting block over a six-camera 32x64 rig and a 4x4x2 grid, with
/// gradients to the queries and to every pyramid level.
pub fn lifting(draws: usize, seed: u64) -> Result<GradCheck> {
    let grid = toy_grid()?;
    let rig = CameraRig::surround(32, 64)?;
    let assignment = assign_cameras(&grid, &rig);
    let sizes = [(8, 16), (4, 8), (2, 4), (1, 2)];
    let plan = LiftPlan::new(&grid, &rig, &assignment, &sizes)?;
    if !(0..grid.bev_cells()).any(|c| plan.refs.any_valid(c)) {
        return Err(config_err("toy lifting grid is not seen by any camera"));
    }
    run("lifting (1 block)", draws, seed, |d, rng| {
        let cfg = LiftingConfig { blocks: 1, heads: 2, points: 2, ..LiftingConfig::default() };
        let p = store(d);
        let lifter = Lifter::new(&p, &cfg, 8, plan.refs_per_query())?;
        randomize(&p, 0.5, rng)?;
        let q = input_var(&[grid.bev_cells(), 8], rng)?;
        let levels = sizes
            .iter()
            .map(|&(h, w)| input_var(&[rig.len(), 8, h, w], rng))
            .collect::<Result<Vec<_>>>()?;
        let mut vars = with_inputs(&p, &[("queries", &q)]);
        vars.extend(levels.iter().enumerate().map(|(i, v)| (format!("level{i}"), v.clone())));
        let plan = plan.clone();
        let fwd = move || {
            let pyramid = FeaturePyramid { levels: levels.iter().map(|v| v.as_tensor().clone()).collect() };
            lifter.forward(q.as_tensor(), &plan, &plan.values(&pyramid)?, None)
        };
        Ok((vars, Box::new(fwd)))
    })
}

/// One fusion block on a 4x4 grid, gradients to both token inputs.
pub fn fusion(draws: usize, seed: u64) -> Result<GradCheck> {
    let grid = toy_grid()?;
    run("fusion (1 block)", draws, seed, |d, rng| {
        let cfg = FusionConfig { blocks: 1, heads: 2, points: 2, ..FusionConfig::default() };
        let p = store(d);
        let fuser = Fuser::new(&p, &cfg, 8)?;
        randomize(&p, 0.5, rng)?;
        let q = input_var(&[grid.bev_cells(), 8], rng)?;
        let img = input_var(&[grid.bev_cells(), 8], rng)?;
        let vars = with_inputs(&p, &[("queries", &q), ("image_bev", &img)]);
        let grid = grid.clone();
        Ok((vars, Box::new(move || fuser.forward(q.as_tensor(), img.as_tensor(), &grid, None))))
    })
}

fn random_mask(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

pub fn bce(draws: usize, seed: u64) -> Result<GradCheck> {
    run("binary cross-entropy", draws, seed, |_, rng| {
        let z = Var::from_tensor(&(random_tensor(&[4, 4], 1.0, rng)? * 3.0)?)?;
        let gt = random_mask(16, 0.4, rng);
        let mut valid = random_mask(16, 0.8, rng);
        valid[0] = true;
        let vars = vec![("logits".to_string(), z.clone())];
        Ok((vars, Box::new(move || Ok(bce_loss(z.as_tensor(), &gt, &valid)?.value))))
    })
}

pub fn focal(draws: usize, seed: u64) -> Result<GradCheck> {
    run("focal loss", draws, seed, |_, rng| {
        let z = Var::from_tensor(&(random_tensor(&[3, 4, 4], 1.0, rng)? * 3.0)?)?;
        let gt: Vec<Vec<bool>> = (0..3).map(|_| random_mask(16, 0.3, rng)).collect();
        let mut valid = random_mask(16, 0.8, rng);
        valid[0] = true;
        let cfg = LossConfig {
            alpha: rng.random_range(0.1..0.9),
            gamma: rng.random_range(0.0..4.0),
            ..LossConfig::default()
        };
        let vars = vec![("logits".to_string(), z.clone())];
        Ok((vars, Box::new(move || Ok(focal_loss(z.as_tensor(), &gt, &valid, &cfg)?.value))))
    })
}

/// Every check above with `draws` parameter draws each.
pub fn suite(draws: usize, seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        deformable_attention(draws, seed)?,
        radar_point_encoder(draws, seed)?,
        radar_encoder(draws, seed)?,
        lifting(draws, seed)?,
        fusion(draws, seed)?,
        bce(draws, seed)?,
        focal(draws, seed)?,
    ])
}
