//! On-disk sample layout:
//!
//! ```text
//! <root>/<token>/cam_<name>.png      8-bit RGB, one per camera
//! <root>/<token>/radar.csv           x,y,z,vx,vy,rcs
//! <root>/<token>/calib.json          camera records
//! <root>/<token>/gt_vehicle.png      1-bit mask, rows along x
//! <root>/<token>/gt_map_<class>.png  1-bit mask per map class
//! <root>/<token>/gt_valid.png        only written when some cell is invalid
//! <root>/<token>/meta.json           token, condition, seed, sweeps
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use bevcar_core::geometry::CameraRig;
use bevcar_core::head::MAP_CLASSES;
use bevcar_core::loss::BevGroundTruth;
use bevcar_core::radar::RadarPointCloud;
use serde::{Deserialize, Serialize};

use crate::error::{load_err, DataError, Result};
use crate::render::{RgbImage, Sample};
use crate::scene::Condition;

pub const RADAR_FILE: &str = "radar.csv";
pub const CALIB_FILE: &str = "calib.json";
pub const META_FILE: &str = "meta.json";
pub const VEHICLE_FILE: &str = "gt_vehicle.png";
pub const VALID_FILE: &str = "gt_valid.png";

pub fn camera_file(name: &str) -> String {
    format!("cam_{name}.png")
}

pub fn map_file(class: &str) -> String {
    format!("gt_map_{class}.png")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub token: String,
    pub condition: Condition,
    pub seed: u64,
    pub sweep_count: usize,
}

fn schema_err(file: &Path, message: impl std::fmt::Display) -> DataError {
    DataError::Schema {
        file: file.to_path_buf(),
        message: message.to_string(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| load_err(path, e))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| load_err(path, e))?;
    writer.write_image_data(data).map_err(|e| load_err(path, e))?;
    writer.finish().map_err(|e| load_err(path, e))?;
    Ok(())
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let dec = png::Decoder::new(BufReader::new(open(path)?));
    let mut reader = dec.read_info().map_err(|e| schema_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| schema_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data: buf,
    })
}

pub fn save_image(path: &Path, image: &RgbImage) -> Result<()> {
    write_png(path, image.width, image.height, png::ColorType::Rgb, png::BitDepth::Eight, &image.data)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let d = read_png(path)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(schema_err(path, format!("expected 8-bit RGB, found {:?} at {:?}", d.color, d.depth)));
    }
    Ok(RgbImage {
        height: d.height,
        width: d.width,
        data: d.data,
    })
}

/// Writes an `[rows, cols]` mask as a 1-bit grayscale PNG.
pub fn save_mask(path: &Path, rows: usize, cols: usize, mask: &[bool]) -> Result<()> {
    let stride = cols.div_ceil(8);
    let mut data = vec![0u8; stride * rows];
    for r in 0..rows {
        for c in 0..cols {
            if mask[r * cols + c] {
                data[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    write_png(path, cols, rows, png::ColorType::Grayscale, png::BitDepth::One, &data)
}

pub fn load_mask(path: &Path, rows: usize, cols: usize) -> Result<Vec<bool>> {
    let d = read_png(path)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::One {
        return Err(schema_err(path, format!("expected a 1-bit mask, found {:?} at {:?}", d.color, d.depth)));
    }
    if (d.height, d.width) != (rows, cols) {
        return Err(schema_err(path, format!("mask is {}x{}, expected {rows}x{cols}", d.height, d.width)));
    }
    let stride = cols.div_ceil(8);
    Ok((0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            d.data[r * stride + c / 8] & (0x80 >> (c % 8)) != 0
        })
        .collect())
}

pub fn sample_dir(root: &Path, token: &str) -> PathBuf {
    root.join(token)
}

pub fn save_sample(root: &Path, sample: &Sample) -> Result<PathBuf> {
    sample.gt.validate()?;
    if sample.images.len() != sample.calibration.len() {
        return Err(DataError::Generation(format!(
            "sample {} has {} images for {} cameras",
            sample.token,
            sample.images.len(),
            sample.calibration.len()
        )));
    }
    let dir = sample_dir(root, &sample.token);
    std::fs::create_dir_all(&dir)?;
    for (cam, img) in sample.calibration.cameras.iter().zip(&sample.images) {
        save_image(&dir.join(camera_file(&cam.name)), img)?;
    }
    sample.radar.save(&dir.join(RADAR_FILE))?;
    sample.calibration.save(&dir.join(CALIB_FILE))?;
    let (x, y) = (sample.gt.x_cells, sample.gt.y_cells);
    save_mask(&dir.join(VEHICLE_FILE), x, y, &sample.gt.vehicle)?;
    for (class, mask) in MAP_CLASSES.iter().zip(&sample.gt.maps) {
        save_mask(&dir.join(map_file(class)), x, y, mask)?;
    }
    let valid = dir.join(VALID_FILE);
    if sample.gt.valid.iter().all(|&v| v) {
        if valid.exists() {
            std::fs::remove_file(&valid)?;
        }
    } else {
        save_mask(&valid, x, y, &sample.gt.valid)?;
    }
    let meta = SampleMeta {
        token: sample.token.clone(),
        condition: sample.condition,
        seed: sample.seed,
        sweep_count: sample.radar.sweep_count,
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(dir.join(META_FILE), text)?;
    Ok(dir)
}

pub fn load_meta(root: &Path, token: &str) -> Result<SampleMeta> {
    let path = sample_dir(root, token).join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| load_err(&path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| schema_err(&path, e))?;
    if meta.token != token {
        return Err(schema_err(&path, format!("token `{}` does not match directory `{token}`", meta.token)));
    }
    Ok(meta)
}

/// Loads one sample. Mask sizes are taken from the vehicle mask.
pub fn load_sample(root: &Path, token: &str) -> Result<Sample> {
    let dir = sample_dir(root, token);
    let meta = load_meta(root, token)?;

    let calib_path = dir.join(CALIB_FILE);
    let text = std::fs::read_to_string(&calib_path).map_err(|e| load_err(&calib_path, e))?;
    let calibration = CameraRig::from_json(&text).map_err(|e| schema_err(&calib_path, e))?;

    let radar_path = dir.join(RADAR_FILE);
    let radar = RadarPointCloud::read_csv(open(&radar_path)?, meta.sweep_count).map_err(|e| schema_err(&radar_path, e))?;

    let mut images = Vec::with_capacity(calibration.len());
    for cam in &calibration.cameras {
        let path = dir.join(camera_file(&cam.name));
        let img = load_image(&path)?;
        if (img.height, img.width) != (cam.height, cam.width) {
            return Err(schema_err(&path, format!("image is {}x{}, calibration says {}x{}", img.height, img.width, cam.height, cam.width)));
        }
        images.push(img);
    }

    let vehicle_path = dir.join(VEHICLE_FILE);
    let probe = read_png(&vehicle_path)?;
    let (x, y) = (probe.height, probe.width);
    let vehicle = load_mask(&vehicle_path, x, y)?;
    let maps = MAP_CLASSES
        .iter()
        .map(|c| load_mask(&dir.join(map_file(c)), x, y))
        .collect::<Result<Vec<_>>>()?;
    let valid_path = dir.join(VALID_FILE);
    let valid = if valid_path.exists() { load_mask(&valid_path, x, y)? } else { vec![true; x * y] };

    Ok(Sample {
        token: token.to_string(),
        seed: meta.seed,
        condition: meta.condition,
        images,
        radar,
        calibration,
        gt: BevGroundTruth {
            x_cells: x,
            y_cells: y,
            vehicle,
            maps,
            valid,
        },
    })
}

/// Sample tokens under `root`, sorted: every subdirectory holding a meta file.
pub fn list_tokens(root: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(root).map_err(|e| load_err(root, e))?;
    let mut tokens = Vec::new();
    for e in entries {
        let e = e?;
        if e.path().join(META_FILE).is_file() {
            if let Some(name) = e.file_name().to_str() {
                tokens.push(name.to_string());
            }
        }
    }
    tokens.sort();
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_odd_width() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mask: Vec<bool> = (0..7 * 13).map(|i| (i * 7919) % 5 < 2).collect();
        save_mask(&p, 7, 13, &mask).unwrap();
        assert_eq!(load_mask(&p, 7, 13).unwrap(), mask);
        assert!(load_mask(&p, 13, 7).is_err());
    }

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = RgbImage {
            height: 3,
            width: 5,
            data: (0..45).map(|i| (i * 37 % 256) as u8).collect(),
        };
        save_image(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
        assert!(matches!(load_mask(&p, 3, 5), Err(DataError::Schema { .. })));
    }
}
