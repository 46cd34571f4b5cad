//! Prediction output and BEV rendering.
//!
//! Rendered rasters have one pixel per cell, `X` rows by `Y` columns. Row 0
//! is the far end of +x (forward) and column 0 the far end of +y (left), so
//! the image reads as a top-down view with the ego vehicle facing up.
//!
//! Palette, painted in this order so later entries cover earlier ones:
//!
//! | layer          | RGB             |
//! |----------------|-----------------|
//! | background     | (255, 255, 255) |
//! | carpark_area   | (255, 200, 120) |
//! | walkway        | (200, 130, 230) |
//! | drivable_area  | (170, 170, 170) |
//! | ped_crossing   | (255, 110, 110) |
//! | stop_line      | (130, 40, 40)   |
//! | lane_divider   | (80, 110, 230)  |
//! | road_divider   | (240, 210, 60)  |
//! | vehicle        | (20, 150, 60)   |
//!
//! Error maps use (128, 128, 128) where prediction and ground truth agree
//! on every channel, red (220, 40, 40) for cells with only false
//! positives, blue (40, 80, 220) for only false negatives and magenta
//! (200, 40, 200) for both.

use std::path::Path;

use bevcar_core::head::{output_classes, VEHICLE_CLASS};
use bevcar_core::loss::BevGroundTruth;

use crate::error::Result;

pub const BACKGROUND: [u8; 3] = [255, 255, 255];
pub const NEUTRAL: [u8; 3] = [128, 128, 128];
pub const FALSE_POSITIVE: [u8; 3] = [220, 40, 40];
pub const FALSE_NEGATIVE: [u8; 3] = [40, 80, 220];
pub const BOTH_ERRORS: [u8; 3] = [200, 40, 200];

pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("carpark_area", [255, 200, 120]),
    ("walkway", [200, 130, 230]),
    ("drivable_area", [170, 170, 170]),
    ("ped_crossing", [255, 110, 110]),
    ("stop_line", [130, 40, 40]),
    ("lane_divider", [80, 110, 230]),
    ("road_divider", [240, 210, 60]),
    (VEHICLE_CLASS, [20, 150, 60]),
];

/// RGB raster, `x` rows by `y` columns, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl Raster {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols * 3],
        }
    }

    fn put(&mut self, i: usize, j: usize, rgb: [u8; 3]) {
        let (r, c) = (self.rows - 1 - i, self.cols - 1 - j);
        let k = (r * self.cols + c) * 3;
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let k = (row * self.cols + col) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut enc = png::Encoder::new(w, self.cols as u32, self.rows as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(std::io::Error::other)?;
        writer.write_image_data(&self.data).map_err(std::io::Error::other)?;
        writer.finish().map_err(std::io::Error::other)?;
        Ok(())
    }
}

fn channel_index(name: &str) -> usize {
    output_classes().iter().position(|c| *c == name).expect("palette names are output classes")
}

/// Color composite of per-channel masks (vehicle first, then map classes).
pub fn render_masks(masks: &[Vec<bool>], x: usize, y: usize) -> Raster {
    let mut r = Raster::new(x, y);
    for i in 0..x {
        for j in 0..y {
            let cell = i * y + j;
            let mut color = BACKGROUND;
            for (name, rgb) in PALETTE {
                if masks[channel_index(name)][cell] {
                    color = rgb;
                }
            }
            r.put(i, j, color);
        }
    }
    r
}

pub fn render_error_map(pred: &[Vec<bool>], gt: &BevGroundTruth) -> Raster {
    let (x, y) = (gt.x_cells, gt.y_cells);
    let mut r = Raster::new(x, y);
    for i in 0..x {
        for j in 0..y {
            let cell = i * y + j;
            let (mut fp, mut fn_) = (false, false);
            for (c, p) in pred.iter().enumerate() {
                let g = gt.channel(c)[cell];
                fp |= p[cell] && !g;
                fn_ |= !p[cell] && g;
            }
            r.put(
                i,
                j,
                match (fp, fn_) {
                    (false, false) => NEUTRAL,
                    (true, false) => FALSE_POSITIVE,
                    (false, true) => FALSE_NEGATIVE,
                    (true, true) => BOTH_ERRORS,
                },
            );
        }
    }
    r
}

pub fn gt_masks(gt: &BevGroundTruth) -> Vec<Vec<bool>> {
    (0..output_classes().len()).map(|c| gt.channel(c).to_vec()).collect()
}
