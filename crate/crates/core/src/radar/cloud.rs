use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Number of attributes per radar point: x, y, z, vx, vy, rcs.
pub const RADAR_ATTRIBUTES: usize = 6;

pub const RADAR_CSV_HEADER: [&str; RADAR_ATTRIBUTES] = ["x", "y", "z", "vx", "vy", "rcs"];

/// Aggregated radar returns in the reference frame. Velocities are the raw,
/// ego-motion-uncompensated components; rcs is in dBsm.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarPointCloud {
    pub points: Vec<[f64; RADAR_ATTRIBUTES]>,
    pub sweep_count: usize,
}

impl Default for RadarPointCloud {
    fn default() -> Self {
        Self {
            points: Vec::new(),
            sweep_count: 5,
        }
    }
}

impl RadarPointCloud {
    pub fn new(points: Vec<[f64; RADAR_ATTRIBUTES]>, sweep_count: usize) -> Result<Self> {
        let cloud = Self { points, sweep_count };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Radar(format!("point {i} has a non-finite attribute")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Writes `x,y,z,vx,vy,rcs` CSV with 17 significant digits per value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(RADAR_CSV_HEADER).map_err(csv_err)?;
        for p in &self.points {
            w.write_record(p.iter().map(|v| format!("{v:.16e}"))).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, sweep_count: usize) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() != RADAR_ATTRIBUTES || header.iter().zip(RADAR_CSV_HEADER).any(|(a, b)| a != b) {
            return Err(Error::Radar(format!(
                "radar header must be `{}`, found `{}`",
                RADAR_CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            if rec.len() != RADAR_ATTRIBUTES {
                return Err(Error::Radar(format!("row {} has {} fields", row + 1, rec.len())));
            }
            let mut p = [0.0; RADAR_ATTRIBUTES];
            for (slot, field) in p.iter_mut().zip(rec.iter()) {
                *slot = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Radar(format!("row {}: cannot parse `{field}`", row + 1)))?;
            }
            points.push(p);
        }
        Self::new(points, sweep_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path, sweep_count: usize) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, sweep_count)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Radar(e.to_string())
}
