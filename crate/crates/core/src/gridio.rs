//! The gridded container format: one raw little-endian f32 file per variable
//! (row-major, dims time/y/x) plus a `meta.json` sidecar. Round-trips are
//! bit-exact.

use crate::data::{DatasetConfig, Tile};
use crate::error::CoreError;
use crate::field::Field;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ContainerMeta {
    pub dims: Vec<String>,
    pub shape: Vec<usize>,
    pub variables: Vec<String>,
    pub units: BTreeMap<String, String>,
    pub missing_value: Option<f64>,
}

impl ContainerMeta {
    pub fn n_values(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != ["time", "y", "x"] {
            return Err(CoreError::Config(format!(
                "container dims must be [time, y, x], got {:?}",
                self.dims
            )));
        }
        if self.shape.len() != 3 {
            return Err(CoreError::Config("container shape must have 3 entries".into()));
        }
        Ok(())
    }
}

fn var_file(dir: &Path, var: &str) -> std::path::PathBuf {
    dir.join(format!("{var}.f32"))
}

/// Write variables as raw little-endian f32 plus the JSON sidecar.
pub fn write_container(
    dir: &Path,
    meta: &ContainerMeta,
    data: &BTreeMap<String, Vec<f32>>,
) -> Result<()> {
    meta.validate()?;
    std::fs::create_dir_all(dir)?;
    for var in &meta.variables {
        let values = data.get(var).ok_or_else(|| {
            CoreError::Config(format!("variable {var} listed in meta but not provided"))
        })?;
        if values.len() != meta.n_values() {
            return Err(CoreError::Dimension(format!(
                "variable {var}: expected {} values, got {}",
                meta.n_values(),
                values.len()
            )));
        }
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(var_file(dir, var))?;
        f.write_all(&bytes)?;
    }
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(dir.join(META_FILE), json)?;
    Ok(())
}

/// Read a container back; values keep their exact f32 bits.
pub fn read_container(dir: &Path) -> Result<(ContainerMeta, BTreeMap<String, Vec<f32>>)> {
    let meta: ContainerMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
    meta.validate()?;
    let mut data = BTreeMap::new();
    for var in &meta.variables {
        let mut bytes = Vec::new();
        std::fs::File::open(var_file(dir, var))?.read_to_end(&mut bytes)?;
        if bytes.len() != meta.n_values() * 4 {
            return Err(CoreError::Dimension(format!(
                "variable {var}: file holds {} bytes, expected {}",
                bytes.len(),
                meta.n_values() * 4
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        data.insert(var.clone(), values);
    }
    Ok((meta, data))
}

/// Slice a container into raw tiles. Expects a precipitation variable shaped
/// `[time, grid_rows*H, grid_cols*W]` and an optional static `topography`
/// variable (first time slice used).
pub fn tiles_from_container(
    dir: &Path,
    config: &DatasetConfig,
    precip_var: &str,
) -> Result<Vec<Tile>> {
    let (meta, data) = read_container(dir)?;
    let (nt, ny, nx) = (meta.shape[0], meta.shape[1], meta.shape[2]);
    if ny != config.grid_rows * config.h || nx != config.grid_cols * config.w {
        return Err(CoreError::Dimension(format!(
            "container grid {ny}x{nx} does not match {} tiles of {}x{}",
            config.grid_rows * config.grid_cols,
            config.h,
            config.w
        )));
    }
    let precip = data
        .get(precip_var)
        .ok_or_else(|| CoreError::Config(format!("no variable {precip_var} in container")))?;
    let topo = data.get("topography");
    let mut tiles = Vec::new();
    for r in 0..config.grid_rows {
        for c in 0..config.grid_cols {
            let id = r * config.grid_cols + c;
            let mut frames = Vec::with_capacity(nt);
            for t in 0..nt {
                let mut vals = Vec::with_capacity(config.h * config.w);
                for y in 0..config.h {
                    let row0 = (t * ny + r * config.h + y) * nx + c * config.w;
                    vals.extend(precip[row0..row0 + config.w].iter().map(|&v| v as f64));
                }
                frames.push(Field::new(vals, config.h, config.w)?);
            }
            let topography = match topo {
                Some(tv) => {
                    let mut vals = Vec::with_capacity(config.h * config.w);
                    for y in 0..config.h {
                        let row0 = (r * config.h + y) * nx + c * config.w;
                        vals.extend(tv[row0..row0 + config.w].iter().map(|&v| v as f64));
                    }
                    Field::new(vals, config.h, config.w)?
                }
                None => Field::zeros(config.h, config.w),
            };
            tiles.push(Tile {
                tile_id: id,
                row: r,
                col: c,
                topography,
                hr_frames: frames,
            });
        }
    }
    Ok(tiles)
}
