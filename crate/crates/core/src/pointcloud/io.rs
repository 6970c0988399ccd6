//! Binary point-cloud files: headerless little-endian `f32` records of
//! `(x, y, z, r, t)`, plus an optional `<file>.toml` metadata companion.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Box3D, Point, PointCloud, Range3D};
use crate::error::{Error, Result};

pub const FIELDS_PER_RECORD: usize = 5;
pub const RECORD_BYTES: usize = FIELDS_PER_RECORD * 4;

/// Companion metadata written next to every cloud file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudMeta {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_range: Option<Range3D>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".toml");
    PathBuf::from(os)
}

/// Reads a cloud. The metadata file is optional; when present its record
/// count and declared range are checked against the payload.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of {RECORD_BYTES}", bytes.len()),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (index, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let mut f = [0f32; FIELDS_PER_RECORD];
        for (k, v) in f.iter_mut().enumerate() {
            let b = &rec[4 * k..4 * k + 4];
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        points.push(Point {
            x: f[0] as f64,
            y: f[1] as f64,
            z: f[2] as f64,
            r: f[3] as f64,
            t: f[4] as f64,
        });
    }
    let mut cloud = PointCloud::new(points)?;

    let meta_file = meta_path(path);
    if meta_file.exists() {
        let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        let meta: CloudMeta =
            toml::from_str(&text).map_err(|e| Error::format(&meta_file, e.to_string()))?;
        if meta.count != cloud.len() {
            return Err(Error::format(
                &meta_file,
                format!("declares {} records, payload has {}", meta.count, cloud.len()),
            ));
        }
        if let Some(range) = meta.declared_range {
            cloud = cloud.with_declared_range(range)?;
        }
    }
    Ok(cloud)
}

/// Writes a cloud and its metadata. Values are narrowed to `f32`.
pub fn save_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in cloud.points() {
        for v in p.to_array() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let meta = CloudMeta { count: cloud.len(), declared_range: cloud.declared_range().copied() };
    let text = toml::to_string(&meta).map_err(|e| Error::format(path, e.to_string()))?;
    let meta_file = meta_path(path);
    fs::write(&meta_file, text).map_err(|e| Error::io(&meta_file, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxFile {
    #[serde(default)]
    boxes: Vec<Box3D>,
}

/// Writes boxes as a TOML array of tables.
pub fn save_boxes(path: impl AsRef<Path>, boxes: &[Box3D]) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(&BoxFile { boxes: boxes.to_vec() }).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_boxes(path: impl AsRef<Path>) -> Result<Vec<Box3D>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: BoxFile = toml::from_str(&text).map_err(|e| Error::format(path, e.message().to_string()))?;
    for b in &file.boxes {
        b.validate()?;
    }
    Ok(file.boxes)
}
