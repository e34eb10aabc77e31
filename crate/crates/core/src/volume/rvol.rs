//! "RVOL v1" container: a JSON header next to a raw little-endian payload.
//!
//! ```json
//! {"format":"RVOL","version":1,"extents":[W,H,L],"spacing":[sx,sy,sz],
//!  "dtype":"f32","byte-order":"little","data-file":"case_000.raw"}
//! ```
//!
//! Volumes use `dtype` `"f32"`, masks `"u8"`. The payload is x-fastest and
//! `data-file` is resolved relative to the header's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelMask, Volume};
use crate::error::{Error, Result};

pub const FORMAT: &str = "RVOL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvolHeader {
    pub format: String,
    pub version: u32,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(rename = "byte-order")]
    pub byte_order: String,
    #[serde(rename = "data-file")]
    pub data_file: String,
}

fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn write_pair(path: &Path, header: &RvolHeader, payload: &[u8]) -> Result<()> {
    let raw = payload_path(path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    let json = serde_json::to_vec_pretty(header)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn read_pair(path: &Path, dtype: &str) -> Result<(RvolHeader, Vec<u8>)> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: RvolHeader = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: bad RVOL header: {e}", path.display())))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Format(format!(
            "{}: expected {FORMAT} v{VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    if header.dtype != dtype {
        return Err(Error::Format(format!(
            "{}: expected dtype {dtype}, found {}",
            path.display(),
            header.dtype
        )));
    }
    if header.byte_order != "little" {
        return Err(Error::Format(format!(
            "{}: unsupported byte order {}",
            path.display(),
            header.byte_order
        )));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let raw = dir.join(&header.data_file);
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    Ok((header, payload))
}

fn header_for(path: &Path, extents: [usize; 3], spacing: [f64; 3], dtype: &str) -> RvolHeader {
    RvolHeader {
        format: FORMAT.into(),
        version: VERSION,
        extents,
        spacing,
        dtype: dtype.into(),
        byte_order: "little".into(),
        data_file: payload_path(path)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

/// Writes `path` (header) and a sibling `.raw` payload.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = header_for(path, v.extents(), v.spacing(), "f32");
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(path, &header, &payload)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (h, payload) = read_pair(path, "f32")?;
    let n: usize = h.extents.iter().product();
    if payload.len() != 4 * n {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(h.extents, h.spacing, data)
}

/// Masks carry unit spacing unless given; only extents are checked on load.
pub fn save_mask(m: &LabelMask, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = header_for(path, m.extents(), spacing, "u8");
    write_pair(path, &header, m.data())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (h, payload) = read_pair(path, "u8")?;
    let n: usize = h.extents.iter().product();
    if payload.len() != n {
        return Err(Error::Format(format!(
            "{}: payload has {} bytes, expected {n}",
            path.display(),
            payload.len()
        )));
    }
    LabelMask::new(h.extents, payload)
}
