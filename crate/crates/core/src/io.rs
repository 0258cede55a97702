//! Little-endian binary containers and JSON helpers.
//!
//! | magic   | payload                                             |
//! |---------|-----------------------------------------------------|
//! | `FSPC1` | u32 count, count × 3 f32                            |
//! | `FSDM1` | u32 width, u32 height, row-major f32 (≤ 0 invalid)  |
//! | `FSMK1` | u32 width, u32 height, row-major u8 in {0, 1}       |
//! | `FSTN1` | u32 rank, rank × u32 dims, row-major f32            |

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, InstanceMask, PointCloud};

const POINT_MAGIC: &[u8; 5] = b"FSPC1";
const DEPTH_MAGIC: &[u8; 5] = b"FSDM1";
const MASK_MAGIC: &[u8; 5] = b"FSMK1";
const TENSOR_MAGIC: &[u8; 5] = b"FSTN1";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 5], path: &'a Path) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..5] != magic {
            return Err(format_err(
                path,
                format!("missing {} header", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(Reader { bytes, at: 5, path })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.path, "truncated payload"));
        };
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.at),
            ));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_point_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 12 * cloud.len());
    out.extend_from_slice(POINT_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    put_f32s(&mut out, cloud.points().iter().flat_map(|p| p.iter().copied()));
    out
}

pub fn decode_point_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, POINT_MAGIC, path)?;
    let n = r.u32()? as usize;
    let flat = r.f32s(n * 3)?;
    r.finish()?;
    let points = flat
        .chunks_exact(3)
        .map(|c| [f64::from(c[0]), f64::from(c[1]), f64::from(c[2])])
        .collect();
    PointCloud::new(points).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_bytes(path, &encode_point_cloud(cloud))
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud> {
    decode_point_cloud(&read_bytes(path)?, path)
}

/// Whitespace-separated `x y z` per line; blank lines and `#` comments skipped.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(format_err(path, format!("line {}: expected 3 values", lineno + 1)));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f
                .parse()
                .map_err(|_| format_err(path, format!("line {}: bad number {f:?}", lineno + 1)))?;
        }
        points.push(p);
    }
    PointCloud::new(points).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz(&text, path)
}

/// Reads `.xyz` text or `FSPC1` binary depending on the extension.
pub fn read_cloud_any(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") | Some("txt") => read_xyz(path),
        _ => read_point_cloud(path),
    }
}

pub fn encode_depth_map(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * depth.values().len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&depth.width().to_le_bytes());
    out.extend_from_slice(&depth.height().to_le_bytes());
    put_f32s(&mut out, depth.values().iter().map(|&d| if d.is_finite() { d } else { 0.0 }));
    out
}

pub fn decode_depth_map(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let mut r = Reader::new(bytes, DEPTH_MAGIC, path)?;
    let (w, h) = (r.u32()?, r.u32()?);
    let values = r.f32s(w as usize * h as usize)?;
    r.finish()?;
    let values = values
        .into_iter()
        .map(|d| if d.is_finite() && d > 0.0 { f64::from(d) } else { 0.0 })
        .collect();
    DepthMap::new(w, h, values).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_depth_map(path: &Path, depth: &DepthMap) -> Result<()> {
    write_bytes(path, &encode_depth_map(depth))
}

pub fn read_depth_map(path: &Path) -> Result<DepthMap> {
    decode_depth_map(&read_bytes(path)?, path)
}

pub fn encode_mask(mask: &InstanceMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + mask.pixels().len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&mask.width().to_le_bytes());
    out.extend_from_slice(&mask.height().to_le_bytes());
    out.extend(mask.pixels().iter().map(|&p| u8::from(p)));
    out
}

/// The object id is not stored in the file and is supplied by the caller.
pub fn decode_mask(bytes: &[u8], object_id: u32, path: &Path) -> Result<InstanceMask> {
    let mut r = Reader::new(bytes, MASK_MAGIC, path)?;
    let (w, h) = (r.u32()?, r.u32()?);
    let raw = r.take(w as usize * h as usize)?;
    r.finish()?;
    let pixels = raw
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format_err(path, format!("mask value {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<bool>>>()?;
    InstanceMask::new(object_id, w, h, pixels).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &InstanceMask) -> Result<()> {
    write_bytes(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path, object_id: u32) -> Result<InstanceMask> {
    decode_mask(&read_bytes(path)?, object_id, path)
}

pub fn encode_tensor(tensor: &ArrayD<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(&mut out, tensor.iter().copied());
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<ArrayD<f64>> {
    let mut r = Reader::new(bytes, TENSOR_MAGIC, path)?;
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(format_err(path, format!("rank {rank} is unreasonably large")));
    }
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(path, "size overflow"))?;
    let values = r.f32s(count)?;
    r.finish()?;
    ArrayD::from_shape_vec(IxDyn(&dims), values.into_iter().map(f64::from).collect())
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_tensor(path: &Path, tensor: &ArrayD<f64>) -> Result<()> {
    write_bytes(path, &encode_tensor(tensor))
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    decode_tensor(&read_bytes(path)?, path)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}
