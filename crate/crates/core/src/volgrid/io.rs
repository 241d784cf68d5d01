//! MGRID v1 container: one UTF-8 JSON header line terminated by `\n`, then the
//! raw little-endian payload in x-fastest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Geometry, LabelGrid, Volume};
use crate::error::{Error, Result};

pub const MAGIC: &str = "MGRID";
pub const VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub magic: String,
    pub version: u64,
    pub kind: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_count: Option<u8>,
}

impl GridHeader {
    pub fn for_geometry(kind: &str, geom: &Geometry, class_count: Option<u8>) -> Self {
        GridHeader {
            magic: MAGIC.into(),
            version: VERSION,
            kind: kind.into(),
            dims: geom.dims,
            spacing: geom.spacing,
            origin: geom.origin,
            class_count,
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
        }
    }
}

/// A grid read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Volume(Volume<f32>),
    Labels(LabelGrid),
}

/// Splits a container into its header line and payload.
pub(crate) fn split_header(bytes: &[u8]) -> Result<(Value, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("header", "no newline-terminated header line"))?;
    let text = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::format("header", e.to_string()))?;
    let value: Value = serde_json::from_str(text).map_err(|e| Error::format("header", e.to_string()))?;
    if !value.is_object() {
        return Err(Error::format("header", "header is not a JSON object"));
    }
    Ok((value, &bytes[nl + 1..]))
}

fn triple<T>(header: &Value, field: &str, conv: impl Fn(&Value) -> Option<T>) -> Result<[T; 3]>
where
    T: Copy + Default,
{
    let arr = header
        .get(field)
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(field, "missing or not an array"))?;
    if arr.len() != 3 {
        return Err(Error::format(field, format!("expected 3 entries, found {}", arr.len())));
    }
    let mut out = [T::default(); 3];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = conv(v).ok_or_else(|| Error::format(field, format!("invalid entry {v}")))?;
    }
    Ok(out)
}

/// Validates the common header fields and returns the parsed header.
pub(crate) fn parse_header(header: &Value) -> Result<GridHeader> {
    match header.get("magic").and_then(Value::as_str) {
        Some(MAGIC) => {}
        other => return Err(Error::format("magic", format!("expected \"{MAGIC}\", found {other:?}"))),
    }
    match header.get("version").and_then(Value::as_u64) {
        Some(VERSION) => {}
        other => return Err(Error::format("version", format!("expected {VERSION}, found {other:?}"))),
    }
    let kind = header
        .get("kind")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format("kind", "missing"))?
        .to_string();
    let dims = triple(header, "dims", |v| v.as_u64().map(|x| x as usize))?;
    let spacing = triple(header, "spacing", Value::as_f64)?;
    let origin = triple(header, "origin", Value::as_f64)?;
    let class_count = match header.get("class_count") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|&c| (1..=255).contains(&c))
                .ok_or_else(|| Error::format("class_count", format!("invalid value {v}")))? as u8,
        ),
    };
    let h = GridHeader {
        magic: MAGIC.into(),
        version: VERSION,
        kind,
        dims,
        spacing,
        origin,
        class_count,
    };
    h.geometry().validate()?;
    Ok(h)
}

pub(crate) fn header_line(h: &GridHeader) -> Result<Vec<u8>> {
    let mut line = serde_json::to_vec(h)?;
    line.push(b'\n');
    Ok(line)
}

pub(crate) fn f32_payload(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn f32_from_payload(payload: &[u8], count: usize) -> Result<Vec<f32>> {
    let expected = count * 4;
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn encode_volume(v: &Volume<f32>) -> Result<Vec<u8>> {
    let mut out = header_line(&GridHeader::for_geometry("f32", v.geometry(), None))?;
    out.extend(f32_payload(v.data()));
    Ok(out)
}

pub fn encode_labels(l: &LabelGrid) -> Result<Vec<u8>> {
    let mut out = header_line(&GridHeader::for_geometry("u8", l.geometry(), Some(l.class_count())))?;
    out.extend_from_slice(l.labels());
    Ok(out)
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    let (value, payload) = split_header(bytes)?;
    let h = parse_header(&value)?;
    let geom = h.geometry();
    match h.kind.as_str() {
        "f32" => {
            let data = f32_from_payload(payload, geom.len())?;
            Ok(Grid::Volume(Volume::new(geom, data)?))
        }
        "u8" => {
            let cc = h
                .class_count
                .ok_or_else(|| Error::format("class_count", "required for kind u8"))?;
            if payload.len() != geom.len() {
                return Err(Error::SizeMismatch {
                    expected: geom.len(),
                    found: payload.len(),
                });
            }
            Ok(Grid::Labels(LabelGrid::new(geom, payload.to_vec(), cc)?))
        }
        other => Err(Error::format("kind", format!("expected \"f32\" or \"u8\", found \"{other}\""))),
    }
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    decode_grid(&fs::read(path)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume<f32>> {
    match read_grid(path)? {
        Grid::Volume(v) => Ok(v),
        Grid::Labels(_) => Err(Error::format("kind", "expected an f32 volume, found u8 labels")),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelGrid> {
    match read_grid(path)? {
        Grid::Labels(l) => Ok(l),
        Grid::Volume(_) => Err(Error::format("kind", "expected u8 labels, found an f32 volume")),
    }
}

pub(crate) fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume<f32>) -> Result<()> {
    write_bytes(path, &encode_volume(v)?)
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelGrid) -> Result<()> {
    write_bytes(path, &encode_labels(l)?)
}

pub fn write_grid(path: impl AsRef<Path>, g: &Grid) -> Result<()> {
    match g {
        Grid::Volume(v) => write_volume(path, v),
        Grid::Labels(l) => write_labels(path, l),
    }
}
