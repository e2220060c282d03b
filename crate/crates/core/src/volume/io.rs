//! JSON sidecar header + raw little-endian payload.
//!
//! `foo.json` holds `{"dims","spacing","dtype","order"}`; the payload lives
//! next to it in `foo.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AtlasLabelMap, Dims, Volume3D};
use crate::error::{Error, Result};

const F32LE: &str = "f32le";
const U16LE: &str = "u16le";
const ORDER: &str = "x-fastest";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: Dims,
    spacing: [f64; 3],
    dtype: String,
    order: String,
}

/// Payload file belonging to a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Byte offset of a 1-based (line, column) position in `text`.
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let mut offset = 0usize;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)) as u64;
        }
        offset += l.len();
    }
    offset as u64
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(path, byte_offset(&text, e.line(), e.column()), e.to_string())
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Reads exactly `count` little-endian f32 values.
pub(crate) fn read_f32_payload(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_len(path, bytes.len(), count * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_len(path: &Path, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        let what = if actual < expected { "truncated" } else { "oversized" };
        return Err(Error::format(
            path,
            actual.min(expected) as u64,
            format!("{what} payload: expected {expected} bytes, found {actual} bytes"),
        ));
    }
    Ok(())
}

fn read_header(path: &Path, dtype: &str) -> Result<(Header, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| {
        Error::format(path, byte_offset(&text, e.line(), e.column()), e.to_string())
    })?;
    let at = |key: &str| text.find(&format!("\"{key}\"")).unwrap_or(0) as u64;
    if header.dtype != dtype {
        return Err(Error::format(
            path,
            at("dtype"),
            format!("dtype mismatch: expected {dtype}, found {}", header.dtype),
        ));
    }
    if header.order != ORDER {
        return Err(Error::format(
            path,
            at("order"),
            format!("unsupported voxel order {}", header.order),
        ));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, at("dims"), "zero extent in dims"));
    }
    let n = header.dims.iter().product();
    Ok((header, n))
}

pub fn save_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    let payload = payload_path(path);
    if payload == path {
        return Err(Error::Input(format!(
            "header path {} collides with its payload",
            path.display()
        )));
    }
    write_json(
        path,
        &Header {
            dims: vol.dims(),
            spacing: vol.spacing(),
            dtype: F32LE.into(),
            order: ORDER.into(),
        },
    )?;
    write_bytes(&payload, &f32_to_bytes(vol.data()))
}

pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let (h, n) = read_header(path, F32LE)?;
    let data = read_f32_payload(&payload_path(path), n)?;
    Volume3D::new(h.dims, h.spacing, data).map_err(|e| Error::format(path, 0, e.to_string()))
}

pub fn save_atlas(atlas: &AtlasLabelMap, path: &Path) -> Result<()> {
    let payload = payload_path(path);
    if payload == path {
        return Err(Error::Input(format!(
            "header path {} collides with its payload",
            path.display()
        )));
    }
    write_json(
        path,
        &Header {
            dims: atlas.dims(),
            spacing: atlas.spacing(),
            dtype: U16LE.into(),
            order: ORDER.into(),
        },
    )?;
    let bytes: Vec<u8> = atlas.labels().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(&payload, &bytes)
}

pub fn load_atlas(path: &Path) -> Result<AtlasLabelMap> {
    let (h, n) = read_header(path, U16LE)?;
    let payload = payload_path(path);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    check_len(&payload, bytes.len(), n * 2)?;
    let labels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    AtlasLabelMap::new(h.dims, h.spacing, labels).map_err(|e| Error::format(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let vol = Volume3D::new(
            [3, 4, 2],
            [1.0, 1.5, 2.0],
            (0..24).map(|i| (i as f32).sin() * 1e3).collect(),
        )
        .unwrap();
        save_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.dims(), vol.dims());
        assert_eq!(back.spacing(), vol.spacing());
        let a: Vec<u32> = vol.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn header_format_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        save_volume(&Volume3D::filled([2, 2, 2], 1.0).unwrap(), &path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"dims":[2,2,2],"spacing":[1.0,1.0,1.0],"dtype":"f32le","order":"x-fastest"})
        );
    }

    #[test]
    fn atlas_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("atlas.json");
        let atlas = AtlasLabelMap::new([2, 2, 1], [2.0; 3], vec![0, 1, 2, 2]).unwrap();
        save_atlas(&atlas, &path).unwrap();
        assert_eq!(load_atlas(&path).unwrap(), atlas);
        // An atlas header is not a volume.
        let err = load_volume(&path).unwrap_err();
        assert!(err.to_string().contains("dtype mismatch"), "{err}");
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        save_volume(&Volume3D::filled([4, 4, 4], 2.0).unwrap(), &path).unwrap();
        let bin = payload_path(&path);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..100]).unwrap();
        let err = load_volume(&path).unwrap_err().to_string();
        assert!(err.contains("expected 256 bytes"), "{err}");
        assert!(err.contains("found 100 bytes"), "{err}");
    }

    #[test]
    fn paper_geometry_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        fs::write(
            &path,
            r#"{"dims":[121,145,121],"spacing":[1.5,1.5,1.5],"dtype":"f32le","order":"x-fastest"}"#,
        )
        .unwrap();
        fs::write(payload_path(&path), [0u8; 8]).unwrap();
        let err = load_volume(&path).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {} bytes", 121 * 145 * 121 * 4)), "{err}");
    }

    #[test]
    fn malformed_header_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        fs::write(&path, "{\"dims\":[2,2,2],\n \"spacing\": oops}").unwrap();
        match load_volume(&path).unwrap_err() {
            Error::Format { offset, .. } => assert!(offset >= 17, "offset {offset}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_header_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume(&dir.path().join("nope.json")),
            Err(Error::MissingArtifact(_))
        ));
    }
}
