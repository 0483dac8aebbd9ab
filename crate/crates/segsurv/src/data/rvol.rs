//! RVOL v1 volume file format.
//!
//! Layout: 8-byte magic `RVOL0001`, 4-byte little-endian unsigned header
//! length, UTF-8 JSON header
//! `{"shape":[H,W,D],"spacing":[sx,sy,sz],"modality":"CT|PET|MASK","dtype":"f32"}`,
//! then `H*W*D` little-endian 32-bit floats in C-order (depth fastest).
//! Round trips are bit-exact.

use super::volume::{Modality, Volume};
use crate::error::DataError;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RVOL0001";

#[derive(Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    spacing: [f64; 3],
    modality: Modality,
    dtype: String,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<(), DataError> {
    let header = Header {
        shape: v.shape,
        spacing: v.spacing,
        modality: v.modality,
        dtype: "f32".to_string(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + v.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for &x in &v.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    read_volume_bytes(&bytes)
}

pub fn read_volume_bytes(bytes: &[u8]) -> Result<Volume, DataError> {
    if bytes.len() < 12 {
        return Err(DataError::Truncated(format!(
            "{} bytes is too short for magic and header length",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(DataError::BadMagic {
            found: bytes[..8].to_vec(),
        });
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + header_len {
        return Err(DataError::Truncated(format!(
            "declared header length {header_len} exceeds file"
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| DataError::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(DataError::UnsupportedDtype {
            dtype: header.dtype,
        });
    }
    let expected = header.shape[0] * header.shape[1] * header.shape[2];
    let payload = &bytes[12 + header_len..];
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(DataError::PayloadShapeMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.shape, header.spacing, data, header.modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let data: Vec<f32> = (0..24).map(|i| (i as f32) * 0.37 - 2.0).collect();
        Volume::new([2, 3, 4], [1.0, 0.98, 3.27], data, Modality::Pet).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        let v = sample();
        write_volume(&v, &path).unwrap();
        let r = read_volume(&path).unwrap();
        assert_eq!(v.shape, r.shape);
        assert_eq!(v.spacing, r.spacing);
        assert_eq!(v.modality, r.modality);
        let a: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = r.data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn payload_shape_mismatch_is_detected() {
        // Header says 8x8x8 voxels but the payload carries 100 floats.
        let header =
            br#"{"shape":[8,8,8],"spacing":[1.0,1.0,1.0],"modality":"CT","dtype":"f32"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RVOL0001");
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        for _ in 0..100 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        assert!(matches!(
            read_volume_bytes(&bytes),
            Err(DataError::PayloadShapeMismatch {
                expected: 512,
                found: 100
            })
        ));
    }

    #[test]
    fn big_endian_dtype_is_unsupported() {
        let header =
            br#"{"shape":[1,1,1],"spacing":[1.0,1.0,1.0],"modality":"CT","dtype":"f32be"}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RVOL0001");
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(
            read_volume_bytes(&bytes),
            Err(DataError::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn bad_magic_and_malformed_header_are_distinct() {
        let bytes = b"NOTAVOL0aaaaaaaaaaaa".to_vec();
        assert!(matches!(
            read_volume_bytes(&bytes),
            Err(DataError::BadMagic { .. })
        ));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RVOL0001");
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(b"{oops");
        assert!(matches!(
            read_volume_bytes(&bytes),
            Err(DataError::MalformedHeader(_))
        ));
    }
}
