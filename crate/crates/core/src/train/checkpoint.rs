//! Binary checkpoint container.
//!
//! Layout: magic `RGAN`, `u32` LE format version, `u64` LE header length,
//! a JSON header, then raw little-endian `f32` payloads. The header lists
//! every tensor's name, shape, dtype and byte offset into the payload, plus
//! free-form metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: [u8; 4] = *b"RGAN";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    offset: u64,
    bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus metadata, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::ShapeTable(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries: Vec<Entry> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let bytes = 4 * t.numel() as u64;
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: DType::F32,
                    offset,
                    bytes,
                };
                offset += bytes;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::ShapeTable(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let need = |needed: usize| {
            if buf.len() < needed {
                Err(Error::Truncated {
                    needed: needed as u64,
                    available: buf.len() as u64,
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = buf[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        need(PREAMBLE)?;
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
        let header_end = (PREAMBLE as u64).checked_add(header_len).ok_or_else(|| {
            Error::ShapeTable(format!("header length {header_len} overflows"))
        })?;
        if (buf.len() as u64) < header_end {
            return Err(Error::Truncated {
                needed: header_end,
                available: buf.len() as u64,
            });
        }
        let header_end = header_end as usize;
        let header: Header = serde_json::from_slice(&buf[PREAMBLE..header_end])
            .map_err(|e| Error::ShapeTable(format!("unreadable header: {e}")))?;
        let payload = &buf[header_end..];

        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != DType::F32 {
                return Err(Error::ShapeTable(format!("`{}` has unsupported dtype {:?}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.bytes != 4 * numel as u64 {
                return Err(Error::ShapeTable(format!(
                    "`{}` declares {} bytes for shape {:?}",
                    e.name, e.bytes, e.shape
                )));
            }
            if e.offset != expected_offset {
                return Err(Error::ShapeTable(format!(
                    "`{}` starts at {} but the previous tensor ends at {}",
                    e.name, e.offset, expected_offset
                )));
            }
            expected_offset += e.bytes;
            let end = e.offset + e.bytes;
            if (payload.len() as u64) < end {
                return Err(Error::Truncated {
                    needed: header_end as u64 + end,
                    available: buf.len() as u64,
                });
            }
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        if payload.len() as u64 != expected_offset {
            return Err(Error::ShapeTable(format!(
                "payload has {} bytes but the table covers {}",
                payload.len(),
                expected_offset
            )));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    /// Write to a sibling temp file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({"kind": "test", "step": 3}),
            tensors: vec![
                ("a".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2)),
                ("b".into(), Tensor::scalar(f32::MIN_POSITIVE)),
            ],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
        let mut long = bytes;
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::ShapeTable(_))));
    }
}
