//! Binary parameter checkpoints.
//!
//! Layout (documented contract, also described in the README):
//!
//! ```text
//! [ u32 little-endian: header length H ]
//! [ H bytes: UTF-8 JSON header       ]
//! [ payload: all tensor values as little-endian f64, concatenated  ]
//! ```
//!
//! The header is `{"format":"actiongrad-tensors","version":1,"tensors":[
//! {"name":...,"shape":[...],"offset":N,"len":M}, ...]}` where `offset` and
//! `len` count f64 elements into the payload. Values round-trip exactly:
//! loading a checkpoint reproduces bit-identical tensors.

use super::tensor::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    tensors: Vec<HeaderEntry>,
}

const FORMAT: &str = "actiongrad-tensors";

pub fn save_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for nt in tensors {
        entries.push(HeaderEntry {
            name: nt.name.clone(),
            shape: nt.tensor.shape.clone(),
            offset,
            len: nt.tensor.len(),
        });
        offset += nt.tensor.len();
    }
    let header = Header { format: FORMAT.to_string(), version: 1, tensors: entries };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut f = std::fs::File::create(path)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    let mut payload = Vec::with_capacity(offset * 8);
    for nt in tensors {
        for v in &nt.tensor.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&payload)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut f = std::fs::File::open(path)?;
    let mut len_buf = [0u8; 4];
    f.read_exact(&mut len_buf)
        .map_err(|_| Error::Parse { line: 0, msg: "checkpoint too short for header length".into() })?;
    let hlen = u32::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; hlen];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Parse { line: 0, msg: "checkpoint truncated in header".into() })?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format != FORMAT {
        return Err(Error::Parse {
            line: 0,
            msg: format!("unknown checkpoint format {:?}", header.format),
        });
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let want: usize = e.shape.iter().product();
        if want != e.len {
            return Err(Error::Parse {
                line: 0,
                msg: format!("tensor {} shape {:?} disagrees with len {}", e.name, e.shape, e.len),
            });
        }
        let start = e.offset * 8;
        let end = start + e.len * 8;
        if end > payload.len() {
            return Err(Error::Parse {
                line: 0,
                msg: format!("tensor {} extends past payload", e.name),
            });
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(NamedTensor { name: e.name, tensor: Tensor::new(e.shape, values)? });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut rng = RngStream::new(4);
        let tensors: Vec<NamedTensor> = (0..5)
            .map(|i| NamedTensor {
                name: format!("layer{i}"),
                tensor: Tensor::uniform_init(vec![3, 4], 3, &mut rng),
            })
            .collect();
        save_tensors(&path, &tensors).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), tensors.len());
        for (a, b) in tensors.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            // bit-exact, not approximately equal
            for (x, y) in a.tensor.values.iter().zip(&b.tensor.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let mut rng = RngStream::new(8);
        let tensors = vec![NamedTensor {
            name: "w".into(),
            tensor: Tensor::uniform_init(vec![7], 7, &mut rng),
        }];
        save_tensors(&p1, &tensors).unwrap();
        save_tensors(&p2, &tensors).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn garbage_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"xx").unwrap();
        assert!(matches!(load_tensors(&path), Err(crate::Error::Parse { .. })));
    }
}
