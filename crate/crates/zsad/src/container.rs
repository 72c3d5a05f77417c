//! Binary tensor container: 4-byte magic, little-endian u64 header length, a
//! JSON header describing named tensors, then a flat little-endian `f64`
//! payload. Used for backbone weights, prompt checkpoints, and exported float
//! maps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ZTC1";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
}

/// An in-memory set of named tensors plus JSON metadata.
#[derive(Default)]
#[derive(Debug)]
pub struct TensorContainer {
    pub meta: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.meta.insert(key.to_string(), value.into());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Load(format!("missing metadata field '{key}'")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Load(format!("missing metadata field '{key}'")))
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.to_string(), (shape, data));
    }

    pub fn remove(&mut self, name: &str) {
        self.tensors.remove(name);
    }

    pub fn insert_a2(&mut self, name: &str, a: &Array2<f64>) {
        self.insert(
            name,
            vec![a.nrows(), a.ncols()],
            a.iter().cloned().collect(),
        );
    }

    pub fn insert_a1(&mut self, name: &str, a: &Array1<f64>) {
        self.insert(name, vec![a.len()], a.to_vec());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn raw(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Load(format!("missing tensor '{name}'")))
    }

    pub fn a2(&self, name: &str, expect: (usize, usize)) -> Result<Array2<f64>> {
        let (shape, data) = self.raw(name)?;
        if shape.len() != 2 || (shape[0], shape[1]) != expect {
            return Err(Error::Config(format!(
                "tensor '{name}' has shape {shape:?}, expected [{}, {}]",
                expect.0, expect.1
            )));
        }
        Ok(Array2::from_shape_vec(expect, data.clone()).expect("shape checked"))
    }

    /// Read a rank-2 tensor using its stored shape.
    pub fn a2_any(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, data) = self.raw(name)?;
        if shape.len() != 2 {
            return Err(Error::Config(format!(
                "tensor '{name}' has rank {}, expected 2",
                shape.len()
            )));
        }
        Ok(Array2::from_shape_vec((shape[0], shape[1]), data.clone()).expect("shape stored"))
    }

    pub fn a1(&self, name: &str, expect: usize) -> Result<Array1<f64>> {
        let (shape, data) = self.raw(name)?;
        if shape.iter().product::<usize>() != expect {
            return Err(Error::Config(format!(
                "tensor '{name}' has shape {shape:?}, expected [{expect}]"
            )));
        }
        Ok(Array1::from_vec(data.clone()))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let (_, data) = self.raw(name)?;
        if data.len() != 1 {
            return Err(Error::Config(format!(
                "tensor '{name}' is not a scalar ({} elements)",
                data.len()
            )));
        }
        Ok(data[0])
    }

    /// Serialize to the container wire format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (name, (shape, data)) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += data.len();
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header is plain JSON");

        let mut out = Vec::with_capacity(16 + header_bytes.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.write_u64::<LittleEndian>(header_bytes.len() as u64)
            .expect("vec write");
        out.extend_from_slice(&header_bytes);
        for (_, (_, data)) in &self.tensors {
            for v in data {
                out.write_f64::<LittleEndian>(*v).expect("vec write");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Load(format!("{}: truncated file (no magic)", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::Load(format!(
                "{}: not a tensor container (bad magic)",
                path.display()
            )));
        }
        let header_len = r
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::Load(format!("{}: truncated header length", path.display())))?;
        let mut header_bytes = vec![0u8; header_len as usize];
        r.read_exact(&mut header_bytes)
            .map_err(|_| Error::Load(format!("{}: truncated header", path.display())))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Load(format!("{}: corrupt header: {e}", path.display())))?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)
            .map_err(|e| Error::io(path, e))?;
        let n_values = payload.len() / 8;

        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            if entry.offset + len > n_values {
                return Err(Error::Load(format!(
                    "{}: truncated payload for tensor '{}'",
                    path.display(),
                    entry.name
                )));
            }
            let start = entry.offset * 8;
            let data: Vec<f64> = payload[start..start + len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Load(format!(
                    "{}: non-finite values in tensor '{}'",
                    path.display(),
                    entry.name
                )));
            }
            tensors.insert(entry.name, (entry.shape, data));
        }
        Ok(TensorContainer {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ztc");
        let mut c = TensorContainer::new();
        c.set_meta("kind", "test");
        c.insert_a2("a", &array![[1.0, 2.0], [3.0, -4.5]]);
        c.insert_a1("b", &array![0.25, -0.75, 9.0]);
        c.save(&path).unwrap();

        let loaded = TensorContainer::load(&path).unwrap();
        assert_eq!(loaded.meta_str("kind").unwrap(), "test");
        assert_eq!(loaded.a2("a", (2, 2)).unwrap(), array![[1.0, 2.0], [3.0, -4.5]]);
        assert_eq!(loaded.a1("b", 3).unwrap(), array![0.25, -0.75, 9.0]);
        assert!(matches!(loaded.a2("missing", (1, 1)), Err(Error::Load(_))));
    }

    #[test]
    fn truncated_file_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ztc");
        let mut c = TensorContainer::new();
        c.insert_a1("w", &Array1::linspace(0.0, 1.0, 64));
        c.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = TensorContainer::load(&path).unwrap_err();
        assert!(matches!(err, Error::Load(msg) if msg.contains("'w'")));
    }
}
