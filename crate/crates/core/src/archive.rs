//! Single-file container for named arrays plus a JSON manifest.
//!
//! Layout: the 8-byte magic `ORCAARC1`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian payload of every entry in
//! header order. Writing the same content twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use orca_tape::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ORCAARC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: serde_json::Value,
    entries: Vec<EntryHeader>,
}

/// One stored array.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl Entry {
    pub fn u8(shape: &[usize], data: &[u8]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { dtype: DType::U8, shape: shape.to_vec(), bytes: data.to_vec() }
    }

    pub fn f32(shape: &[usize], data: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        Self { dtype: DType::F32, shape: shape.to_vec(), bytes }
    }

    pub fn f64(shape: &[usize], data: &[f64]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let bytes = data.iter().flat_map(|x| x.to_le_bytes()).collect();
        Self { dtype: DType::F64, shape: shape.to_vec(), bytes }
    }

    /// Stores a tensor at its native precision.
    pub fn tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        match S::DTYPE {
            "f32" => Self::f32(t.shape(), &t.data().iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>()),
            _ => Self::f64(t.shape(), &t.data().iter().map(|x| x.as_f64()).collect::<Vec<_>>()),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match self.dtype {
            DType::U8 => Ok(&self.bytes),
            other => Err(Error::Data(format!("expected u8 entry, found {other:?}"))),
        }
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        match self.dtype {
            DType::F32 => Ok(self.bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            other => Err(Error::Data(format!("expected f32 entry, found {other:?}"))),
        }
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match self.dtype {
            DType::F64 => Ok(self.bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F32 => Ok(self.to_f32()?.into_iter().map(f64::from).collect()),
            DType::U8 => Ok(self.bytes.iter().map(|&b| f64::from(b)).collect()),
        }
    }

    /// Reads the entry back as a tensor of any scalar type.
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let data: Vec<S> = match (self.dtype, S::DTYPE) {
            (DType::F32, "f32") => self.to_f32()?.into_iter().map(|x| S::c(f64::from(x))).collect(),
            _ => self.to_f64()?.into_iter().map(S::c).collect(),
        };
        Ok(Tensor::from_vec(&self.shape, data))
    }
}

/// In-memory archive: a manifest and an ordered set of named entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub manifest: serde_json::Value,
    entries: BTreeMap<String, Entry>,
    order: Vec<String>,
}

impl Archive {
    pub fn new(manifest: serde_json::Value) -> Self {
        Self { manifest, entries: BTreeMap::new(), order: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        if self.entries.insert(name.clone(), entry).is_none() {
            self.order.push(name);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| Error::Data(format!("archive has no entry `{name}`")))
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut headers = Vec::with_capacity(self.order.len());
        for name in &self.order {
            let e = &self.entries[name];
            headers.push(EntryHeader { name: name.clone(), dtype: e.dtype, shape: e.shape.clone(), offset });
            offset += e.bytes.len();
        }
        let header = serde_json::to_vec(&Header { manifest: self.manifest.clone(), entries: headers })
            .expect("archive header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for name in &self.order {
            out.extend_from_slice(&self.entries[name].bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Data("not an archive (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(Error::Data("truncated archive header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Data(format!("archive header: {e}")))?;
        let mut archive = Archive::new(header.manifest);
        for h in header.entries {
            let len = h.shape.iter().product::<usize>() * h.dtype.width();
            let start = body + h.offset;
            let slice = bytes
                .get(start..start + len)
                .ok_or_else(|| Error::Data(format!("entry `{}` exceeds archive", h.name)))?;
            archive.insert(h.name, Entry { dtype: h.dtype, shape: h.shape, bytes: slice.to_vec() });
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so readers never observe a partial file
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip_is_exact() {
        let mut a = Archive::new(serde_json::json!({"k": 1}));
        a.insert("img", Entry::u8(&[2, 2], &[0, 1, 254, 255]));
        a.insert("x", Entry::f32(&[3], &[1.5, -0.0, f32::MIN_POSITIVE]));
        a.insert("y", Entry::f64(&[1], &[std::f64::consts::PI]));
        let bytes = a.to_bytes();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes(), bytes);
        assert_eq!(b.get("x").unwrap().to_f32().unwrap()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"nope").is_err());
        assert!(Archive::from_bytes(b"ORCAARC1\xff\xff\xff\xff\xff\xff\xff\x7f").is_err());
    }
}
