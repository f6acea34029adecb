//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     "LSW1"
//! version   u32 (1)
//! digest    32 bytes, SHA-256 of the model spec's canonical text
//! count     u32
//! count × { name_len u16, name, kind u8, dtype u8, shape 4 × u32, offset u64, length u64 }
//! blobs     raw little-endian elements at the recorded absolute offsets
//! ```

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::ModelSpec;
use crate::error::{Error, Result};
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"LSW1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WeightEntry {
    pub name: String,
    pub kind: u8,
    pub dtype: String,
    pub shape: [usize; 4],
    pub offset: u64,
    pub length: u64,
}

/// Header and directory of a weight file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WeightFileInfo {
    pub version: u32,
    pub digest: [u8; 32],
    pub entries: Vec<WeightEntry>,
    pub file_len: u64,
}

/// Serializes a store in name order.
pub fn encode_weights<T: Scalar>(store: &ParamStore<T>, spec: &ModelSpec) -> Result<Vec<u8>> {
    let entries: Vec<_> = store.iter().collect();
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&spec.digest());
    head.extend_from_slice(
        &u32::try_from(entries.len())
            .map_err(|_| Error::Format("too many tensors".into()))?
            .to_le_bytes(),
    );
    let dir_len: usize = entries.iter().map(|(n, _, _)| 2 + n.len() + 1 + 1 + 16 + 8 + 8).sum();
    let mut offset = (head.len() + dir_len) as u64;
    let mut blobs = Vec::new();
    for (name, kind, t) in &entries {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
        head.extend_from_slice(&name_len.to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(kind.code());
        head.push(T::DTYPE.code());
        for d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("`{name}` extent exceeds u32")))?;
            head.extend_from_slice(&d.to_le_bytes());
        }
        let length = (t.numel() * T::DTYPE.size()) as u64;
        head.extend_from_slice(&offset.to_le_bytes());
        head.extend_from_slice(&length.to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut blobs);
        }
        offset += length;
    }
    head.extend_from_slice(&blobs);
    Ok(head)
}

pub fn save_weights<T: Scalar>(store: &ParamStore<T>, spec: &ModelSpec, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(store, spec)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("weight file truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and validates the header and directory.
pub fn decode_info(bytes: &[u8]) -> Result<WeightFileInfo> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::Format("empty or short weight file".into()))?
        != MAGIC
    {
        return Err(Error::Format("bad magic, not an LSW1 weight file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name =
            String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let kind = r.u8()?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype")))?;
        EntryKind::from_code(kind).ok_or_else(|| Error::Format(format!("`{name}`: unknown entry kind {kind}")))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let (offset, length) = (r.u64()?, r.u64()?);
        if length != (numel(&shape) * dtype.size()) as u64 {
            return Err(Error::Format(format!("`{name}`: blob length disagrees with shape")));
        }
        entries.push(WeightEntry {
            name,
            kind,
            dtype: dtype.name().to_string(),
            shape,
            offset,
            length,
        });
    }
    let mut cursor = r.pos as u64;
    for e in &entries {
        if e.offset < cursor {
            return Err(Error::Format(format!("`{}`: blob overlaps the previous one", e.name)));
        }
        cursor = e.offset + e.length;
        if cursor > bytes.len() as u64 {
            return Err(Error::Format(format!("weight file truncated inside `{}`", e.name)));
        }
    }
    Ok(WeightFileInfo {
        version,
        digest,
        entries,
        file_len: bytes.len() as u64,
    })
}

pub fn inspect_weights(path: &Path) -> Result<WeightFileInfo> {
    decode_info(&fs::read(path)?)
}

/// Decodes a store saved for `spec`. Nothing is returned unless every tensor
/// decodes.
pub fn decode_weights<T: Scalar>(bytes: &[u8], spec: &ModelSpec) -> Result<ParamStore<T>> {
    let info = decode_info(bytes)?;
    if info.digest != spec.digest() {
        return Err(Error::Incompatible(format!(
            "weight file was saved for a different model spec (expected {})",
            spec.digest_hex()
        )));
    }
    let mut store = ParamStore::new();
    for e in &info.entries {
        if e.dtype != T::DTYPE.name() {
            return Err(Error::Incompatible(format!(
                "`{}` is {}, loading as {}",
                e.name,
                e.dtype,
                T::DTYPE.name()
            )));
        }
        let start = e.offset as usize;
        let blob = &bytes[start..start + e.length as usize];
        let data = blob.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        let kind = EntryKind::from_code(e.kind).expect("validated");
        store.insert(&e.name, kind, Tensor::from_vec(e.shape, data)?);
    }
    Ok(store)
}

pub fn load_weights<T: Scalar>(path: &Path, spec: &ModelSpec) -> Result<ParamStore<T>> {
    decode_weights(&fs::read(path)?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn round_trip_is_byte_identical() {
        let spec = ModelSpec::tiny();
        let store = build_model::<f32>(&spec, 3).unwrap();
        let a = encode_weights(&store, &spec).unwrap();
        let back: ParamStore<f32> = decode_weights(&a, &spec).unwrap();
        assert_eq!(back, store);
        assert_eq!(encode_weights(&back, &spec).unwrap(), a);
    }

    #[test]
    fn directory_is_ordered_and_disjoint() {
        let spec = ModelSpec::tiny();
        let bytes = encode_weights(&build_model::<f64>(&spec, 0).unwrap(), &spec).unwrap();
        let info = decode_info(&bytes).unwrap();
        for w in info.entries.windows(2) {
            assert!(w[0].offset + w[0].length <= w[1].offset);
        }
        let last = info.entries.last().unwrap();
        assert_eq!(last.offset + last.length, info.file_len);
    }

    #[test]
    fn failures_are_classified() {
        let spec = ModelSpec::tiny();
        let bytes = encode_weights(&build_model::<f32>(&spec, 0).unwrap(), &spec).unwrap();
        let mut other = spec.clone();
        other.classes = 5;
        assert!(matches!(
            decode_weights::<f32>(&bytes, &other),
            Err(Error::Incompatible(_))
        ));
        assert!(matches!(
            decode_weights::<f64>(&bytes, &spec),
            Err(Error::Incompatible(_))
        ));
        assert!(matches!(
            decode_weights::<f32>(&bytes[..bytes.len() - 1], &spec),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            decode_weights::<f32>(&bytes[..20], &spec),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_weights::<f32>(&[], &spec), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights::<f32>(&bad, &spec), Err(Error::Format(_))));
    }
}
