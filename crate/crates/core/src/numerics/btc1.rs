//! "BTC1" named-tensor container.
//!
//! Layout, all integers unsigned 32-bit little-endian:
//!
//! ```text
//! magic "BTC1" | count | count × { name_len | name | rank | dims[rank] | tag:u8 | data }
//! ```
//!
//! `tag` is 0 for f32, 1 for f64 and 2 for raw bytes; data is little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::scalar::{Precision, Scalar};
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTC1";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

impl StoredTensor {
    pub fn precision(&self) -> Precision {
        match self {
            StoredTensor::F32(_) => Precision::F32,
            StoredTensor::F64(_) => Precision::F64,
            StoredTensor::Bytes(_) => Precision::U8,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            StoredTensor::F32(t) => t.shape().to_vec(),
            StoredTensor::F64(t) => t.shape().to_vec(),
            StoredTensor::Bytes(b) => vec![b.len()],
        }
    }

    /// Converts a real tensor to the requested precision.
    pub fn to_real<T: Scalar>(&self) -> Result<Tensor<T>> {
        match self {
            StoredTensor::F32(t) => Ok(t.cast()),
            StoredTensor::F64(t) => Ok(t.cast()),
            StoredTensor::Bytes(_) => Err(Error::Format("expected a real tensor".into())),
        }
    }

    pub fn from_real<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::PRECISION {
            Precision::F64 => StoredTensor::F64(t.cast()),
            _ => StoredTensor::F32(t.cast()),
        }
    }
}

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub entries: Vec<(String, StoredTensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_entry(name: &str, t: &StoredTensor, out: &mut Vec<u8>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    let shape = t.shape();
    put_u32(out, shape.len())?;
    for &d in &shape {
        put_u32(out, d)?;
    }
    out.push(t.precision().tag());
    match t {
        StoredTensor::F32(t) => t.data().iter().for_each(|&x| x.write_le(out)),
        StoredTensor::F64(t) => t.data().iter().for_each(|&x| x.write_le(out)),
        StoredTensor::Bytes(b) => out.extend_from_slice(b),
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated container: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_entry(r: &mut impl Read) -> Result<(String, StoredTensor)> {
    let name_len = read_u32(r)?;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("name is not utf-8".into()))?;
    let rank = read_u32(r)?;
    let dims = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)
        .map_err(|e| Error::Format(format!("truncated tag: {e}")))?;
    let precision = Precision::from_tag(tag[0])
        .ok_or_else(|| Error::Format(format!("unknown precision tag {}", tag[0])))?;
    let numel: usize = dims.iter().product();
    let mut raw = vec![0u8; numel * precision.width()];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated data for {name}: {e}")))?;
    let t = match precision {
        Precision::F32 => StoredTensor::F32(Tensor::new(
            dims,
            raw.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        Precision::F64 => StoredTensor::F64(Tensor::new(
            dims,
            raw.chunks_exact(8).map(f64::read_le).collect(),
        )?),
        Precision::U8 => StoredTensor::Bytes(raw),
    };
    Ok((name, t))
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, t: StoredTensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Serialises the container; also returns the byte offset of each entry.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u64>)> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.entries.len())?;
        let mut offsets = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            offsets.push(out.len() as u64);
            encode_entry(name, t, &mut out)?;
        }
        Ok((out, offsets))
    }

    pub fn decode(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("missing magic: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a BTC1 container".into()));
        }
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(read_entry(&mut r)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<Vec<u64>> {
        let (bytes, offsets) = self.encode()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(offsets)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| missing(path, e))?;
        Self::decode(BufReader::new(f))
    }

    /// Reads the single entry starting at `offset` (as returned by [`save`](Self::save)).
    pub fn read_entry_at(path: &Path, offset: u64) -> Result<(String, StoredTensor)> {
        let mut f = BufReader::new(File::open(path).map_err(|e| missing(path, e))?);
        f.seek(SeekFrom::Start(offset))?;
        read_entry(&mut f)
    }
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: "file not found".into(),
        }
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::default();
        f.push(
            "a",
            StoredTensor::F32(Tensor::matrix(2, 2, vec![1.0, -2.5, 3.0, 0.125]).unwrap()),
        );
        f.push(
            "b.c",
            StoredTensor::F64(Tensor::new(vec![3], vec![1e-300, -0.0, 7.0]).unwrap()),
        );
        f.push("meta", StoredTensor::Bytes(b"{\"k\":1}".to_vec()));
        f
    }

    #[test]
    fn header_layout_is_little_endian() {
        let (bytes, offsets) = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"BTC1");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(offsets[0], 8);
        // name length, name, rank, dims, tag
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'a');
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &2u32.to_le_bytes());
        assert_eq!(bytes[25], 0);
        assert_eq!(&bytes[26..30], &1.0f32.to_le_bytes());
    }

    #[test]
    fn decode_inverts_encode_and_offsets_seek() {
        let f = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.btc");
        let offsets = f.save(&path).unwrap();
        assert_eq!(TensorFile::load(&path).unwrap(), f);
        let (name, t) = TensorFile::read_entry_at(&path, offsets[1]).unwrap();
        assert_eq!(name, "b.c");
        assert_eq!(&t, f.get("b.c").unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(TensorFile::decode(&b"BTC2\0\0\0\0"[..]).is_err());
        let (bytes, _) = sample().encode().unwrap();
        assert!(TensorFile::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorFile::decode(&extra[..]).is_err());
    }
}
