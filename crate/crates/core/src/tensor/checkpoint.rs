//! Binary weight container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic      8 bytes  "BUFTRKPT"
//! version    u32      CHECKPOINT_VERSION
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim × u32 extents
//!   payload  product(extents) × f32 little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"BUFTRKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata; the model layer stores its configuration here.
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_bytes(&mut w, self.metadata.as_bytes())?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&len_u32(t.shape().len())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&len_u32(d)?.to_le_bytes())?;
            }
            let mut payload = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let metadata = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * 4];
            r.read_exact(&mut payload)
                .map_err(|_| Error::Format(format!("truncated payload for `{name}`")))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Self { metadata, tensors })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    Checkpoint::read_from(std::io::BufReader::new(file))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(&len_u32(bytes.len())?.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("unexpected end of file".into()))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64),
                      meta in "[a-z{}\":, ]{0,40}") {
            let n = values.len();
            let ckpt = Checkpoint {
                metadata: meta,
                tensors: vec![
                    ("a.weight".into(), Tensor::new(vec![n], values.clone()).unwrap()),
                    ("b".into(), Tensor::new(vec![1, n, 1], values).unwrap()),
                ],
            };
            let mut buf = Vec::new();
            ckpt.write_to(&mut buf).unwrap();
            prop_assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), ckpt);
        }
    }

    #[test]
    fn header_is_versioned_little_endian() {
        let ckpt = Checkpoint {
            metadata: String::new(),
            tensors: vec![("w".into(), Tensor::new(vec![1], vec![1.0f32]).unwrap())],
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"BUFTRKPT");
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(&buf[buf.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ckpt = Checkpoint {
            metadata: "x".into(),
            tensors: vec![("w".into(), Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap())],
        };
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(Checkpoint::read_from(&buf[..]).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
