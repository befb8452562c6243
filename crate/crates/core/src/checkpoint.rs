//! Named-tensor archive.
//!
//! Layout, all integers little-endian u32:
//!
//! ```text
//! "CIVT" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | extents… | dtype tag | f32 payload
//! CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"CIVT";
pub const VERSION: u32 = 1;
/// Little-endian IEEE-754 binary32.
pub const DTYPE_F32: u32 = 1;

pub type Named = Vec<(String, Tensor<f32>)>;

fn put(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} {n} does not fit in u32")))
}

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put(&mut buf, VERSION);
    put(&mut buf, u32_of(tensors.len(), "tensor count")?);
    for (name, t) in tensors {
        put(&mut buf, u32_of(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        put(&mut buf, u32_of(t.rank(), "rank")?);
        for &e in t.shape() {
            put(&mut buf, u32_of(e, "extent")?);
        }
        put(&mut buf, DTYPE_F32);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Named> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("missing CIVT magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = r.u32("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype tag {dtype}")));
        }
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).and_then(|n| n.checked_mul(4));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor {name}: extent overflow")))?;
        let data = r.take(n, &name)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last tensor", body.len() - r.pos)));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Named> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl<T: Float> Model<T> {
    /// Parameters in build order, as f32 named tensors.
    pub fn to_named(&self) -> Named {
        self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }

    /// Replaces every parameter from a named archive. Names, order and
    /// shapes must match the model exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                named.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(named) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {name} {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.cast().into();
        }
        Ok(())
    }
}
