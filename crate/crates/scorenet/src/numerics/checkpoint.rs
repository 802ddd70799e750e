//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SNKT"
//! version u32 (currently 1)
//! repeated until EOF:
//!   name_len u32, name (UTF-8, name_len bytes),
//!   rank u32, dims u32 * rank,
//!   payload f32 * product(dims)
//! ```
//!
//! Records are written sorted by name, so equal parameter maps serialize to
//! identical bytes and round trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SNKT";
const VERSION: u32 = 1;

/// Serializes the map to `path`; see the module docs for the layout.
pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in tensors {
        if name.is_empty() {
            return Err(Error::contract("checkpoint: empty tensor name".to_string()));
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos,
                format!("truncated while reading {what} ({n} bytes wanted)"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint back into a name -> tensor map.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, want {MAGIC:?}")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }

    let mut out = BTreeMap::new();
    while cur.pos < bytes.len() {
        let record_start = cur.pos;
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format(record_start + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let count: usize = shape.iter().product();
        let payload_start = cur.pos;
        let payload = cur.take(count * 4, "payload")?;
        let mut data = Vec::with_capacity(count);
        for (i, c) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "checkpoint tensor '{name}' has non-finite value {v} at element {i} (byte {})",
                    payload_start + i * 4
                )));
            }
            data.push(v);
        }
        if out.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::format(record_start, format!("duplicate tensor name '{name}'")));
        }
    }
    Ok(out)
}
