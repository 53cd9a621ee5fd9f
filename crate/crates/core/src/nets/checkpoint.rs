//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DPRL"            4 bytes magic
//! version           u32
//! metadata length   u32, followed by that many bytes of UTF-8 JSON
//! tensor count      u32
//! per tensor:       rank u32, rank × u64 dims, prod(dims) × f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPRL";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON describing how to rebuild the networks.
    pub metadata: String,
    pub tensors: Vec<Tensor>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated header: {}", e)))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated shape: {}", e)))?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("truncated magic: {}", e)))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", version)));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|e| Error::Checkpoint(format!("truncated metadata: {}", e)))?;
        let metadata = String::from_utf8(meta).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = read_u32(r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let rank = read_u32(r)?;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("tensor rank {} too large", rank)));
            }
            let shape = (0..rank).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(|e| Error::Checkpoint(format!("truncated payload: {}", e)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}
