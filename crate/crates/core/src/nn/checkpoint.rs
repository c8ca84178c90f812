//! Binary checkpoint: `"BSHP"`, `u16` version, `u32` record count, then per
//! record `u32` name length, UTF-8 name, `u32` rank, `u64` dims, and the
//! values as little-endian `f64`. All integers are little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BSHP";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact(&mut r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "record count")?);
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = u32::from_le_bytes(read_exact(&mut r, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_exact(&mut r, "dimension")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_exact(&mut r, "values")?));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        records.push((name, t));
    }
    Ok(records)
}
