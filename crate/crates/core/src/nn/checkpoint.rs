//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   8 bytes  magic "LFNNCKPT"
//!          4 bytes  u32 format version (1)
//!          4 bytes  u32 number of parameter records
//! record   4 bytes  u32 name length in bytes
//!          n bytes  UTF-8 name
//!          4 bytes  u32 rank
//!          4*rank   u32 extents
//!          4*count  f32 values, count = product of extents
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Network;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LFNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn write_records<W: Write>(mut w: W, records: &[ParamRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let expected: usize = r.shape.iter().product();
        if expected != r.values.len() {
            return Err(Error::Checkpoint(format!("record `{}` shape/value count mismatch", r.name)));
        }
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &e in &r.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.values.len() * 4);
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<ParamRecord>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|e| Error::Checkpoint(format!("truncated values in `{name}`: {e}")))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(ParamRecord { name, shape, values });
    }
    Ok(out)
}

pub fn records_of(net: &Network<f32>) -> Vec<ParamRecord> {
    net.params()
        .into_iter()
        .map(|p| ParamRecord { name: p.name.clone(), shape: p.shape.clone(), values: p.value.clone() })
        .collect()
}

pub fn save(net: &Network<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, &records_of(net))?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load parameter values into a network of identical architecture.
pub fn load_into(net: &mut Network<f32>, path: &Path) -> Result<()> {
    let records = read_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let mut params = net.params_mut();
    if records.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, network has {}",
            records.len(),
            params.len()
        )));
    }
    for (p, r) in params.iter_mut().zip(records) {
        if p.name != r.name || p.shape != r.shape {
            return Err(Error::Checkpoint(format!(
                "expected `{}` {:?}, found `{}` {:?}",
                p.name, p.shape, r.name, r.shape
            )));
        }
        p.value = r.values;
    }
    Ok(())
}
