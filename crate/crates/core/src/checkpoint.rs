//! Binary checkpoint format for parameter groups.
//!
//! ```text
//! "PBCK"                      4 bytes
//! version                     u32 LE (currently 1)
//! group count                 u32 LE
//! per group:
//!   name length               u32 LE
//!   name                      UTF-8 bytes
//!   kind tag                  u8 (0 = diagonal Gaussian, 1 = point mass)
//!   element count             u64 LE
//!   Gaussian:   count × f64 LE means, then count × f64 LE rhos
//!   point mass: count × f64 LE values
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::divergence::{GroupKind, StochasticParamGroup};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PBCK";
pub const FORMAT_VERSION: u32 = 1;

const TAG_GAUSSIAN: u8 = 0;
const TAG_POINT_MASS: u8 = 1;

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, groups: &[StochasticParamGroup]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let count = u32::try_from(groups.len()).map_err(|_| Error::Checkpoint("too many groups".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for g in groups {
        let name = g.name.as_bytes();
        let len = u32::try_from(name.len()).map_err(|_| Error::Checkpoint("group name too long".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        match &g.kind {
            GroupKind::DiagonalGaussian { mean, rho } => {
                w.write_all(&[TAG_GAUSSIAN])?;
                w.write_all(&(mean.len() as u64).to_le_bytes())?;
                write_f64s(&mut w, mean)?;
                write_f64s(&mut w, rho)?;
            }
            GroupKind::PointMass { values } => {
                w.write_all(&[TAG_POINT_MASS])?;
                w.write_all(&(values.len() as u64).to_le_bytes())?;
                write_f64s(&mut w, values)?;
            }
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated input: {e}")))?;
    Ok(buf)
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    (0..count)
        .map(|_| read_array::<8, _>(r).map(f64::from_le_bytes))
        .collect()
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<StochasticParamGroup>> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut groups = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = Vec::new();
        (&mut r).take(name_len as u64).read_to_end(&mut name)?;
        if name.len() != name_len {
            return Err(Error::Checkpoint("truncated group name".into()));
        }
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("group name is not UTF-8".into()))?;
        let [tag] = read_array::<1, _>(&mut r)?;
        let n = usize::try_from(u64::from_le_bytes(read_array(&mut r)?))
            .map_err(|_| Error::Checkpoint("element count overflows".into()))?;
        let kind = match tag {
            TAG_GAUSSIAN => GroupKind::DiagonalGaussian {
                mean: read_f64s(&mut r, n)?,
                rho: read_f64s(&mut r, n)?,
            },
            TAG_POINT_MASS => GroupKind::PointMass {
                values: read_f64s(&mut r, n)?,
            },
            other => return Err(Error::Checkpoint(format!("unknown kind tag {other}"))),
        };
        groups.push(StochasticParamGroup { name, kind });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last group".into()));
    }
    Ok(groups)
}

pub fn encode(groups: &[StochasticParamGroup]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, groups).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Vec<StochasticParamGroup>> {
    read_checkpoint(bytes)
}

pub fn save(path: impl AsRef<Path>, groups: &[StochasticParamGroup]) -> Result<()> {
    std::fs::write(path, encode(groups))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<StochasticParamGroup>> {
    decode(&std::fs::read(path)?)
}
