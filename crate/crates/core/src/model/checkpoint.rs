//! Flat binary parameter files.
//!
//! Layout (little endian): magic `MERITCKP`, `u32` version, `u32` record
//! count, then per record: `u32` name length, UTF-8 name, `u32` rank,
//! `rank × u64` extents, `f32` data.

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::{Element, Tensor};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MERITCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize every parameter of `module` in visiting order.
pub fn write_checkpoint<T: Element, M: Module<T>>(module: &M, w: &mut impl Write) -> Result<()> {
    let mut records = Vec::new();
    module.visit_params(&mut |p| records.push(p));
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for p in records {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * 4);
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parse a checkpoint into name → tensor records.
pub fn read_checkpoint(r: &mut impl Read) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("record '{name}': {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate record '{name}'")));
        }
    }
    Ok(out)
}

/// Write `module` to `path`.
pub fn save_checkpoint<T: Element, M: Module<T>>(module: &M, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(module, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Load `path` into `module`; every parameter must be present with the
/// same shape and the file must hold no extra records.
pub fn load_checkpoint<T: Element, M: Module<T>>(module: &mut M, path: &Path) -> Result<()> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = read_checkpoint(&mut r)?;
    let mut err = None;
    module.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match records.remove(p.name()) {
            None => err = Some(Error::Format(format!("checkpoint lacks '{}'", p.name()))),
            Some(t) if t.shape() != p.value.shape() => {
                err = Some(Error::Format(format!(
                    "'{}' has shape {:?} in checkpoint, {:?} in model",
                    p.name(),
                    t.shape(),
                    p.value.shape()
                )))
            }
            Some(t) => {
                for (d, s) in p.value.data_mut().iter_mut().zip(t.data()) {
                    *d = T::lit(*s as f64);
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Format(format!("checkpoint has unknown record '{extra}'")));
    }
    Ok(())
}
