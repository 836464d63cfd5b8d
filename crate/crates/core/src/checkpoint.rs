//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "FERCKPT1"
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (u64 × rank)
//!   data     f64 × product(dims), IEEE-754 little-endian
//! ```
//!
//! Values are stored bit-for-bit, so a load after save reproduces every
//! parameter exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamLayout};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FERCKPT1";

pub fn write_named(mut w: impl Write, named: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
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

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_named(mut r: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Input("not a checkpoint file (bad magic)".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Input("checkpoint tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let named: Vec<(&str, &Tensor)> = params.named().collect();
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_named(&mut w, &named)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path, layout: &ParamLayout) -> Result<ModelParams> {
    let f = std::fs::File::open(path)?;
    let named = read_named(std::io::BufReader::new(f))?;
    ModelParams::from_named(layout, named)
}

/// A single-tensor file (used for path-mode manifest frames).
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_named(&mut w, &[("frame", t)])?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let f = std::fs::File::open(path)?;
    let mut named = read_named(std::io::BufReader::new(f))?;
    if named.len() != 1 {
        return Err(Error::Input(format!(
            "{} holds {} tensors, expected 1",
            path.display(),
            named.len()
        )));
    }
    Ok(named.remove(0).1)
}
