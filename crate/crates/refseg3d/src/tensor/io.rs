//! Tiny binary tensor format for fixtures and checkpoints.
//!
//! Layout, all little-endian:
//!   magic  b"TNSR"
//!   rank   u32
//!   dims   rank x u32
//!   data   product(dims) x f64

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context};

pub const MAGIC: &[u8; 4] = b"TNSR";

pub fn write_tensor<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> anyhow::Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        bail!("tensor write: shape {:?} does not match data length {}", shape, data.len());
    }
    w.write_all(MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> anyhow::Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!("tensor read: bad magic {:?}", magic);
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        bail!("tensor read: implausible rank {rank}");
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b8 = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Ok((shape, data))
}

pub fn save_tensor(path: &Path, shape: &[usize], data: &[f64]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("create {}", path.display()))?,
    );
    write_tensor(&mut f, shape, data)
}

pub fn load_tensor(path: &Path) -> anyhow::Result<(Vec<usize>, Vec<f64>)> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).with_context(|| format!("open {}", path.display()))?,
    );
    read_tensor(&mut f)
}
