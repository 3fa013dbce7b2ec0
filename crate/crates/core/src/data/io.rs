//! Flat binary dataset dump.
//!
//! Layout, all little-endian: the 7-byte magic `SAFEDS1`, then `J, N, C, H, W`
//! as `u32`, then `N` labels as `u32`, then `N·C·H·W` pixel values as `f32`.

use std::io::{Read, Write};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"SAFEDS1";

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Data(format!("{what} {v} does not fit in 32 bits")))
}

pub fn write_dataset(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let (n, c, h, wd) = ds.images.dims4("write_dataset")?;
    w.write_all(MAGIC)?;
    for (v, what) in [(ds.num_classes, "class count"), (n, "N"), (c, "C"), (h, "H"), (wd, "W")] {
        w.write_all(&to_u32(v, what)?.to_le_bytes())?;
    }
    for &y in &ds.labels {
        w.write_all(&to_u32(y, "label")?.to_le_bytes())?;
    }
    for &v in ds.images.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset(mut r: impl Read) -> Result<Dataset> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a dataset dump (bad magic)".into()));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = read_u32(&mut r)? as usize;
    }
    let [j, n, c, h, w] = dims;
    let labels = (0..n).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut b = [0u8; 4];
    for _ in 0..n * c * h * w {
        r.read_exact(&mut b)?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Data("trailing bytes after dataset".into()));
    }
    Dataset::new(Tensor::new([n, c, h, w], data)?, labels, j)
}
