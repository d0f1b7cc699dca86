//! `FVR1` binary embedding files.
//!
//! Layout (little-endian): magic `b"FVR1"`, `u32` dimension, `u64` count,
//! then `count` records of `u64` id followed by `dimension` `f32` coordinates.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const FVR_MAGIC: &[u8; 4] = b"FVR1";

/// Raw contents of an embedding file.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFile {
    pub dim: usize,
    pub ids: Vec<u64>,
    /// Row-major, `ids.len() * dim` values.
    pub data: Vec<f32>,
}

impl VectorFile {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }
}

pub fn write_vectors(path: &Path, file: &VectorFile) -> Result<()> {
    if file.dim == 0 || file.data.len() != file.ids.len() * file.dim {
        return Err(Error::InvalidArgument(format!(
            "{} ids with {} coordinates do not form dimension-{} rows",
            file.ids.len(),
            file.data.len(),
            file.dim
        )));
    }
    write_atomic(path, |w| {
        let io = |e| Error::io(path, e);
        w.write_all(FVR_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(file.dim as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(file.ids.len() as u64).map_err(io)?;
        for (id, row) in file.rows() {
            w.write_u64::<LittleEndian>(id).map_err(io)?;
            for &x in row {
                w.write_f32::<LittleEndian>(x).map_err(io)?;
            }
        }
        Ok(())
    })
}

pub fn read_vectors(path: &Path) -> Result<VectorFile> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = BufReader::new(f);
    let truncated = |_| Error::malformed(path, "truncated file");

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != FVR_MAGIC {
        return Err(Error::malformed(path, "bad magic, expected FVR1"));
    }
    let dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let count = r.read_u64::<LittleEndian>().map_err(truncated)?;
    if dim == 0 {
        return Err(Error::malformed(path, "dimension 0"));
    }
    let expected = 16u64.saturating_add(count.saturating_mul(8 + 4 * dim as u64));
    if expected != len {
        return Err(Error::malformed(
            path,
            format!("header promises {expected} bytes, file has {len}"),
        ));
    }
    let count = count as usize;
    let mut ids = Vec::with_capacity(count);
    let mut data = vec![0f32; count * dim];
    for row in data.chunks_exact_mut(dim) {
        ids.push(r.read_u64::<LittleEndian>().map_err(truncated)?);
        r.read_f32_into::<LittleEndian>(row).map_err(truncated)?;
    }
    Ok(VectorFile { dim, ids, data })
}
