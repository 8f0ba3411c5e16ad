//! Parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"TGRD"                     magic
//! u32                         format version (1)
//! u32                         number of weight matrices
//! per matrix:
//!   u32 rows, u32 cols
//!   rows·cols f64             row-major payload
//! ```

use super::{NetError, Params, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGRD";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &Params, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(params.num_layers() as u32).to_le_bytes())?;
    for w in params.layers() {
        out.write_all(&(w.rows() as u32).to_le_bytes())?;
        out.write_all(&(w.cols() as u32).to_le_bytes())?;
        for v in w.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, offset: &mut u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| NetError::Checkpoint(format!("truncated {} at byte {}", what, offset)))?;
    *offset += 4;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Params> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| NetError::Checkpoint("truncated magic at byte 0".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint(format!("bad magic {:?} at byte 0", magic)));
    }
    let mut offset = 4u64;
    let version = read_u32(&mut r, &mut offset, "version")?;
    if version != VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {} at byte 4", version)));
    }
    let count = read_u32(&mut r, &mut offset, "layer count")?;
    let mut weights = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rows = read_u32(&mut r, &mut offset, "rows")? as usize;
        let cols = read_u32(&mut r, &mut offset, "cols")? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b).map_err(|_| NetError::Checkpoint(format!("truncated payload at byte {}", offset)))?;
            offset += 8;
            data.push(f64::from_le_bytes(b));
        }
        weights.push(Tensor::matrix(rows, cols, data)?);
    }
    Ok(Params::from_weights(weights))
}

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Params> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
