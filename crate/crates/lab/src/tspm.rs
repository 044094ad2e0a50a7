//! `TSPM` matrix blobs: magic `TSPM`, `u32` version, `u64` rows, `u64`
//! cols, then `rows × cols` little-endian `f64` in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use tailspace_core::Matrix;

use crate::error::{LabError, Result};

pub const MAGIC: [u8; 4] = *b"TSPM";
pub const VERSION: u32 = 1;

/// Reads refuse blobs claiming more entries than this.
pub const MAX_ENTRIES: u64 = 1 << 28;

pub fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for x in m.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let bad = |msg: String| LabError::format("TSPM blob", msg);
    let io = |e: std::io::Error| bad(format!("truncated or unreadable ({e})"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dword = [0u8; 8];
    r.read_exact(&mut dword).map_err(io)?;
    let rows = u64::from_le_bytes(dword);
    r.read_exact(&mut dword).map_err(io)?;
    let cols = u64::from_le_bytes(dword);
    let entries = rows.checked_mul(cols).filter(|&n| n <= MAX_ENTRIES);
    let Some(entries) = entries else {
        return Err(bad(format!("implausible shape {rows}x{cols}")));
    };
    let mut bytes = vec![0u8; entries as usize * 8];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Matrix::from_vec(rows as usize, cols as usize, data)?)
}

pub fn save(path: &Path, m: &Matrix) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_matrix(&mut w, m).and_then(|_| w.flush()).map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path) -> Result<Matrix> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    read_matrix(&mut BufReader::new(file)).map_err(|e| match e {
        LabError::Format { message, .. } => LabError::format(path.display().to_string(), message),
        other => other,
    })
}

/// Vectors are stored as `n × 1` blobs.
pub fn save_vector(path: &Path, v: &[f64]) -> Result<()> {
    save(path, &Matrix::column(v)?)
}

pub fn load_vector(path: &Path) -> Result<Vec<f64>> {
    let m = load(path)?;
    if m.cols() != 1 {
        return Err(LabError::format(path.display().to_string(), format!("expected a column, got {}x{}", m.rows(), m.cols())));
    }
    Ok(m.into_vec())
}
