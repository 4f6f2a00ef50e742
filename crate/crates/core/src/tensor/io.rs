//! Flat binary tensor files.
//!
//! Layout: magic `PA3T`, u32 rank, one u64 per dimension, then the raw f64
//! payload. All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

const MAGIC: &[u8; 4] = b"PA3T";

pub fn save(path: &Path, tensor: &Tensor) -> Result<(), TensorError> {
    let file = File::create(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| -> Result<(), TensorError> {
        w.write_all(bytes)
            .map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))
    };
    write(MAGIC)?;
    write(&(tensor.shape.len() as u32).to_le_bytes())?;
    for &dim in &tensor.shape {
        write(&(dim as u64).to_le_bytes())?;
    }
    for &v in &tensor.data {
        write(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor, TensorError> {
    let file = File::open(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let fail = |msg: &str| TensorError::Io(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fail("truncated header"))?;
    if &magic != MAGIC {
        return Err(fail("bad magic, not a PA3T tensor file"));
    }
    let mut rank_bytes = [0u8; 4];
    r.read_exact(&mut rank_bytes).map_err(|_| fail("truncated rank"))?;
    let rank = u32::from_le_bytes(rank_bytes) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim).map_err(|_| fail("truncated dims"))?;
        shape.push(u64::from_le_bytes(dim) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf).map_err(|_| fail("truncated payload"))?;
        data.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf).map_err(|_| fail("read error"))? != 0 {
        return Err(fail("trailing bytes after payload"));
    }
    Tensor::new(shape, data)
}
