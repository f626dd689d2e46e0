//! Raw tensor file format used by checkpoints and dataset manifests.
//!
//! Layout: magic `PMTN`, `u32` rank, `u32` dims (one per axis), then the
//! payload as little-endian 32-bit floats in row-major order. For the
//! rank-2 tensors that dominate checkpoints the header is 16 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PMTN";

/// Write a tensor given its dims and a row-major f64 slice (stored as f32).
pub fn write_tensor(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "tensor file {}: dims {:?} imply {} elements, got {}",
            path.display(),
            dims,
            numel,
            data.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |buf: &[u8]| w.write_all(buf).map_err(|e| Error::io(path, e));
    emit(&MAGIC)?;
    emit(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        emit(&(d as u32).to_le_bytes())?;
    }
    for &x in data {
        emit(&(x as f32).to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a tensor file, returning its dims and payload widened to f64.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != MAGIC {
        return Err(Error::Schema(format!(
            "{}: bad magic {:?}, expected PMTN",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Schema(format!(
            "{}: implausible tensor rank {}",
            path.display(),
            rank
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
        dims.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(Error::Schema(format!(
                "{}: trailing bytes after tensor payload",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pmtn");
        let data: Vec<f64> = (0..24).map(|i| (i as f64) * 0.37 - 3.0).collect();
        // f32-representable values survive the f64 -> f32 -> f64 trip exactly
        let data: Vec<f64> = data.iter().map(|&x| x as f32 as f64).collect();
        write_tensor(&path, &[2, 3, 4], &data).unwrap();
        let (dims, back) = read_tensor(&path).unwrap();
        assert_eq!(dims, vec![2, 3, 4]);
        assert_eq!(back, data);
        // byte-level stability
        let bytes1 = std::fs::read(&path).unwrap();
        write_tensor(&path, &[2, 3, 4], &back).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Schema(_))));
    }

    #[test]
    fn rejects_dim_payload_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pmtn");
        assert!(write_tensor(&path, &[2, 2], &[1.0; 3]).is_err());
    }
}
