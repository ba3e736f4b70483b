//! Flat binary checkpoint format for named parameter matrices.
//!
//! Layout: version byte (1), then u32 LE entry count, then per entry a u32 LE
//! name length, the UTF-8 name, u32 LE rows, u32 LE cols, and rows·cols f64
//! values in LE byte order. Values round-trip bit-exactly (−0.0, subnormals,
//! the lot) because they are written as raw bit patterns.

use crate::error::{KernelError, Result};
use crate::matrix::Matrix;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const VERSION: u8 = 1;

pub fn save(path: &Path, entries: &[(&str, &Matrix)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[VERSION])?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, m) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for &v in m.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    if byte[0] != VERSION {
        return Err(KernelError::Format(format!(
            "unsupported checkpoint version {}",
            byte[0]
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| KernelError::Format(format!("bad name encoding: {e}")))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        entries.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    // Trailing bytes mean the file does not match what was written.
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(KernelError::Format(
            "trailing bytes after final checkpoint entry".to_string(),
        ));
    }
    Ok(entries)
}

/// Lookup helper for loaders that expect a fixed parameter set.
pub fn take_entry(entries: &mut Vec<(String, Matrix)>, name: &str) -> Result<Matrix> {
    let pos = entries
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| KernelError::Format(format!("checkpoint is missing entry '{name}'")))?;
    Ok(entries.swap_remove(pos).1)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let a = Matrix::from_vec(2, 2, vec![-0.0, 1e-308, f64::MAX, -3.7]).unwrap();
        let b = Matrix::row_vector(vec![0.1 + 0.2]);
        save(&path, &[("w", &a), ("layer/bias", &b)]).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "w");
        for (x, y) in loaded[0].1.data().iter().zip(a.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded[1].1.data()[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn missing_entry_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &[("w", &Matrix::zeros(1, 1))]).unwrap();
        let mut entries = load(&path).unwrap();
        let err = take_entry(&mut entries, "absent").unwrap_err();
        assert!(err.to_string().contains("absent"));
    }

    #[test]
    fn bad_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        std::fs::write(&path, [9u8, 0, 0, 0, 0]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, KernelError::Format(_)));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&path, &[("w", &Matrix::zeros(1, 1))]).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0xFF);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(KernelError::Format(_))));
    }
}
