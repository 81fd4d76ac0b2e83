//! Binary tensor checkpoints.
//!
//! Layout: the magic bytes `SMP1`, then for each tensor a u32 name length,
//! the UTF-8 name, a u32 rank, one u64 per dimension, and the row-major
//! values as little-endian 64-bit floats. Tensors are read until EOF.

use super::Tensor;
use ndarray::Array2;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SMP1";

pub fn save_tensors(path: &Path, entries: &[(String, Tensor)]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let (rows, cols) = tensor.shape();
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(rows as u64).to_le_bytes())?;
        w.write_all(&(cols as u64).to_le_bytes())?;
        for v in tensor.values().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn load_tensors(path: &Path) -> io::Result<Vec<(String, Array2<f64>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "not a tensor checkpoint (bad magic)",
        ));
    }
    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "tensor name not UTF-8"))?;
        let mut rank4 = [0u8; 4];
        r.read_exact(&mut rank4)?;
        let rank = u32::from_le_bytes(rank4);
        if rank != 2 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported tensor rank {rank}"),
            ));
        }
        let mut dim8 = [0u8; 8];
        r.read_exact(&mut dim8)?;
        let rows = u64::from_le_bytes(dim8) as usize;
        r.read_exact(&mut dim8)?;
        let cols = u64::from_le_bytes(dim8) as usize;
        let mut values = Vec::with_capacity(rows * cols);
        let mut v8 = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut v8)?;
            values.push(f64::from_le_bytes(v8));
        }
        let arr = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        out.push((name, arr));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.smp");
        let entries = vec![
            ("a.w".to_string(), Tensor::parameter(array![[1.0, -2.5], [0.25, 3.0]])),
            ("a.b".to_string(), Tensor::parameter(array![[0.0, 1e-30]])),
        ];
        save_tensors(&path, &entries).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for ((name, t), (lname, lv)) in entries.iter().zip(loaded.iter()) {
            assert_eq!(name, lname);
            assert_eq!(&t.value_clone(), lv);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.smp");
        std::fs::write(&path, b"OOPS").unwrap();
        assert!(load_tensors(&path).is_err());
    }
}
