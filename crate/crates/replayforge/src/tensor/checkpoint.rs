//! Flat binary parameter checkpoints.
//!
//! Layout: magic `"RFTN"`, `u32` tensor count, then per tensor a `u32` rank,
//! `rank` little-endian `u32` extents, and the row-major `f64` little-endian
//! payload. Tensors are positional: writers and readers must agree on
//! parameter order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"RFTN";

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let shape = t.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &e in &shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(TensorError::CheckpointMagic);
    }
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(TensorError::CheckpointTruncated(format!(
                "tensor {i}: implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            read_exact(&mut r, &mut buf, "payload")?;
            *v = f64::from_le_bytes(buf);
        }
        let t = Tensor::new(&shape, data)
            .map_err(|e| TensorError::CheckpointTruncated(format!("tensor {i}: {e}")))?;
        tensors.push(t);
    }
    Ok(tensors)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        TensorError::CheckpointTruncated(format!("unexpected end of file reading {what}"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.rftn");
        let a = Tensor::new(
            &[2, 3],
            vec![1.5, -2.25, 0.1, f64::MIN_POSITIVE, 1e300, -0.0],
        )
        .unwrap();
        let b = Tensor::new(&[4], vec![0.3, 0.7, -1.0, 2.0]).unwrap();
        save_tensors(&path, &[a.clone(), b.clone()]).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].shape(), a.shape());
        assert_eq!(loaded[1].shape(), b.shape());
        for (x, y) in loaded[0].to_vec().iter().zip(a.to_vec()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded[1].to_vec(), b.to_vec());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rftn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_tensors(&path),
            Err(TensorError::CheckpointMagic)
        ));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.rftn");
        let t = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_tensors(&path, &[t]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_tensors(&path),
            Err(TensorError::CheckpointTruncated(_))
        ));
    }
}
