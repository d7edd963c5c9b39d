//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `DEMINET1`, then for each parameter in store
//! order: name length (`u32`), name bytes (UTF-8), rank (`u32`), each
//! dimension (`u64`), and the values (`f64`). All integers and floats are
//! little-endian. The file ends after the last parameter.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DEMINET1";

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 if filled == 0 => return Ok(false),
            0 => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated checkpoint")),
            n => filled += n,
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let corrupt = |e: io::Error| NumericsError::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NumericsError::Checkpoint("bad magic, not a DEMINET1 checkpoint".into()));
    }
    let mut entries = Vec::new();
    loop {
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len).map_err(corrupt)? {
            break;
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(corrupt)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumericsError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r).map_err(corrupt)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r).map_err(corrupt)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(corrupt)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data)
            .map_err(|e| NumericsError::Checkpoint(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> io::Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), store)
}

/// Loads a checkpoint into `store`, failing unless names and shapes match
/// the store exactly.
pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<(), NumericsError> {
    let file = File::open(path)
        .map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
    let entries = read_checkpoint(BufReader::new(file))?;
    store.load_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., -6.25]).unwrap(), true);
        s.add("a.b", Tensor::new(vec![3], vec![0.5, 0.0, -1e-300]).unwrap(), true);
        s.add("bn.mean", Tensor::zeros(vec![3]), false);
        s
    }

    #[test]
    fn byte_layout_is_fixed() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::new(vec![1], vec![1.0]).unwrap(), true);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s).unwrap();
        let mut expected = b"DEMINET1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(b"x");
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip_restores_values() {
        let src = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &src).unwrap();
        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.get_mut(id).data_mut().fill(9.0);
        }
        dst.load_entries(read_checkpoint(buf.as_slice()).unwrap()).unwrap();
        for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatches_fail_loudly() {
        let src = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &src).unwrap();

        let mut other = ParamStore::new();
        other.add("a.w", Tensor::zeros(vec![3, 2]), true);
        other.add("a.b", Tensor::zeros(vec![3]), true);
        other.add("extra", Tensor::zeros(vec![1]), true);
        let err = other
            .load_entries(read_checkpoint(buf.as_slice()).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("a.w"), "{err}");
        assert!(err.contains("bn.mean"), "{err}");
        assert!(err.contains("missing parameter extra"), "{err}");

        assert!(read_checkpoint(&b"NOTMAGIC"[..]).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
