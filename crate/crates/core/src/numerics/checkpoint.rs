//! Binary checkpoint format for parameter stores.
//!
//! Layout: magic `PARCO1`, u32 parameter count, then one record per
//! parameter — u32 name length, UTF-8 name bytes, u32 rank, u64 extents,
//! little-endian f64 payload. All integers little-endian. Round-trips are
//! bit-exact.

use super::{DiffArray, ParamStore};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"PARCO1";

impl ParamStore {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, array) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(array.shape().len() as u32).to_le_bytes())?;
            for &extent in array.shape() {
                w.write_all(&(extent as u64).to_le_bytes())?;
            }
            for &v in array.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let display = path.display().to_string();
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::malformed(&display, "bad magic"));
        }

        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::malformed(&display, "parameter name is not UTF-8"))?;

            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            store.register(&name, DiffArray::new(shape, values))?;
        }
        Ok(store)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store
            .register(
                "asr.enc.w",
                DiffArray::new(vec![2, 3], vec![1.5, -0.25, 1e-300, f64::MIN_POSITIVE, 0.0, -0.0]),
            )
            .unwrap();
        store
            .register("ctx.fuse.b", DiffArray::vector(vec![std::f64::consts::PI]))
            .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();

        assert_eq!(loaded.len(), store.len());
        for ((n1, a1), (n2, a2)) in store.iter().zip(loaded.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a1.shape(), a2.shape());
            let bits1: Vec<u64> = a1.values().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = a2.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTAMAGIC").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }
}
