//! Flat binary parameter checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "ANATCKPT"
//! version u32
//! count   u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, values f64 × prod(dims) }
//! ```

use std::io::{Read, Write};

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ANATCKPT";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
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
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every `(name, tensor)` record in file order.
pub fn read_params<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

/// Overwrites the values of `store` from a checkpoint; names and shapes must match exactly.
pub fn load_into<R: Read>(store: &mut ParamStore, r: R) -> Result<()> {
    let records = read_params(r)?;
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (name, value) in records {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        store.set_value(id, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store
            .add("w", Tensor::new(&[2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0, 1e300, -7.25]).unwrap())
            .unwrap();
        store.add("b", Tensor::vector(vec![0.1, 0.2])).unwrap();
        let mut buf = Vec::new();
        write_params(&store, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);

        let back = read_params(&buf[..]).unwrap();
        assert_eq!(back[0].0, "w");
        for (a, b) in back[0].1.data().iter().zip(store.value(store.id("w").unwrap()).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let mut fresh = ParamStore::new();
        fresh.add_zeros("w", &[2, 3]).unwrap();
        fresh.add_zeros("b", &[2]).unwrap();
        load_into(&mut fresh, &buf[..]).unwrap();
        assert_eq!(fresh.value(fresh.id("b").unwrap()).data(), &[0.1, 0.2]);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_params(&b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).is_err());
    }
}
