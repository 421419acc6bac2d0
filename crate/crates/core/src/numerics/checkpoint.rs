//! `AHIP` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AHIP" | version u32 | precision u8 (0 = f64, 1 = f32)
//! metadata_len u64 | metadata (UTF-8)
//! count u32 | count x { name_len u32 | name | dtype u8 | trainable u8
//!                       | ndim u32 | dims u64 x ndim | offset u64 | nbytes u64 }
//! payload: raw values, offsets relative to the start of the payload
//! ```

use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::Precision;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AHIP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub precision: Precision,
    pub metadata: String,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    /// Snapshot of the persistent parameters of `store`.
    pub fn from_store(store: &ParamStore, precision: Precision, metadata: String) -> Self {
        let entries = store
            .persistent()
            .map(|(_, p)| CheckpointEntry { name: p.name.clone(), trainable: p.trainable, tensor: p.tensor.clone() })
            .collect();
        Self { precision, metadata, entries }
    }

    /// Rebuilds a store whose persistent ids match the saved order.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            store.add(&e.name, e.tensor.clone(), e.trainable)?;
        }
        Ok(store)
    }
}

fn dtype(p: Precision) -> u8 {
    match p {
        Precision::F64 => 0,
        Precision::F32 => 1,
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let width = match ckpt.precision {
        Precision::F64 => 8,
        Precision::F32 => 4,
    };
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(dtype(ckpt.precision));
    out.extend_from_slice(&(ckpt.metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(ckpt.metadata.as_bytes());
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for e in &ckpt.entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(dtype(ckpt.precision));
        out.push(u8::from(e.trainable));
        out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let nbytes = (e.tensor.len() * width) as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&nbytes.to_le_bytes());
        offset += nbytes;
    }
    for e in &ckpt.entries {
        for &v in e.tensor.data() {
            match ckpt.precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => {
                    let f = v as f32;
                    if f as f64 != v {
                        return Err(Error::Numeric(format!(
                            "`{}` holds {v}, which is not representable in 32 bits",
                            e.name
                        )));
                    }
                    out.extend_from_slice(&f.to_le_bytes());
                }
            }
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an AHIP checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let precision = match c.u8()? {
        0 => Precision::F64,
        1 => Precision::F32,
        other => return Err(Error::Format(format!("unknown precision flag {other}"))),
    };
    let meta_len = c.len()?;
    let metadata = String::from_utf8(c.take(meta_len)?.to_vec())
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let dt = c.u8()?;
        if dt != dtype(precision) {
            return Err(Error::Format(format!("`{name}` dtype {dt} differs from header precision")));
        }
        let trainable = c.u8()? != 0;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let offset = c.len()?;
        let nbytes = c.len()?;
        manifest.push((name, trainable, shape, offset, nbytes));
    }
    let payload = &buf[c.pos..];
    let width = if precision == Precision::F64 { 8 } else { 4 };
    let mut entries = Vec::with_capacity(count);
    for (name, trainable, shape, offset, nbytes) in manifest {
        let n: usize = shape.iter().product();
        if nbytes != n * width || offset.checked_add(nbytes).is_none_or(|end| end > payload.len()) {
            return Err(Error::Format(format!("`{name}` payload out of bounds")));
        }
        let bytes = &payload[offset..offset + nbytes];
        let data: Vec<f64> = match precision {
            Precision::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            Precision::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        entries.push(CheckpointEntry { name, trainable, tensor: Tensor::new(&shape, data)? });
    }
    Ok(Checkpoint { precision, metadata, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::new();
        s.add("a/w", Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(), true).unwrap();
        s.add("b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap(), false).unwrap();
        Checkpoint::from_store(&s, Precision::F64, "{\"k\":1}".into())
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        assert_eq!(&bytes[..4], b"AHIP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 0);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(read_checkpoint(&mut &cut[..]).is_err());
    }

    #[test]
    fn f32_refuses_lossy_values() {
        let mut ck = sample();
        ck.precision = Precision::F32;
        assert!(write_checkpoint(&mut Vec::new(), &ck).is_err());
    }

    #[test]
    fn store_round_trip_keeps_ids() {
        let ck = sample();
        let store = ck.to_store().unwrap();
        let again = Checkpoint::from_store(&store, Precision::F64, ck.metadata.clone());
        assert_eq!(ck, again);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64),
            f32_mode in any::<bool>(),
        ) {
            let precision = if f32_mode { Precision::F32 } else { Precision::F64 };
            let vals: Vec<f64> = if f32_mode { vals.iter().map(|&v| v as f32 as f64).filter(|v| v.is_finite()).collect() } else { vals };
            prop_assume!(!vals.is_empty());
            let mut s = ParamStore::new();
            s.add("p", Tensor::new(&[vals.len()], vals).unwrap(), true).unwrap();
            let ck = Checkpoint::from_store(&s, precision, "meta".into());
            let mut bytes = Vec::new();
            write_checkpoint(&mut bytes, &ck).unwrap();
            let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
            prop_assert!(back.entries[0].tensor.bit_eq(&ck.entries[0].tensor));
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }
}
