//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "HOIPCKPT"
//! version    u32 LE
//! config     u64 LE   hash of the model configuration
//! count      u32 LE   number of records
//! record*    name_len u32 LE, name (utf-8), ndim u32 LE, dims u32 LE * ndim,
//!            values f32 LE * product(dims)
//! ```
//!
//! Each layer contributes `<name>.weight` and `<name>.bias`; batch-norm layers
//! also write `<name>.running_mean` and `<name>.running_var`.

use std::io::{Read, Write};

use thiserror::Error;

use super::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"HOIPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint was written for config {found:016x}, model has {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("record {name}: {msg}")]
    Record { name: String, msg: String },
    #[error("checkpoint is missing record {0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

fn records_of(store: &ParamStore) -> Vec<Record> {
    let mut out = Vec::new();
    for layer in store.layers() {
        let mut push = |suffix: &str, t: &super::Tensor| {
            out.push(Record {
                name: format!("{}.{}", layer.name, suffix),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
        };
        push("weight", &layer.weights);
        push("bias", &layer.bias);
        if let Some(rm) = &layer.running_mean {
            push("running_mean", rm);
        }
        if let Some(rv) = &layer.running_var {
            push("running_var", rv);
        }
    }
    out
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    store: &ParamStore,
    config_hash: u64,
) -> Result<(), CheckpointError> {
    let records = records_of(store);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in &records {
        w.write_all(&(r.name.len() as u32).to_le_bytes())?;
        w.write_all(r.name.as_bytes())?;
        w.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses a checkpoint into its header hash and raw records.
pub fn read_records<R: Read>(mut r: R) -> Result<(u64, Vec<Record>), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut hb = [0u8; 8];
    r.read_exact(&mut hb)?;
    let hash = u64::from_le_bytes(hb);
    let count = read_u32(&mut r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Record {
            name: "<utf8>".into(),
            msg: e.to_string(),
        })?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(Record {
            name,
            shape,
            values,
        });
    }
    Ok((hash, records))
}

/// Loads parameter values into an already-built store with the same layout.
pub fn load_checkpoint<R: Read>(
    r: R,
    store: &mut ParamStore,
    config_hash: u64,
) -> Result<(), CheckpointError> {
    let (found, records) = read_records(r)?;
    if found != config_hash {
        return Err(CheckpointError::ConfigMismatch {
            expected: config_hash,
            found,
        });
    }
    let mut by_name: std::collections::HashMap<String, Record> =
        records.into_iter().map(|r| (r.name.clone(), r)).collect();
    for layer in store.layers_mut() {
        let name = layer.name.clone();
        let mut fill = |suffix: &str, t: &mut super::Tensor| -> Result<(), CheckpointError> {
            let key = format!("{name}.{suffix}");
            let rec = by_name
                .remove(&key)
                .ok_or_else(|| CheckpointError::Missing(key.clone()))?;
            if rec.shape != t.shape() {
                return Err(CheckpointError::Record {
                    name: key,
                    msg: format!("shape {:?} != model shape {:?}", rec.shape, t.shape()),
                });
            }
            for (dst, v) in t.data_mut().iter_mut().zip(&rec.values) {
                *dst = f64::from(*v);
            }
            t.clear_grad();
            Ok(())
        };
        fill("weight", &mut layer.weights)?;
        fill("bias", &mut layer.bias)?;
        if let Some(rm) = layer.running_mean.as_mut() {
            fill("running_mean", rm)?;
        }
        if let Some(rv) = layer.running_var.as_mut() {
            fill("running_var", rv)?;
        }
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(CheckpointError::Record {
            name: extra.clone(),
            msg: "not present in model".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        s.add_conv("c1", 2, 4, 3, &mut rng);
        s.add_batch_norm("bn1", 4);
        s.add_linear("fc", 4, 3, &mut rng);
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let original = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &original, 0xdead_beef).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut other = ParamStore::new();
        other.add_conv("c1", 2, 4, 3, &mut rng);
        other.add_batch_norm("bn1", 4);
        other.add_linear("fc", 4, 3, &mut rng);
        assert_ne!(other, original);
        load_checkpoint(&buf[..], &mut other, 0xdead_beef).unwrap();
        assert_eq!(other, original);
    }

    #[test]
    fn header_is_validated() {
        let s = store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, 1).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let mut target = store();
        assert!(matches!(
            load_checkpoint(&buf[..], &mut target, 2),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            load_checkpoint(&bad[..], &mut target, 1),
            Err(CheckpointError::BadMagic)
        ));
        assert!(load_checkpoint(&buf[..buf.len() - 1], &mut target, 1).is_err());
    }
}
