//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! magic "NDGRADCK" | version | count
//! count x (name_len | name utf-8 | ndim | dims...)      -- in name order
//! count x raw f32 payload                                -- same order
//! ```

use std::io::{self, Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NDGRADCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(store: &ParamStore<f32>, w: &mut impl Write) -> Result<(), CheckpointError> {
    let ids = store.ids_by_name();
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, ids.len() as u32)?;
    for id in &ids {
        let name = store.name(*id).as_bytes();
        write_u32(w, name.len() as u32)?;
        w.write_all(name)?;
        let shape = store.get(*id).shape();
        write_u32(w, shape.len() as u32)?;
        for d in shape {
            write_u32(w, *d as u32)?;
        }
    }
    for id in &ids {
        for v in store.get(*id).data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checkpoint_hash(store: &ParamStore<f32>) -> String {
    hex::encode(Sha256::digest(checkpoint_bytes(store)))
}

/// Reads a checkpoint into a standalone store (parameters in name order).
pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore<f32>, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("wrong magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        table.push((name, shape));
    }
    let mut store = ParamStore::new();
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        store.insert(&name, t).map_err(|e| CheckpointError::Format(e.to_string()))?;
    }
    Ok(store)
}

/// Overwrites the values of `target` with a checkpoint that must contain
/// exactly the same names and shapes.
pub fn load_into(target: &mut ParamStore<f32>, r: &mut impl Read) -> Result<(), CheckpointError> {
    let loaded = read_checkpoint(r)?;
    if loaded.len() != target.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters in checkpoint, {} in model",
            loaded.len(),
            target.len()
        )));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let name = target.name(id).to_string();
        let src = loaded.id(&name).ok_or_else(|| CheckpointError::Mismatch(format!("missing {name}")))?;
        let value = loaded.get(src);
        if value.shape() != target.get(id).shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{name}: {:?} vs {:?}",
                value.shape(),
                target.get(id).shape()
            )));
        }
        *target.get_mut(id) = value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("z.weight", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        s.insert("a.bias", Tensor::new(vec![3], vec![-1.0, 0.5, 0.25]).unwrap()).unwrap();
        s
    }

    #[test]
    fn header_lists_parameters_in_name_order() {
        let bytes = checkpoint_bytes(&store());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        let first_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20..20 + first_len], b"a.bias");
        // payload starts with a.bias values
        let payload = bytes.len() - 7 * 4;
        assert_eq!(f32::from_le_bytes(bytes[payload..payload + 4].try_into().unwrap()), -1.0);
    }

    #[test]
    fn load_into_restores_values() {
        let original = store();
        let bytes = checkpoint_bytes(&original);
        let mut target = store();
        *target.get_mut(target.id("a.bias").unwrap()) = Tensor::zeros(&[3]);
        load_into(&mut target, &mut bytes.as_slice()).unwrap();
        assert!(target.same_values(&original));
        assert_eq!(checkpoint_hash(&target), checkpoint_hash(&original));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bytes = checkpoint_bytes(&store());
        let mut other = ParamStore::new();
        other.insert("z.weight", Tensor::zeros(&[4])).unwrap();
        other.insert("a.bias", Tensor::zeros(&[3])).unwrap();
        assert!(matches!(load_into(&mut other, &mut bytes.as_slice()), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn truncated_input_is_an_error() {
        let bytes = checkpoint_bytes(&store());
        assert!(read_checkpoint(&mut &bytes[..bytes.len() - 3]).is_err());
    }
}
