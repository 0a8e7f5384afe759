//! Binary checkpoint: magic, version, hyperparameter text, then every
//! parameter and buffer as a named little-endian `f64` tensor.

use std::io::{Read, Write};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{Hyperparams, ModelBundle};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPF1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get::<4>(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get::<8>(r)?))
}

fn get_string(r: &mut impl Read, limit: usize) -> Result<String> {
    let len = get_u32(r)? as usize;
    if len > limit {
        return Err(Error::Checkpoint(format!("string length {len} exceeds {limit}")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

pub fn write_checkpoint(bundle: &ModelBundle, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    let hyper = bundle.hyper.to_text();
    put_u32(w, hyper.len() as u32)?;
    w.write_all(hyper.as_bytes())?;
    put_u32(w, bundle.store.len() as u32)?;
    for (_, p) in bundle.store.iter() {
        put_u32(w, p.name.len() as u32)?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        put_u32(w, p.value.shape().len() as u32)?;
        for &d in p.value.shape() {
            put_u64(w, d as u64)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Rebuild the architecture from the stored hyperparameters, then overwrite
/// every tensor by name. Missing, extra or misshapen tensors are errors.
pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelBundle> {
    let magic = get::<4>(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hyper = Hyperparams::from_text(&get_string(r, MAX_NAME)?)?;
    let mut bundle = ModelBundle::new(hyper)?;
    let count = get_u32(r)? as usize;
    if count != bundle.store.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, architecture has {}",
            bundle.store.len()
        )));
    }
    let mut filled = vec![false; count];
    for _ in 0..count {
        let name = get_string(r, MAX_NAME)?;
        let trainable = get::<1>(r)?[0] != 0;
        let rank = get_u32(r)? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let id = bundle
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if bundle.store.get(id).shape() != shape.as_slice() || bundle.store.is_trainable(id) != trainable {
            return Err(Error::Checkpoint(format!("tensor `{name}` does not match the architecture")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| get::<8>(r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        bundle.store.set(id, Tensor::new(shape, data)?)?;
        filled[id.index()] = true;
    }
    if filled.iter().any(|f| !f) {
        return Err(Error::Checkpoint("duplicate tensor names".into()));
    }
    Ok(bundle)
}
