//! Flat binary weight container.
//!
//! Layout: the magic `MTLTXT1`, a u64 parameter count, then per parameter a
//! u64 name length, the UTF-8 name, a u64 rank, `rank` u64 extents and the
//! values as f64. Every integer and float is little-endian.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"MTLTXT1";

/// Named tensors in file order.
pub type WeightSet = Vec<(String, Tensor)>;

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let need = self.pos.checked_add(n).ok_or_else(|| self.oversized(what))?;
        if need > self.bytes.len() {
            return Err(Error::Weights(format!(
                "{}: truncated while reading {what}: expected at least {need} bytes, file has {}",
                self.source,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..need];
        self.pos = need;
        Ok(s)
    }

    fn oversized(&self, what: &str) -> Error {
        Error::Weights(format!("{}: implausible size for {what}", self.source))
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.oversized(what))
    }
}

pub fn decode_weights(bytes: &[u8], source: &str) -> Result<WeightSet> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Weights(format!("{source}: not a weight file (bad magic)")));
    }
    let count = r.u64("parameter count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u64("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Weights(format!("{source}: parameter {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u64("rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("extent")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| r.oversized("values"))?;
        let raw = r.take(n, &format!("values of '{name}'"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, values)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Weights(format!(
            "{source}: {} trailing bytes after {count} parameters",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(store))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightSet> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes, &path.display().to_string())
}

/// Copies `weights` into `store`. Names must match exactly, as must shapes.
/// Trainable flags in `store` are kept.
pub fn apply_weights(store: &mut ParamStore, weights: &WeightSet) -> Result<()> {
    apply_mapped(store, weights, |n| Some(n.to_string()), true)
}

/// Copies the entries of `weights` whose renamed form exists in `store`.
/// With `exact`, every store parameter must be covered and nothing may be
/// left over.
pub fn apply_mapped(
    store: &mut ParamStore,
    weights: &WeightSet,
    rename: impl Fn(&str) -> Option<String>,
    exact: bool,
) -> Result<()> {
    let mapped: Vec<(String, &Tensor)> = weights.iter().filter_map(|(n, t)| rename(n).map(|m| (m, t))).collect();
    let have: BTreeSet<&str> = mapped.iter().map(|(n, _)| n.as_str()).collect();
    let want: BTreeSet<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
    let missing: Vec<&str> = want.difference(&have).copied().collect();
    let extra: Vec<&str> = have.difference(&want).copied().collect();
    if exact && (!missing.is_empty() || !extra.is_empty()) {
        return Err(Error::Weights(format!(
            "parameter names do not match the model: missing [{}], extra [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    for (name, t) in &mapped {
        if let Some(p) = store.by_name(name) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::Weights(format!(
                    "parameter '{name}' has shape {:?} in the model but {:?} in the file",
                    p.tensor.shape(),
                    t.shape()
                )));
            }
        }
    }
    for (name, t) in mapped {
        if let Some(p) = store.by_name_mut(&name) {
            p.tensor.values_mut().copy_from_slice(t.values());
        }
    }
    Ok(())
}
