//! Named parameters, their binding onto a tape, and the checkpoint file.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic        8 bytes   b"STRXCKPT"
//! version      u32       currently 1
//! meta_len     u64       byte length of the metadata blob
//! meta         meta_len  UTF-8 JSON (model config and vocabularies)
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   rank       u32
//!   dims       rank × u64
//!   data       prod(dims) × f64 (IEEE-754 bits)
//! ```

use std::io::{Read, Write};

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Array;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STRXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in insertion order, addressed by unique name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Array>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        let (idx, _) = self.params.insert_full(name.to_owned(), value);
        Ok(ParamId(idx))
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], scale: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, Array::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Array::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    pub fn write_checkpoint<W: Write>(&self, meta: &str, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(value.rank() as u32).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(value.len() * 8);
            for v in value.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint, returning the store and the metadata blob.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta = read_string(&mut r, meta_len)?;
        let count = read_u32(&mut r)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = read_string(&mut r, name_len)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            store.insert(&name, Array::new(shape, data)?)?;
        }
        Ok((store, meta))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// A tape plus the parameters bound onto it so far.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParameterStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.var(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter after `tape.backward`.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.bound.iter().enumerate().filter_map(|(i, v)| {
            v.and_then(|v| self.tape.grad(v)).map(|g| (ParamId(i), g))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParameterStore::new();
        store.uniform("a", &[3, 4], 0.1, &mut rng).unwrap();
        store.insert("b.scalar", Array::scalar(f64::MIN_POSITIVE)).unwrap();
        store.insert("c", Array::new([2], vec![-0.0, 1e300]).unwrap()).unwrap();
        let mut buf = Vec::new();
        store.write_checkpoint("{\"k\":1}", &mut buf).unwrap();
        let (back, meta) = ParameterStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        for ((n1, a1), (n2, a2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a1.shape(), a2.shape());
            let bits1: Vec<u64> = a1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = a2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn rejects_bad_magic_and_duplicates() {
        assert!(ParameterStore::read_checkpoint(&b"NOTACKPT\x01\0\0\0"[..]).is_err());
        let mut s = ParameterStore::new();
        s.zeros("x", &[1]).unwrap();
        assert!(s.zeros("x", &[1]).is_err());
    }
}
