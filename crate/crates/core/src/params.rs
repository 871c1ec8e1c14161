//! Named parameter storage and the `M3DT` checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "M3DT" | u32 version | u32 header_len | header (UTF-8 key=value lines)
//!        | u32 entry_count
//!        | per entry: u32 name_len | name | u32 rank | rank × u64 dims | f32 payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M3DT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    values: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            values: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        self.grads.insert(name.clone(), Tensor::zeros(value.shape().to_vec()));
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.values.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.values.get_mut(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.values
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, v), g)| (k.as_str(), v, g))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `scale · ∂loss/∂p` for every parameter bound on `graph`.
    /// Parameters not bound on the graph are left unchanged.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, grads: &Gradients<T>, scale: T) {
        for (name, var) in graph.bound_params() {
            let g = grads.get(var);
            let slot = self.grads.get_mut(name).expect("bound params come from this store");
            for (d, &v) in slot.data_mut().iter_mut().zip(g.data()) {
                *d += v * scale;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            values: self.values.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            grads: self.grads.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Serialized checkpoint bytes; `header` is a free-form key=value block.
    pub fn to_checkpoint_bytes(&self, header: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in &self.values {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an M3DT checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = String::from_utf8(r.take(hlen)?.to_vec())
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("entry too large".into()))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint entries".into()));
        }
        Ok((store, header))
    }

    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        crate::io::write_atomic(path, &self.to_checkpoint_bytes(header))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
