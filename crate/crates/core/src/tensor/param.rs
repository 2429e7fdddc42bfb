//! Learnable parameters and their flat binary container.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{PipelineError, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable handle for one parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// One learnable tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Vec<S>,
}

/// Flat arena of named parameters. Names are unique and stable across
/// save/load, which makes the serialized container order-independent.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, u32>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len() as u32);
        let grad = vec![S::zero(); value.numel()];
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Parameter { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.index()].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.index()].value
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.params[id.index()].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.index()].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len() as u32).map(ParamId)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[S]) {
        let g = &mut self.params[id.index()].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, &di) in g.iter_mut().zip(delta) {
            *gi = *gi + di;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over the value bits; used to verify frozen weights stay frozen.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for p in &self.params {
            for b in p.name.as_bytes() {
                eat(*b);
            }
            for v in p.value.data() {
                for b in (v.into_f64() as f32).to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }

    /// Writes `magic | version | count | entries` with 32-bit little-endian
    /// values (f64 stores are narrowed).
    pub fn save_container(&self, magic: &[u8; 4], w: &mut impl Write) -> Result<(), PipelineError> {
        w.write_all(magic)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            let shape = p.value.shape();
            w.write_all(&[shape.len() as u8])?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&(v.into_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads values into an existing store; every entry must match a known
    /// parameter name and shape, and every parameter must be covered.
    pub fn load_container(&mut self, magic: &[u8; 4], r: &mut impl Read) -> Result<(), PipelineError> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m)?;
        if &m != magic {
            return Err(PipelineError::BadModelFile(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut w32 = [0u8; 4];
        r.read_exact(&mut w32)?;
        let version = u32::from_le_bytes(w32);
        if version != CONTAINER_VERSION {
            return Err(PipelineError::BadModelFile(format!(
                "unknown container version {version}"
            )));
        }
        r.read_exact(&mut w32)?;
        let count = u32::from_le_bytes(w32) as usize;
        if count != self.params.len() {
            return Err(PipelineError::BadModelFile(format!(
                "container has {count} parameters, model expects {}",
                self.params.len()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        for _ in 0..count {
            let mut w16 = [0u8; 2];
            r.read_exact(&mut w16)?;
            let name_len = u16::from_le_bytes(w16) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| PipelineError::BadModelFile("non-utf8 parameter name".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut w32)?;
                shape.push(u32::from_le_bytes(w32) as usize);
            }
            let id = *self
                .by_name
                .get(&name)
                .ok_or_else(|| PipelineError::BadModelFile(format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[id as usize];
            if p.value.shape() != shape.as_slice() {
                return Err(PipelineError::BadModelFile(format!(
                    "parameter `{name}` has shape {:?} in the file, expected {:?}",
                    shape,
                    p.value.shape()
                )));
            }
            if seen[id as usize] {
                return Err(PipelineError::BadModelFile(format!("duplicate parameter `{name}`")));
            }
            seen[id as usize] = true;
            let numel = p.value.numel();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = p.value.data_mut();
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                data[i] = S::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Ok(())
    }

    pub(crate) fn check_grads_finite(&self) -> Result<(), TensorError> {
        for p in &self.params {
            if !p.grad.iter().all(|g| g.is_finite()) {
                return Err(TensorError::NonFinite { op: "gradient" });
            }
        }
        Ok(())
    }
}

const CONTAINER_VERSION: u32 = 1;
