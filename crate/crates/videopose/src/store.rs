//! Named parameter storage and the ADAM optimizer.
//!
//! A `ParameterStore` owns every trainable tensor of one network along with
//! its ADAM moment buffers. Stores are mounted onto a fresh tape each step;
//! after backward, gradients are gathered in registration order and applied
//! here. Exactly one trainer owns a store at a time — nothing is shared.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Gradients for a store, one per parameter, in registration order.
pub type ParamGrads = Vec<Tensor>;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("missing gradient for registered parameter `{name}`")]
    MissingGradient { name: String },
    #[error("gradient shape {grad:?} does not match parameter `{name}` {param:?}")]
    GradShape { name: String, grad: Vec<usize>, param: Vec<usize> },
    #[error("expected {expected} gradients, got {actual}")]
    GradCount { expected: usize, actual: usize },
}

struct Param {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

static STORE_COUNTER: AtomicU64 = AtomicU64::new(1);

pub struct ParameterStore {
    uid: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    adam_t: u64,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            uid: STORE_COUNTER.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
            adam_t: 0,
        }
    }

    /// Identity used to key tape bindings; unique per store instance.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of ADAM steps applied so far.
    pub fn adam_t(&self) -> u64 {
        self.adam_t
    }

    /// Register a tensor under a unique name, returning its id.
    pub fn register(&mut self, name: &str, value: Tensor) -> usize {
        assert!(
            !self.index.contains_key(name),
            "parameter name `{name}` registered twice in one store"
        );
        let pid = self.params.len();
        self.index.insert(name.to_string(), pid);
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        pid
    }

    pub fn value(&self, pid: usize) -> &Tensor {
        &self.params[pid].value
    }

    pub fn value_mut(&mut self, pid: usize) -> &mut Tensor {
        &mut self.params[pid].value
    }

    pub fn name(&self, pid: usize) -> &str {
        &self.params[pid].name
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Flat snapshot of all parameter values, registration order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Serialize values, moments, and step counter as named records.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut recs = Vec::with_capacity(self.params.len() * 3 + 1);
        recs.push(("adam.t".to_string(), Tensor::scalar(self.adam_t as f64)));
        for p in &self.params {
            recs.push((p.name.clone(), p.value.clone()));
            recs.push((format!("{}.adam_m", p.name), p.m.clone()));
            recs.push((format!("{}.adam_v", p.name), p.v.clone()));
        }
        recs
    }

    /// Restore values, moments, and step counter from records produced by
    /// `to_records`. The store must already contain the same parameter set
    /// (construct the model first, then load).
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<(), RecordError> {
        let by_name: HashMap<&str, &Tensor> =
            records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let t = by_name
            .get("adam.t")
            .ok_or_else(|| RecordError::Missing { name: "adam.t".into() })?;
        self.adam_t = t.item() as u64;
        for pid in 0..self.params.len() {
            let name = self.params[pid].name.clone();
            for (suffix, field) in [("", 0usize), (".adam_m", 1), (".adam_v", 2)] {
                let key = format!("{name}{suffix}");
                let rec = *by_name
                    .get(key.as_str())
                    .ok_or_else(|| RecordError::Missing { name: key.clone() })?;
                let slot = match field {
                    0 => &mut self.params[pid].value,
                    1 => &mut self.params[pid].m,
                    _ => &mut self.params[pid].v,
                };
                if rec.shape() != slot.shape() {
                    return Err(RecordError::Shape {
                        name: key,
                        expected: slot.shape().to_vec(),
                        actual: rec.shape().to_vec(),
                    });
                }
                *slot = (*rec).clone();
            }
        }
        Ok(())
    }
}

/// One ADAM update over every parameter of the store. Gradients must arrive
/// in registration order — `Tape::param_grads` produces exactly that — and a
/// missing or misshapen gradient is an error rather than a silent skip.
pub fn adam_step(store: &mut ParameterStore, grads: &ParamGrads, lr: f64) -> Result<(), OptimError> {
    if grads.len() != store.params.len() {
        return Err(OptimError::GradCount { expected: store.params.len(), actual: grads.len() });
    }
    for (p, g) in store.params.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(OptimError::GradShape {
                name: p.name.clone(),
                grad: g.shape().to_vec(),
                param: p.value.shape().to_vec(),
            });
        }
    }
    store.adam_t += 1;
    let t = store.adam_t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (p, g) in store.params.iter_mut().zip(grads) {
        let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
        for ((mi, vi), (wi, &gi)) in m.iter_mut().zip(v.iter_mut()).zip(w.iter_mut().zip(g.data()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ── Binary record format ─────────────────────────────────────────────────────
//
// A record is (name, shape, raw little-endian f64 values):
//   u32 name length, name bytes, u32 rank, u64 per dimension, f64 per element.
// Files carrying records start with an 8-byte magic and a version byte.

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: [u8; 8] },
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("record `{name}` missing")]
    Missing { name: String },
    #[error("record `{name}` has shape {actual:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("malformed record data: {0}")]
    Malformed(String),
}

pub fn write_record<W: std::io::Write>(
    w: &mut W,
    name: &str,
    t: &Tensor,
) -> Result<(), RecordError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_record<R: std::io::Read>(r: &mut R) -> Result<(String, Tensor), RecordError> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 20 {
        return Err(RecordError::Malformed(format!("name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| RecordError::Malformed(e.to_string()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(RecordError::Malformed(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0.0; numel];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok((name.clone(), Tensor::new(shape, data).map_err(|e| RecordError::Malformed(e.to_string()))?))
}

pub fn read_u32<R: std::io::Read>(r: &mut R) -> Result<u32, RecordError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: std::io::Read>(r: &mut R) -> Result<u64, RecordError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
