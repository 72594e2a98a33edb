use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One named model parameter. Non-trainable entries hold batch-norm running
/// statistics: they are carried, checkpointed and averaged like weights but
/// never receive gradient updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

/// Ordered, named parameter tensors of one model instance plus the
/// fingerprint of the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    fingerprint: String,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        ParamSet {
            entries: Vec::new(),
            fingerprint: fingerprint.into(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(self.entries.len() - 1)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn entry(&self, idx: usize) -> &ParamEntry<S> {
        &self.entries[idx]
    }

    #[inline]
    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry<S> {
        &mut self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Zero tensors shaped like every entry; the standard gradient buffer.
    pub fn zeros_like(&self) -> Vec<Tensor<S>> {
        self.entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect()
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Concatenates all trainable tensors into one f64 vector.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_trainable_scalars());
        for e in &self.entries {
            if e.trainable {
                out.extend(e.tensor.data().iter().map(|v| v.to_f64()));
            }
        }
        out
    }

    /// Writes a flat vector produced by `flatten_trainable` back into the
    /// trainable tensors.
    pub fn set_trainable_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_trainable_scalars() {
            return Err(Error::ShapeMismatch {
                context: "set_trainable_from_flat".into(),
                expected: vec![self.n_trainable_scalars()],
                got: vec![flat.len()],
            });
        }
        let mut off = 0;
        for e in self.entries.iter_mut() {
            if e.trainable {
                for v in e.tensor.data_mut() {
                    *v = S::from_f64(flat[off]);
                    off += 1;
                }
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn l2_distance(&self, other: &ParamSet<S>) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                let d = x.to_f64() - y.to_f64();
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// Global L2 norm over trainable tensors.
    pub fn trainable_l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| {
                e.tensor
                    .data()
                    .iter()
                    .map(|v| {
                        let x = v.to_f64();
                        x * x
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Content digest over names, shapes, flags and raw little-endian payload
    /// bytes. Two sets with equal digests are bitwise-identical.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([e.trainable as u8]);
            for d in e.tensor.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}
