use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamId, Result, Tensor, TensorError};

/// On-disk form of one parameter: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named trainable tensors. Ids are assigned in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn to_stored(&self) -> BTreeMap<String, StoredTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), StoredTensor { shape: t.shape().to_vec(), values: t.data().to_vec() }))
            .collect()
    }

    /// Overwrites every registered tensor from `stored`; names and shapes
    /// must match exactly.
    pub fn load_stored(&mut self, stored: &BTreeMap<String, StoredTensor>) -> Result<()> {
        if stored.len() != self.tensors.len() {
            return Err(TensorError::Contract(format!("checkpoint has {} parameters, model has {}", stored.len(), self.tensors.len())));
        }
        for (name, st) in stored {
            let id = self.id(name).ok_or_else(|| TensorError::Contract(format!("unknown parameter {name}")))?;
            if st.shape != self.tensors[id.0].shape() {
                return Err(TensorError::Shape {
                    op: "load",
                    detail: format!("{name}: {:?} vs {:?}", st.shape, self.tensors[id.0].shape()),
                });
            }
            self.tensors[id.0] = Tensor::new(st.shape.clone(), st.values.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_stored()).expect("tensors serialize")
    }

    pub fn load_json(&mut self, text: &str) -> Result<()> {
        let stored: BTreeMap<String, StoredTensor> =
            serde_json::from_str(text).map_err(|e| TensorError::Contract(format!("bad checkpoint: {e}")))?;
        self.load_stored(&stored)
    }

    /// SHA-256 over the exact bit patterns of the selected parameters.
    pub fn hash_of(&self, ids: impl IntoIterator<Item = ParamId>) -> String {
        let mut h = Sha256::new();
        for id in ids {
            h.update(self.names[id.0].as_bytes());
            for x in self.tensors[id.0].data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
