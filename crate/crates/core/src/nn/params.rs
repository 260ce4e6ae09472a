use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{NnError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to everything trainable except norm affine terms.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<f32>,
}

/// Named tensors of a model: trainable parameters and normalization buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Copy of the first `n` entries; their handles stay valid in the copy.
    pub fn truncated(&self, n: usize) -> ParamStore {
        let entries: Vec<ParamEntry> = self.entries[..n].to_vec();
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        ParamStore { entries, index }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Overwrites the value of `name` with a tensor of identical shape.
    pub fn assign(&mut self, name: &str, value: &Tensor<f32>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        let cur = self.get_mut(id);
        if cur.shape() != value.shape() {
            return Err(NnError::ShapeMismatch {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        cur.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// SHA-256 over names, shapes and bit patterns of entries whose name
    /// starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Gradients returned from one backward pass, keyed by parameter.
pub type ParamGrads = Vec<(ParamId, Vec<f32>)>;

/// Binds a [`ParamStore`] to one forward graph.
///
/// Parameters become graph leaves on first use. In train mode, batch norm
/// layers update the running statistics held in the store.
pub struct Ctx<'a> {
    pub g: &'a mut Graph<f32>,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    grad: bool,
}

impl<'a> Ctx<'a> {
    /// `train` selects batch statistics in batch norm; `grad` marks the
    /// store's trainable tensors as requiring gradients.
    pub fn new(g: &'a mut Graph<f32>, store: &'a mut ParamStore, train: bool, grad: bool) -> Self {
        let n = store.len();
        Self {
            g,
            store,
            bound: vec![None; n],
            train,
            grad,
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let rg = self.grad && e.kind.trainable();
        let v = self.g.leaf(e.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Parameters bound during the forward pass, with their graph nodes.
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

/// Pulls the gradient of every bound trainable parameter out of `g`.
/// Parameters the loss does not depend on are omitted.
pub fn collect_grads(g: &mut Graph<f32>, bindings: &[(ParamId, Var)]) -> ParamGrads {
    bindings
        .iter()
        .filter_map(|&(id, v)| g.take_grad(v).map(|gr| (id, gr)))
        .collect()
}
