use std::collections::BTreeMap;

use super::Tensor;
use crate::{Error, Result};

use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

/// Handle into a [`ParamStore`]. Handles of different stores never compare
/// equal; a clone of a store accepts the handles of its original.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors of one model, in creation order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn handle(&self, index: usize) -> ParamId {
        ParamId {
            store: self.uid,
            index,
        }
    }

    fn index(&self, id: ParamId) -> usize {
        assert_eq!(
            id.store, self.uid,
            "parameter handle used with a different store"
        );
        id.index
    }

    /// Whether `id` was issued by this store (or the one it was cloned from).
    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid && id.index < self.params.len()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
        });
        self.handle(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[self.index(id)]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        let i = self.index(id);
        &mut self.params[i]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| self.handle(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (self.handle(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Marks every parameter frozen or trainable.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Sets trainability for every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values for every name present in both stores with matching
    /// shapes. Returns the names that were copied.
    pub fn load_matching(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(t) = tensors.get(&p.name) {
                if t.shape() != p.value.shape() {
                    return Err(Error::shape(
                        "load_matching",
                        format!("{}: {:?} vs {:?}", p.name, t.shape(), p.value.shape()),
                    ));
                }
                p.value = t.clone();
                copied.push(p.name.clone());
            }
        }
        Ok(copied)
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Flattened values of the trainable parameters, in store order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_trainable_grad(&self) -> Vec<f64> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_trainable(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }
}
