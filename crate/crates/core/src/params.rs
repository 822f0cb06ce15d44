//! Named trainable tensors.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use crate::tensor::Tensor;

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor in one particular [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u32,
    idx: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.idx
    }

    pub fn store(self) -> u32 {
        self.store
    }
}

/// Named tensors. Each store has a process-unique tag so that gradients
/// from several stores can share one tape.
#[derive(Clone, Debug)]
pub struct ParamStore {
    uid: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn uid(&self) -> u32 {
        self.uid
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid && id.idx < self.tensors.len()
    }

    fn pid(&self, idx: usize) -> ParamId {
        ParamId {
            store: self.uid,
            idx,
        }
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        self.pid(id)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shape `fan_in x fan_out`.
    pub fn glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let t = glorot_tensor(fan_in, fan_out, rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.add(name, Tensor::vector(vec![0.0; n]))
    }

    pub fn ones(&mut self, name: impl Into<String>, n: usize) -> ParamId {
        self.add(name, Tensor::vector(vec![1.0; n]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        assert_eq!(id.store, self.uid, "parameter from another store");
        &self.tensors[id.idx]
    }

    /// Replaces a tensor; the shape must not change.
    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(id.store, self.uid, "parameter from another store");
        assert_eq!(
            self.tensors[id.idx].shape(),
            t.shape(),
            "shape change for {}",
            self.names[id.idx]
        );
        self.tensors[id.idx] = t;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| self.pid(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.idx]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(|i| self.pid(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

pub fn glorot_tensor<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}
