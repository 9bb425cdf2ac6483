//! Named parameter storage shared by the backbone, clustering modules, and
//! heads.
//!
//! Each tensor is initialized from a stream seeded by `global_seed ^
//! fnv1a(name)`, so a parameter's initial value depends only on its name and
//! the seed, never on registration order. Adding or removing hooks or heads
//! therefore leaves every other parameter's initialization untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::{Tape, Tensor, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
}

/// All trainable scalars of a model, addressed by stable names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    seed: u64,
}

pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { entries: Vec::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name: name.to_string(), value });
        ParamId(self.entries.len() - 1)
    }

    fn rng_for(&self, name: &str) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    /// Uniform(-b, b) with b = sqrt(1 / fan_in); the usual fan-in scaling.
    pub fn register_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        self.register(name, Tensor::new(shape, data).expect("finite init"))
    }

    pub fn register_const(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        self.register(name, Tensor::full(shape, value).expect("finite init"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exact count of trainable scalars across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Promote every parameter onto a tape as gradient-tracked leaves.
    pub fn bind_all(&self, tape: &mut Tape) -> TapeBinding {
        TapeBinding { refs: self.entries.iter().map(|e| tape.leaf(&e.value)).collect() }
    }

    /// Same, but as constants, for inference/eval passes that never call
    /// backward.
    pub fn bind_all_frozen(&self, tape: &mut Tape) -> TapeBinding {
        TapeBinding { refs: self.entries.iter().map(|e| tape.constant(&e.value)).collect() }
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

/// Per-tape handles of every parameter, indexed by [`ParamId`].
pub struct TapeBinding {
    refs: Vec<TensorRef>,
}

impl TapeBinding {
    pub fn get(&self, id: ParamId) -> TensorRef {
        self.refs[id.0]
    }

    /// Read per-parameter gradients off a tape after backward, in id order.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore) -> Vec<Vec<f64>> {
        self.refs
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                tape.grad(r)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; store.entries[i].value.numel()])
            })
            .collect()
    }
}
