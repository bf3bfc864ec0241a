//! Named, shaped parameter collection with gradient buffers.
//!
//! Entry order is fixed at construction and defines the layout of
//! checkpoints and optimizer state, so iteration is always deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::config::ModelConfig;
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in +-sqrt(3 / fan_in).
    XavierUniform {
        fan_in: usize,
    },
    /// Zero-mean Gaussian.
    Gaussian {
        std: f64,
    },
    Zero,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec { name: name.into(), rows, cols, init }
    }
}

#[derive(Clone, Debug)]
struct ParamEntry<R: Real> {
    name: String,
    value: Tensor<R>,
    grad: Vec<R>,
    grad_seen: bool,
}

#[derive(Clone, Debug)]
pub struct ParameterStore<R: Real> {
    entries: Vec<ParamEntry<R>>,
}

impl<R: Real> ParameterStore<R> {
    pub fn empty() -> Self {
        ParameterStore { entries: Vec::new() }
    }

    /// Build and randomly initialize from specs; draw order is the spec
    /// order, so a seed fully determines the result.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::empty();
        for spec in specs {
            let n = spec.rows * spec.cols;
            let data: Vec<R> = match spec.init {
                Init::XavierUniform { fan_in } => {
                    let limit = (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| R::from_f64(rng.random_range(-limit..limit))).collect()
                }
                Init::Gaussian { std } => {
                    let normal = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| R::from_f64(normal.sample(&mut rng))).collect()
                }
                Init::Zero => vec![R::zero(); n],
            };
            store.add(&spec.name, Tensor::new(spec.rows, spec.cols, data));
        }
        store
    }

    pub fn add(&mut self, name: &str, value: Tensor<R>) {
        assert!(self.index_of(name).is_none(), "duplicate parameter name {name:?}");
        let grad = vec![R::zero(); value.numel()];
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, grad_seen: false });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> &Tensor<R> {
        let idx = self.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.entries[idx].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn value(&self, idx: usize) -> &Tensor<R> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<R> {
        &mut self.entries[idx].value
    }

    pub fn grad(&self, idx: usize) -> &[R] {
        &self.entries[idx].grad
    }

    pub fn grad_seen(&self, idx: usize) -> bool {
        self.entries[idx].grad_seen
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = R::zero());
            e.grad_seen = false;
        }
    }

    pub fn accumulate_grad(&mut self, idx: usize, delta: &[R]) {
        let e = &mut self.entries[idx];
        assert_eq!(delta.len(), e.grad.len(), "gradient length mismatch for {}", e.name);
        for (g, &d) in e.grad.iter_mut().zip(delta) {
            *g += d;
        }
        e.grad_seen = true;
    }
}

/// Tape leaf ids for every store entry, in store order.
pub struct StoreBinding {
    ids: Vec<NodeId>,
}

impl StoreBinding {
    /// Register every parameter as a trainable tape leaf.
    pub fn bind<R: Real>(tape: &mut Tape<R>, store: &ParameterStore<R>) -> Self {
        let ids = store.entries.iter().map(|e| tape.param(&e.value)).collect();
        StoreBinding { ids }
    }

    pub fn id<R: Real>(&self, store: &ParameterStore<R>, name: &str) -> NodeId {
        let idx = store.index_of(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        self.ids[idx]
    }

    /// Add the tape's gradients into the store buffers (post-backward).
    pub fn harvest<R: Real>(&self, tape: &Tape<R>, store: &mut ParameterStore<R>) {
        for (idx, &id) in self.ids.iter().enumerate() {
            if let Some(g) = tape.grad(id) {
                store.accumulate_grad(idx, g);
            }
        }
    }

    /// Gradients per entry without touching a store (thread workers).
    pub fn collect<R: Real>(&self, tape: &Tape<R>) -> Vec<Option<Vec<R>>> {
        self.ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect()
    }
}

/// Specs for the complete model: embedding, interaction blocks, head.
pub fn model_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = crate::encoder::param_specs(cfg);
    specs.extend(crate::head::param_specs(cfg));
    specs
}

/// Fresh randomly initialized parameters for the full model.
pub fn init_model_params<R: Real>(cfg: &ModelConfig, seed: u64) -> ParameterStore<R> {
    ParameterStore::init(&model_specs(cfg), seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg =
            ModelConfig { features: 8, blocks: 2, bins: 16, filter_rbf: 12, ..Default::default() };
        let a: ParameterStore<f32> = init_model_params(&cfg, 7);
        let b: ParameterStore<f32> = init_model_params(&cfg, 7);
        let c: ParameterStore<f32> = init_model_params(&cfg, 8);
        assert_eq!(a.len(), b.len());
        let mut any_diff = false;
        for i in 0..a.len() {
            assert_eq!(a.value(i).data(), b.value(i).data());
            if a.value(i).data() != c.value(i).data() {
                any_diff = true;
            }
        }
        assert!(any_diff, "different seeds should give different parameters");
    }

    #[test]
    fn grad_accumulation_and_zeroing() {
        let mut store: ParameterStore<f64> = ParameterStore::empty();
        store.add("w", Tensor::from_f64(1, 3, &[1.0, 2.0, 3.0]));
        store.accumulate_grad(0, &[0.5, 0.5, 0.5]);
        store.accumulate_grad(0, &[1.0, 0.0, -0.5]);
        assert_eq!(store.grad(0), &[1.5, 0.5, 0.0]);
        assert!(store.grad_seen(0));
        store.zero_grads();
        assert_eq!(store.grad(0), &[0.0, 0.0, 0.0]);
        assert!(!store.grad_seen(0));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut store: ParameterStore<f32> = ParameterStore::empty();
        store.add("w", Tensor::zeros(1, 1));
        store.add("w", Tensor::zeros(1, 1));
    }
}
