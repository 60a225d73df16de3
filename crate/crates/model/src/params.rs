//! Parameter registry and initialization.
//!
//! Every layer registers its tensors here at construction time with a unique
//! dotted name and a frozen flag. The registry is the single source of truth
//! for the optimizer (trainable entries), checkpoints (all entries) and the
//! freeze contract tests.

use emstack_tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub frozen: bool,
}

#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        name: impl Into<String>,
        value: Tensor<T>,
        frozen: bool,
    ) -> Var {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        // Frozen tensors never receive gradients.
        let var = tape.leaf(value, !frozen);
        self.entries.push(ParamEntry { name, var, frozen });
        var
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| !e.frozen)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.frozen)
    }

    pub fn count_scalars<T: Scalar>(&self, tape: &Tape<T>, frozen: Option<bool>) -> usize {
        self.entries
            .iter()
            .filter(|e| frozen.map_or(true, |f| e.frozen == f))
            .map(|e| tape.data(e.var).numel())
            .sum()
    }

    /// Entries whose dotted name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamEntry> {
        self.entries.iter().filter(move |e| e.name.starts_with(prefix))
    }
}

/// Uniform Kaiming-style init in ±1/√fan_in.
pub fn init_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Zero-mean Gaussian init.
pub fn init_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("normal params");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}
