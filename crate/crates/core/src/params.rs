//! Named parameters, their deterministic initialization, and the per-pass
//! binding of stored tensors to graph leaves.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal { std: f64 },
    /// Convolution weight `[C, C, k, k]` whose center tap is the identity, plus truncated normal noise.
    IdentityConv { std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Trainable,
    /// Running statistics; saved with the model but not optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub role: Role,
}

/// Declarations collected while a model is assembled.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> String {
        let name = name.into();
        self.specs.push(ParamSpec { name: name.clone(), shape: shape.to_vec(), init, role: Role::Trainable });
        name
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> String {
        let name = name.into();
        self.specs.push(ParamSpec { name: name.clone(), shape: shape.to_vec(), init, role: Role::Buffer });
        name
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.role == Role::Trainable)
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.specs {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate parameter name `{}`", s.name)));
            }
        }
        Ok(())
    }

    /// Initialize every declared tensor. Each tensor draws from its own stream
    /// keyed by `(seed, name)`, so adding or removing a submodule leaves every
    /// other tensor bit-identical.
    pub fn init<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>> {
        self.validate()?;
        let mut store = ParameterStore::default();
        for spec in &self.specs {
            let t = init_tensor::<T>(&spec.shape, spec.init, seed ^ fnv1a(spec.name.as_bytes()))?;
            match spec.role {
                Role::Trainable => store.params.insert(spec.name.clone(), t),
                Role::Buffer => store.buffers.insert(spec.name.clone(), t),
            };
        }
        Ok(store)
    }
}

/// 64-bit FNV-1a; checkpoint trailers and parameter checksums use it.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> Result<f64> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return Ok(v);
        }
    }
}

fn init_tensor<T: Real>(shape: &[usize], init: Init, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::TruncNormal { std } => {
            (0..n).map(|_| trunc_normal(&mut rng, std).map(T::c)).collect::<Result<_>>()?
        }
        Init::IdentityConv { std } => {
            let (co, ci, kh, kw) = match shape {
                [a, b, c, d] => (*a, *b, *c, *d),
                _ => return Err(Error::Config(format!("identity init needs a 4-d shape, got {shape:?}"))),
            };
            let mut d: Vec<T> =
                (0..n).map(|_| trunc_normal(&mut rng, std).map(T::c)).collect::<Result<_>>()?;
            for c in 0..co.min(ci) {
                d[((c * ci + c) * kh + kh / 2) * kw + kw / 2] += T::one();
            }
            d
        }
    };
    Tensor::new(shape, data)
}

/// Trainable parameters and buffers, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for ParameterStore<T> {
    fn default() -> Self {
        Self { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// FNV-1a over names, shapes, and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (kind, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map {
                bytes.extend_from_slice(kind.as_bytes());
                bytes.extend_from_slice(name.as_bytes());
                for &d in t.shape() {
                    bytes.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    bytes.extend_from_slice(&v.f64().to_bits().to_le_bytes());
                }
            }
        }
        fnv1a(&bytes)
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Verify that every declared tensor exists with the declared shape.
    pub fn check_against(&self, registry: &ParamRegistry) -> Result<()> {
        for spec in registry.specs() {
            let t = match spec.role {
                Role::Trainable => self.params.get(&spec.name),
                Role::Buffer => self.buffers.get(&spec.name),
            }
            .ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        let declared = registry.specs().len();
        let stored = self.params.len() + self.buffers.len();
        if declared != stored {
            return Err(Error::Config(format!(
                "store holds {stored} tensors but the model declares {declared}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// One forward pass: the graph plus the binding of stored parameters to leaves.
pub struct Ctx<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s ParameterStore<T>,
    bound: HashMap<String, Var>,
    order: Vec<String>,
    pub mode: Mode,
    /// `(buffer name, new value)` updates produced by batch-statistics layers.
    pub buffer_updates: Vec<(String, Tensor<T>)>,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParameterStore<T>, mode: Mode, record: bool) -> Self {
        Self {
            graph: if record { Graph::new() } else { Graph::inference() },
            store,
            bound: HashMap::new(),
            order: Vec::new(),
            mode,
            buffer_updates: Vec::new(),
            dropout_seed: 0,
            dropout_calls: 0,
        }
    }

    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = seed;
        self
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    /// Leaf for a stored parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.graph.leaf(t);
        self.bound.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor<T>> {
        self.store.buffer(name)
    }

    pub fn next_dropout_seed(&mut self) -> u64 {
        self.dropout_calls += 1;
        self.dropout_seed ^ fnv1a(&self.dropout_calls.to_le_bytes())
    }

    pub fn bound_var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Gradients of all parameters touched by the pass (zeros where unreached).
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.order
            .iter()
            .map(|name| {
                let v = self.bound[name];
                let g = self
                    .graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Run `f` once in evaluation mode without recording gradients and return the value it produces.
pub fn evaluate<T, F>(store: &ParameterStore<T>, f: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnOnce(&mut Ctx<'_, T>) -> Result<Var>,
{
    let mut cx = Ctx::new(store, Mode::Eval, false);
    let out = f(&mut cx)?;
    Ok(cx.graph.take_value(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_name_keyed() {
        let mut a = ParamRegistry::new();
        a.param("x.weight", &[4, 3], Init::TruncNormal { std: 0.02 });
        a.param("y.weight", &[2], Init::TruncNormal { std: 0.02 });
        let mut b = ParamRegistry::new();
        b.param("y.weight", &[2], Init::TruncNormal { std: 0.02 });
        let sa: ParameterStore<f32> = a.init(7).unwrap();
        let sb: ParameterStore<f32> = b.init(7).unwrap();
        assert_eq!(sa.get("y.weight").unwrap(), sb.get("y.weight").unwrap());
        assert_eq!(sa.checksum(), a.init::<f32>(7).unwrap().checksum());
        assert_ne!(sa.checksum(), a.init::<f32>(8).unwrap().checksum());
        for &v in sa.get("x.weight").unwrap().data() {
            assert!(v.abs() <= 0.04);
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut r = ParamRegistry::new();
        r.param("a", &[1], Init::Zeros);
        r.param("a", &[1], Init::Zeros);
        assert!(r.init::<f32>(0).is_err());
    }

    #[test]
    fn identity_conv_has_unit_center_tap() {
        let mut r = ParamRegistry::new();
        r.param("w", &[2, 2, 3, 3], Init::IdentityConv { std: 0.0 });
        let s: ParameterStore<f64> = r.init(0).unwrap();
        let w = s.get("w").unwrap();
        let at = |o: usize, i: usize, y: usize, x: usize| w.data()[((o * 2 + i) * 3 + y) * 3 + x];
        assert_eq!(at(0, 0, 1, 1), 1.0);
        assert_eq!(at(1, 1, 1, 1), 1.0);
        assert_eq!(at(0, 1, 1, 1), 0.0);
        assert_eq!(w.sum(), 2.0);
    }
}
