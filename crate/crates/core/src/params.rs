//! Named parameter storage shared by every model component.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Graph, Real, Tensor, Var};

/// Which part of the model a parameter belongs to. Drives freeze plans and
/// is persisted in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Backbone,
    DomainAdapter,
    TaskAdapter,
    Decoder,
    Head,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Backbone,
        Role::DomainAdapter,
        Role::TaskAdapter,
        Role::Decoder,
        Role::Head,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Role::Backbone => 0,
            Role::DomainAdapter => 1,
            Role::TaskAdapter => 2,
            Role::Decoder => 3,
            Role::Head => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.tag() == tag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::DomainAdapter => "domain_adapter",
            Role::TaskAdapter => "task_adapter",
            Role::Decoder => "decoder",
            Role::Head => "head",
        }
    }
}

/// Initialization rule of a parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at ±2σ.
    TruncNormal {
        std: f64,
    },
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    KaimingNormal {
        fan_in: usize,
    },
}

/// Name, role, shape and initializer of one parameter, without storage.
/// Parameter audits work on specs alone so large geometries never allocate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, role: Role, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            role,
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn count_specs(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

fn sample_init<R: Rng + ?Sized>(init: Init, n: usize, rng: &mut R) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::TruncNormal { std } => {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v as f32;
                    }
                })
                .collect()
        }
        Init::XavierUniform { fan_in, fan_out } => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| u.sample(rng) as f32).collect()
        }
        Init::KaimingNormal { fan_in } => {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(rng) as f32).collect()
        }
    }
}

/// Allocates and initializes every spec in order, drawing from `rng`.
pub fn materialize<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for spec in specs {
        let data = sample_init(spec.init, spec.numel(), rng);
        store.insert(spec.name.clone(), spec.role, Tensor::from_vec(&spec.shape, data)?)?;
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub tensor: Tensor<T>,
    pub role: Role,
}

/// Insertion-ordered map from parameter name to tensor and role.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, Param<T>>,
}

/// Graph handles for every parameter of a store, by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: Role, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { tensor, role });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn role(&self, name: &str) -> Result<Role> {
        self.entries
            .get(name)
            .map(|p| p.role)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(&str, &Param<T>) -> bool) -> usize {
        self.iter()
            .filter(|(n, p)| pred(n, p))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.numel_where(|_, p| p.tensor.requires_grad())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.tensor.requires_grad())
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.role, p.tensor)?;
        }
        Ok(())
    }

    pub fn retain(&mut self, keep: impl Fn(&str, &Param<T>) -> bool) {
        self.entries.retain(|k, v| keep(k, v));
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.tensor.set_requires_grad(trainable);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            role: p.role,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), g.input(&p.tensor)))
            .collect();
        Bound { vars }
    }

    /// Adds `scale · grad` into each trainable tensor's gradient buffer.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients<T>, scale: T) {
        for (name, p) in self.entries.iter_mut() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(g) = bound.vars.get(name).and_then(|&v| grads.get(v)) else {
                continue;
            };
            let mut buf = p
                .tensor
                .grad()
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); g.len()]);
            buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v * scale);
            p.tensor.set_grad(Some(buf)).expect("gradient has the tensor's length");
        }
    }

    /// Names whose tensors differ bitwise between `self` and `other`
    /// (including names present in only one of them).
    pub fn changed_names(&self, other: &ParamStore<T>) -> Vec<String> {
        let mut changed: Vec<String> = self
            .iter()
            .filter(|(n, p)| match other.entries.get(*n) {
                Some(q) => !p.tensor.bit_eq(&q.tensor),
                None => true,
            })
            .map(|(n, _)| n.to_string())
            .collect();
        changed.extend(other.names().filter(|n| !self.contains(n)).map(str::to_string));
        changed
    }
}
