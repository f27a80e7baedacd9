//! Named parameter tensors and the helpers blocks use to create and bind them.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Float = f32> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered map from dotted names (`glcm1.hab.esa.conv2.weight`) to tensors.
/// Iteration is in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T: Float = f32> {
    entries: BTreeMap<String, Parameter<T>>,
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("parameter store", format!("duplicate name {name}")));
        }
        self.entries.insert(
            name,
            Parameter {
                value,
                grad: None,
                trainable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count of trainable tensors.
    pub fn count_params(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Trainable element counts grouped by the first `depth` name segments.
    pub fn breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, p) in self.entries.iter().filter(|(_, p)| p.trainable) {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += p.value.len();
        }
        out
    }

    /// Marks every entry non-trainable and drops stored gradients.
    pub fn freeze(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
            p.grad = None;
        }
    }

    /// Moves gradients from a reverse pass into the trainable entries.
    /// Frozen entries never receive a gradient.
    pub fn absorb_grads(&mut self, grads: Gradients<T>) {
        let mut by_name = grads.into_params();
        for (name, p) in self.entries.iter_mut() {
            p.grad = if p.trainable { by_name.remove(name) } else { None };
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Copy with every tensor converted to another element type.
    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Adds all entries of `other`; names must not collide.
    pub fn merge(&mut self, other: ParameterStore<T>) -> Result<()> {
        for (name, p) in other.entries {
            self.insert(name, p.value, p.trainable)?;
        }
        Ok(())
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Binds store entries under a name prefix into a graph during a forward
/// pass.
pub struct Scope<'s, 'g, T: Float> {
    graph: &'g Graph<T>,
    store: &'s ParameterStore<T>,
    prefix: String,
}

impl<'s, 'g, T: Float> Scope<'s, 'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'s ParameterStore<T>) -> Self {
        Scope {
            graph,
            store,
            prefix: String::new(),
        }
    }

    pub fn child(&self, name: &str) -> Scope<'s, 'g, T> {
        Scope {
            graph: self.graph,
            store: self.store,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&self, name: &str) -> Result<Var<'g, T>> {
        let full = join(&self.prefix, name);
        let p = self
            .store
            .get(&full)
            .ok_or_else(|| Error::MissingTensor(full.clone()))?;
        Ok(self.graph.param(&full, &p.value, p.trainable))
    }

    /// Convolution `layer` (`layer.weight`, optional `layer.bias`).
    pub fn conv(&self, layer: &str, x: Var<'g, T>, spec: ConvSpec) -> Result<Var<'g, T>> {
        let w = self.param(&format!("{layer}.weight"))?;
        let bias_name = join(&self.prefix, &format!("{layer}.bias"));
        let b = if self.store.contains(&bias_name) {
            Some(self.param(&format!("{layer}.bias"))?)
        } else {
            None
        };
        x.conv2d(w, b, spec)
    }
}

/// Allocates parameters under a name prefix.
pub struct Init<'a, T: Float, R: Rng> {
    store: &'a mut ParameterStore<T>,
    rng: &'a mut R,
    prefix: String,
    trainable: bool,
}

impl<'a, T: Float, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParameterStore<T>, rng: &'a mut R) -> Self {
        Init {
            store,
            rng,
            prefix: String::new(),
            trainable: true,
        }
    }

    /// Entries created from this initializer are frozen.
    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn child(&mut self, name: &str) -> Init<'_, T, R> {
        Init {
            prefix: join(&self.prefix, name),
            store: self.store,
            rng: self.rng,
            trainable: self.trainable,
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.store.insert(join(&self.prefix, name), value, self.trainable)
    }

    /// Convolution weight `(cout, cin/groups, k, k)` drawn Kaiming-uniform
    /// over the fan-in, and a zero bias.
    pub fn conv(&mut self, layer: &str, cin: usize, cout: usize, k: usize, groups: usize) -> Result<()> {
        let fan_in = cin / groups * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::uniform([cout, cin / groups, k, k], -bound, bound, self.rng);
        self.tensor(&format!("{layer}.weight"), w)?;
        self.tensor(&format!("{layer}.bias"), Tensor::zeros([cout, 1, 1, 1]))
    }
}
