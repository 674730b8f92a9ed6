use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Ordered, named collection of parameter tensors.
///
/// Tensors are `Arc`-shared so binding them into a graph is free and
/// inference threads can read them concurrently. Mutation (optimizer steps,
/// gradient accumulation) requires that no graph still holds them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Element> {
    entries: Vec<(String, Arc<Tensor<T>>)>,
}

/// Graph handles for every parameter of a [`ParamSet`], same order.
pub struct BoundParams<'g, T: Element> {
    graph: &'g Graph<T>,
    vars: Vec<(String, Var<'g, T>)>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), Arc::new(tensor)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    /// Mutable access; clones a tensor only if a graph still shares it.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .map(|(n, t)| (n.as_str(), Arc::make_mut(t)))
    }

    /// Total learnable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for (_, t) in self.iter_mut() {
            let owned = std::mem::replace(t, Tensor::scalar(T::zero()));
            *t = owned.with_requires_grad(requires_grad);
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.iter_mut() {
            t.zero_grad();
        }
    }

    /// Adds gradients (as returned by [`BoundParams::grads`]) into each
    /// parameter's gradient slot.
    pub fn accumulate_grads(&mut self, grads: Vec<Option<Tensor<T>>>) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "expected {} gradients, got {}",
                self.entries.len(),
                grads.len()
            )));
        }
        for ((_, t), g) in self.iter_mut().zip(grads) {
            if let Some(g) = g {
                t.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }

    /// Registers every parameter as a leaf of `graph`, differentiable iff the
    /// tensor requires grad.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        BoundParams {
            graph,
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), graph.leaf(t.clone())))
                .collect(),
        }
    }

    /// Like [`ParamSet::bind`] but never differentiable; used for inference.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> BoundParams<'g, T> {
        BoundParams {
            graph,
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), graph.constant_shared(t.clone())))
                .collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Arc::new(t.cast())))
                .collect(),
        }
    }

    /// Replaces every value with the tensor `source` returns for its name;
    /// all names must resolve with matching shapes.
    pub fn load_from<'a, U: Element>(
        &mut self,
        source: impl Fn(&str) -> Option<&'a Tensor<U>>,
    ) -> Result<()> {
        for (name, t) in self.iter_mut() {
            let src = source(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load parameter", t.shape(), src.shape()));
            }
            let requires_grad = t.requires_grad();
            *t = src.cast::<T>().with_requires_grad(requires_grad);
        }
        Ok(())
    }
}

impl<'g, T: Element> BoundParams<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> + '_ {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Accumulated leaf gradients, in parameter order.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|(_, v)| self.graph.grad(*v)).collect()
    }
}
