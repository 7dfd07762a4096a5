use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use super::{Array, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Named tensor owned by a model. `frozen` implies not `trainable`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Array<T>,
    pub trainable: bool,
    pub frozen: bool,
}

/// Parameters keyed by dot-separated name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Parameter<T>>,
}

pub type GradMap<T> = BTreeMap<String, Array<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value,
                trainable,
                frozen: !trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Array<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Marks every parameter as trainable iff its name starts with one of
    /// `prefixes`; all others become frozen.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in self.params.values_mut() {
            let t = prefixes.iter().any(|pre| p.name.starts_with(pre));
            p.trainable = t;
            p.frozen = !t;
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Parameter<T>> + 'a {
        self.iter().filter(move |p| p.name.starts_with(prefix))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            trainable: p.trainable,
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// A tape bound to a parameter store. Parameters become leaves on first use;
/// trainable ones require gradients, frozen ones never do.
pub struct Graph<'a, T: Scalar> {
    tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = self.tape.leaf(p.value.clone(), p.trainable && !p.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Gradients for every trainable parameter of the store, zero-filled for
    /// those the graph never touched. Frozen parameters are absent.
    pub fn param_grads(&self, loss: Var, seed: T) -> Result<GradMap<T>> {
        let mut grads = self.tape.backward_seeded(loss, seed)?;
        let mut out = GradMap::new();
        for p in self.store.iter().filter(|p| p.trainable && !p.frozen) {
            let g = self
                .bound
                .get(&p.name)
                .and_then(|&v| grads.take(v))
                .unwrap_or_else(|| Array::zeros(p.value.shape()));
            out.insert(p.name.clone(), g);
        }
        Ok(out)
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }
}

impl<T: Scalar> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
