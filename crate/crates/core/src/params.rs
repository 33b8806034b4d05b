//! Named parameter registry and tape binding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchNormCfg, Mode};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered registry; iteration order is creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, kind, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.iter().filter(|(_, p)| p.kind.trainable())
    }

    /// Two distinct entries borrowed mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor<T>, &mut Tensor<T>) {
        assert_ne!(a, b, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (lo, hi) = self.params.split_at_mut(b.0);
            (&mut lo[a.0].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.params.split_at_mut(a.0);
            (&mut hi[0].value, &mut lo[b.0].value)
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), kind: p.kind, value: p.value.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Per-parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Which tape leaf each parameter was bound to during one forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }

    /// Moves the accumulated leaf gradients off the tape.
    pub fn gradients<T: Float>(&self, tape: &mut Tape<T>) -> Gradients<T> {
        Gradients { slots: self.vars.iter().map(|v| v.and_then(|v| tape.take_grad(v))).collect() }
    }
}

enum StoreRef<'a, T> {
    Shared(&'a ParamStore<T>),
    Exclusive(&'a mut ParamStore<T>),
}

/// State threaded through a model's forward pass.
pub struct Ctx<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    store: StoreRef<'a, T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    pub bn: BatchNormCfg,
}

impl<'a, T: Float> Ctx<'a, T> {
    /// Training context; batch-norm running statistics are updated in place.
    pub fn train(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, bn: BatchNormCfg) -> Self {
        let n = store.len();
        Ctx { tape, store: StoreRef::Exclusive(store), vars: vec![None; n], mode: Mode::Train, bn }
    }

    pub fn infer(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, bn: BatchNormCfg) -> Self {
        let n = store.len();
        Ctx { tape, store: StoreRef::Shared(store), vars: vec![None; n], mode: Mode::Infer, bn }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn store(&self) -> &ParamStore<T> {
        match &self.store {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }

    /// Leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store().get(id);
        let value = p.value.clone();
        let requires_grad = self.mode == Mode::Train && p.kind.trainable();
        let v = self.tape.leaf(value, requires_grad);
        self.vars[id.0] = Some(v);
        v
    }

    /// Runs `f` with the running mean/var of a batch-norm layer. In infer
    /// mode `f` sees a scratch copy.
    pub fn with_running<R>(
        &mut self,
        mean: ParamId,
        var: ParamId,
        f: impl FnOnce(&mut Tape<T>, &mut [T], &mut [T]) -> R,
    ) -> R {
        match &mut self.store {
            StoreRef::Exclusive(store) => {
                let (m, v) = store.pair_mut(mean, var);
                f(&mut *self.tape, m.data_mut(), v.data_mut())
            }
            StoreRef::Shared(store) => {
                let mut m = store.value(mean).data().to_vec();
                let mut v = store.value(var).data().to_vec();
                f(&mut *self.tape, &mut m, &mut v)
            }
        }
    }

    pub fn into_bindings(self) -> Bindings {
        Bindings { vars: self.vars }
    }
}
