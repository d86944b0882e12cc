//! Named parameter storage and the evaluation context that binds parameters
//! onto a tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::numkit::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (fixed permutations, signs) are stored but never updated.
    pub trainable: bool,
}

/// Ordered registry of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        value.check_finite("param")?;
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: e.name.clone(),
                expected: e.value.shape(),
                found: value.shape(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.data().len())
            .sum()
    }
}

/// A tape plus lazily bound parameter leaves.
///
/// With `track` set, trainable parameters become differentiable leaves and
/// [`Ctx::param_grads`] maps adjoints back to [`ParamId`]s.
pub struct Ctx<'p> {
    tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Ctx<'p> {
    pub fn new(params: &'p ParamStore, track: bool) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track,
        }
    }

    /// Evaluation-only context.
    pub fn eval(params: &'p ParamStore) -> Self {
        Self::new(params, false)
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let e = self.params.entry(id);
        let v = if self.track && e.trainable {
            self.tape.variable(e.value.clone())?
        } else {
            self.tape.constant(e.value.clone())?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    /// Adjoint of `root` with respect to every bound trainable parameter.
    pub fn param_grads(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads = self.tape.backward(root)?;
        Ok(self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect())
    }
}

impl Deref for Ctx<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Shape;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new();
        p.add("a", Tensor::zeros(Shape::SCALAR), true).unwrap();
        assert!(p.add("a", Tensor::zeros(Shape::SCALAR), true).is_err());
    }

    #[test]
    fn grads_map_back_to_ids() {
        let mut p = ParamStore::new();
        let a = p.add("a", Tensor::scalar(2.0), true).unwrap();
        let b = p.add("b", Tensor::scalar(5.0), false).unwrap();
        let mut ctx = Ctx::new(&p, true);
        let va = ctx.param(a).unwrap();
        let vb = ctx.param(b).unwrap();
        let y = ctx.mul(va, vb).unwrap();
        let g = ctx.param_grads(y).unwrap();
        assert_eq!(g[a.0].as_ref().unwrap().item(), 5.0);
        assert!(g[b.0].is_none());
    }
}
