use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};

/// A named trainable tensor. Frozen params are bound as constants, so they
/// never receive a gradient and the optimizer skips them.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor5<T>,
    pub frozen: bool,
    pub grad: Option<Tensor5<T>>,
}

/// Ordered collection of uniquely named params.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Appends a param and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor5<T>) -> Result<usize> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param {
            name,
            value,
            frozen: false,
            grad: None,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn value(&self, index: usize) -> &Tensor5<T> {
        &self.params[index].value
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for p in &mut self.params {
            p.frozen = frozen;
            p.grad = None;
        }
    }

    /// Records every param on the tape, in order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !p.frozen))
            .collect()
    }

    /// Adds this step's gradients into `Param::grad` for every non-frozen param.
    pub fn collect_grads(&mut self, bound: &[Var], grads: &Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            if p.frozen {
                continue;
            }
            if let Some(g) = grads.get(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    frozen: p.frozen,
                    grad: None,
                })
                .collect(),
        }
    }

    /// Replaces values by name; shapes must match exactly.
    pub fn load_values(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<Tensor5<T>>,
    ) -> Result<()> {
        for p in &mut self.params {
            let v = lookup(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: stored {} vs model {}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }
}
