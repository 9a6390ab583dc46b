use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered trainable tensors with accumulated gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Frozen copy of parameter values, in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    entries: Vec<(String, Tensor)>,
}

/// Graph leaves standing for a parameter set, in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every parameter as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self.entries.iter().map(|e| g.leaf(e.value.clone())).collect(),
        }
    }

    /// Adds the gradients of `binds` into the stored grads. Parameters
    /// without a path to the loss receive nothing.
    pub fn accumulate(&mut self, binds: &Bindings, grads: &Gradients) {
        for (e, &v) in self.entries.iter_mut().zip(&binds.vars) {
            if let Some(g) = grads.get(v) {
                e.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    /// Overwrites every value with the snapshot's. Grads are left alone.
    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        self.check_layout(snap)?;
        for (e, (_, v)) in self.entries.iter_mut().zip(&snap.entries) {
            e.value.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    pub(crate) fn check_layout(&self, snap: &ParamSnapshot) -> Result<()> {
        if self.entries.len() != snap.entries.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: store has {}, snapshot has {}",
                self.entries.len(),
                snap.entries.len()
            )));
        }
        for (e, (name, v)) in self.entries.iter().zip(&snap.entries) {
            if &e.name != name || e.value.shape() != v.shape() {
                return Err(Error::Contract(format!(
                    "parameter layout mismatch: `{}` {:?} vs `{}` {:?}",
                    e.name,
                    e.value.shape(),
                    name,
                    v.shape()
                )));
            }
        }
        Ok(())
    }
}

impl ParamSnapshot {
    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn bind(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect(),
        }
    }

    /// Binds the values as constants: no gradient is computed for them.
    pub fn bind_constant(&self, g: &mut Graph) -> Bindings {
        Bindings {
            vars: self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        s.insert("b", Tensor::vector(vec![0.5, -0.5])).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store();
        assert!(s.insert("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn snapshot_restore_is_bitwise_and_idempotent() {
        let mut s = store();
        let snap = s.snapshot();
        for e in s.entries_mut() {
            e.value.data_mut().iter_mut().for_each(|v| *v = v.sin() * 1e-3);
        }
        s.restore(&snap).unwrap();
        assert_eq!(s.snapshot(), snap);
        let once = s.clone();
        s.restore(&snap).unwrap();
        assert_eq!(s, once);
    }

    #[test]
    fn restore_onto_store_with_extra_param_fails() {
        let snap = store().snapshot();
        let mut s = store();
        s.insert("extra", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(s.restore(&snap), Err(Error::Contract(_))));
    }

    #[test]
    fn restore_with_shape_mismatch_fails() {
        let snap = store().snapshot();
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        s.insert("b", Tensor::zeros(&[2])).unwrap();
        assert!(s.restore(&snap).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut s = store();
        let mut g = Graph::new();
        let binds = s.bind(&mut g);
        let l = g.sum(binds.get(0));
        let grads = g.backward(l).unwrap();
        s.accumulate(&binds, &grads);
        assert_eq!(s.get("w").unwrap().grad, Tensor::ones(&[2, 2]));
        assert_eq!(s.get("b").unwrap().grad, Tensor::zeros(&[2]));
    }
}
