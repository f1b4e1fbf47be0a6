use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named learnable tensors, each belonging to a group that can be frozen
/// as a unit.
///
/// A frozen group contributes non-differentiable leaves to a [`Graph`],
/// so it never receives a gradient and the optimizer never touches it.
///
/// [`Graph`]: crate::numerics::Graph
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    frozen: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: &str, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            group: group.to_owned(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) {
        if frozen {
            self.frozen.insert(group.to_owned());
        } else {
            self.frozen.remove(group);
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.params[id.0].group)
    }

    /// Freezes every group except the listed ones.
    pub fn train_only(&mut self, groups: &[&str]) {
        let all: BTreeSet<String> = self.params.iter().map(|p| p.group.clone()).collect();
        self.frozen = all
            .into_iter()
            .filter(|g| !groups.contains(&g.as_str()))
            .collect();
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(Error::Dimension(format!(
                "gradient for {} has {} values, expected {}",
                p.name,
                grad.len(),
                p.value.len()
            )));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => p.grad = Some(Tensor::from_parts(p.value.shape().to_vec(), grad.to_vec())),
        }
        Ok(())
    }

    /// FNV-1a over the exact bit patterns of every parameter in `group`.
    pub fn group_hash(&self, group: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
