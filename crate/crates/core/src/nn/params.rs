use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named tensors in a fixed order; gradients are aligned by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<S>, trainable: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    #[inline]
    pub fn value(&self, idx: usize) -> &[S] {
        self.params[idx].value.data()
    }

    #[inline]
    pub fn value_mut(&mut self, idx: usize) -> &mut [S] {
        self.params[idx].value.data_mut()
    }

    pub fn get(&self, idx: usize) -> &Param<S> {
        &self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        Grads(self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Copies values from `other`, which must have the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<S>) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamSet<S>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} vs {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamSet`]; buffer slots stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S>(pub Vec<Tensor<S>>);

impl<S: Scalar> Grads<S> {
    #[inline]
    pub fn set(&mut self, idx: usize, values: Vec<S>) {
        let t = &mut self.0[idx];
        debug_assert_eq!(t.len(), values.len());
        t.data_mut().copy_from_slice(&values);
    }

    pub fn get(&self, idx: usize) -> &[S] {
        self.0[idx].data()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|t| t.all_finite())
    }
}
