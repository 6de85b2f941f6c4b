use rand::Rng as _;

use super::layers;
use super::params::{Grads, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// A single affine classifier over frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<S: Scalar = f32> {
    params: ParamSet<S>,
    num_classes: usize,
    feature_dim: usize,
}

impl<S: Scalar> LinearHead<S> {
    pub fn new(num_classes: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 || feature_dim == 0 {
            return Err(Error::contract("a linear head needs >= 2 classes and a non-empty input"));
        }
        let mut r = rng::stream(seed, &[0x4EAD]);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let w = (0..num_classes * feature_dim)
            .map(|_| S::c(r.random_range(-bound..bound)))
            .collect();
        let mut params = ParamSet::new();
        params.push("weight", Tensor::from_vec(&[num_classes, feature_dim], w)?, true);
        params.push("bias", Tensor::zeros(&[num_classes]), true);
        Ok(LinearHead {
            params,
            num_classes,
            feature_dim,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn weight(&self) -> &Tensor<S> {
        &self.params.get(0).value
    }

    pub fn bias(&self) -> &Tensor<S> {
        &self.params.get(1).value
    }

    fn rows(&self, features: &Tensor<S>) -> Result<usize> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.feature_dim {
            return Err(Error::shape(format!(
                "head expects [N, {}] features, got {s:?}",
                self.feature_dim
            )));
        }
        Ok(s[0])
    }

    /// Pre-softmax activations `[N, num_classes]`.
    pub fn logits(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let n = self.rows(features)?;
        let y = layers::linear_forward(features.data(), self.params.value(0), self.params.value(1), n, self.feature_dim, self.num_classes);
        Tensor::from_vec(&[n, self.num_classes], y)
    }

    /// Mean cross-entropy, its parameter gradients, the gradient w.r.t. the
    /// features, and the count of correct arg-max predictions.
    pub fn cross_entropy(&self, features: &Tensor<S>, targets: &[usize]) -> Result<(f64, Grads<S>, Vec<S>, usize)> {
        let n = self.rows(features)?;
        if targets.len() != n {
            return Err(Error::shape(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= self.num_classes) {
            return Err(Error::contract(format!("target {t} outside {} classes", self.num_classes)));
        }
        let logits = self.logits(features)?;
        let (loss, dlogits, correct) = layers::softmax_cross_entropy(logits.data(), targets, self.num_classes);
        let (dw, db, dx) = layers::linear_backward(&dlogits, features.data(), self.params.value(0), n, self.feature_dim, self.num_classes);
        let mut grads = self.params.zero_grads();
        grads.set(0, dw);
        grads.set(1, db);
        Ok((loss, grads, dx, correct))
    }
}
