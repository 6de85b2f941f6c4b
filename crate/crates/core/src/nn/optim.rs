use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// SGD with momentum, coupled weight decay and a step schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: from `epoch` on the learning rate is multiplied
    /// by `multiplier`; entries compound.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.lr, |lr, (_, m)| lr * m)
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<S: Scalar> {
    config: SgdConfig,
    velocity: Vec<Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig, params: &ParamSet<S>) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Tensor<S>] {
        &self.velocity
    }

    /// `v <- momentum * v + g + wd * theta; theta <- theta - lr(epoch) * v`
    /// for every trainable tensor.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &Grads<S>, epoch: usize) {
        let lr = S::c(self.config.lr_at(epoch));
        let mom = S::c(self.config.momentum);
        let wd = S::c(self.config.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(&grads.0).zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((theta, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mom * *vi + gi + wd * *theta;
                *theta -= lr * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: vec![(20, 0.1), (30, 0.1)],
        }
    }

    #[test]
    fn schedule_compounds() {
        let c = cfg(1.0);
        assert_eq!(c.lr_at(0), 1.0);
        assert_eq!(c.lr_at(19), 1.0);
        assert!((c.lr_at(20) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(35) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true);
        let before = ps.clone();
        let mut opt = Sgd::new(cfg(0.0), &ps).unwrap();
        let g = Grads(vec![Tensor::from_vec(&[2], vec![5.0, 5.0]).unwrap()]);
        opt.step(&mut ps, &g, 0);
        assert_eq!(ps, before);
    }

    #[test]
    fn quadratic_update_matches_closed_form() {
        // L = 0.5 * |w x - y|^2 for one linear unit; dL/dw = (w x - y) x
        let (x, y) = ([1.0f64, 2.0], 3.0);
        let w = [0.5f64, -0.25];
        let resid = w[0] * x[0] + w[1] * x[1] - y;
        let mut ps = ParamSet::<f64>::new();
        ps.push("w", Tensor::from_vec(&[2], w.to_vec()).unwrap(), true);
        let c = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0, schedule: vec![] };
        let mut opt = Sgd::new(c, &ps).unwrap();
        let g = Grads(vec![Tensor::from_vec(&[2], vec![resid * x[0], resid * x[1]]).unwrap()]);
        opt.step(&mut ps, &g, 0);
        let got = ps.value(0);
        assert!((got[0] - (0.5 - 0.1 * resid * 1.0)).abs() < 1e-15);
        assert!((got[1] - (-0.25 - 0.1 * resid * 2.0)).abs() < 1e-15);
        // second step carries momentum
        opt.step(&mut ps, &g, 0);
        let v1 = resid * x[0];
        let v2 = 0.9 * v1 + v1;
        assert!((ps.value(0)[0] - (0.5 - 0.1 * v1 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("running", Tensor::from_vec(&[1], vec![1.0]).unwrap(), false);
        let mut opt = Sgd::new(cfg(1.0), &ps).unwrap();
        let g = Grads(vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()]);
        opt.step(&mut ps, &g, 0);
        assert_eq!(ps.value(0), &[1.0]);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = cfg(0.1);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c.momentum = 0.5;
        c.lr = -1.0;
        assert!(c.validate().is_err());
    }
}
