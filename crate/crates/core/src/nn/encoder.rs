//! Convolutional backbone with an MLP projection head.
//!
//! Each block is `conv3x3 -> batch norm -> ReLU -> 2x2 average pool`; the
//! backbone ends in a global average pool whose output is the feature vector
//! used by linear probes. The projection head `linear -> ReLU -> linear` is
//! L2-normalized for the contrastive objective.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layers::{self, Geom, BN_MOMENTUM};
use super::params::{Grads, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum NormKind {
    Batch,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    pub norm: NormKind,
    /// Width of the projection head's hidden layer; defaults to the feature width.
    pub projection_hidden: Option<usize>,
    pub projection_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
            norm: NormKind::Batch,
            projection_hidden: None,
            projection_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn tiny() -> Self {
        EncoderConfig {
            in_channels: 3,
            widths: vec![8, 16],
            norm: NormKind::Batch,
            projection_hidden: None,
            projection_dim: 8,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    fn hidden(&self) -> usize {
        self.projection_hidden.unwrap_or_else(|| self.feature_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("encoder needs at least one non-empty block".into()));
        }
        if self.projection_dim < 2 {
            return Err(Error::Config("projection_dim must be at least 2".into()));
        }
        if self.in_channels == 0 || self.hidden() == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIdx {
    conv_w: usize,
    conv_b: Option<usize>,
    bn: Option<BnIdx>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S: Scalar = f32> {
    config: EncoderConfig,
    params: ParamSet<S>,
    blocks: Vec<BlockIdx>,
    fc1: (usize, usize),
    fc2: (usize, usize),
}

pub struct EncoderOutput<S: Scalar> {
    /// Backbone features `[N, feature_dim]`.
    pub features: Tensor<S>,
    /// Projection before normalization `[N, projection_dim]`.
    pub pre_norm: Tensor<S>,
    /// Unit-norm projection `[N, projection_dim]`.
    pub projection: Tensor<S>,
}

struct BlockCache<S> {
    cin: usize,
    geom: Geom,
    cols: Vec<S>,
    bn: Option<layers::BnCache<S>>,
    activation: Vec<S>,
    pooled: bool,
}

/// Activations retained by a forward pass for the matching backward pass.
pub struct ForwardCache<S: Scalar> {
    n: usize,
    blocks: Vec<BlockCache<S>>,
    final_geom: Geom,
    features: Vec<S>,
    hidden: Vec<S>,
    projection: Vec<S>,
    norms: Vec<S>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[0xE1C0]);
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.widths.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w: Vec<S> = (0..cout * cin * 9)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    S::c(z * std)
                })
                .collect();
            let conv_w = params.push(format!("block{i}.conv.weight"), Tensor::from_vec(&[cout, cin, 3, 3], w)?, true);
            let (conv_b, bn) = match config.norm {
                NormKind::Batch => {
                    let gamma = params.push(format!("block{i}.bn.gamma"), Tensor::full(&[cout], S::one()), true);
                    let beta = params.push(format!("block{i}.bn.beta"), Tensor::zeros(&[cout]), true);
                    let mean = params.push(format!("block{i}.bn.running_mean"), Tensor::zeros(&[cout]), false);
                    let var = params.push(format!("block{i}.bn.running_var"), Tensor::full(&[cout], S::one()), false);
                    (None, Some(BnIdx { gamma, beta, mean, var }))
                }
                NormKind::None => {
                    let b = params.push(format!("block{i}.conv.bias"), Tensor::zeros(&[cout]), true);
                    (Some(b), None)
                }
            };
            blocks.push(BlockIdx { conv_w, conv_b, bn });
            cin = cout;
        }
        let feat = config.feature_dim();
        let hidden = config.hidden();
        let fc1 = push_linear(&mut params, "head.fc1", feat, hidden, &mut r)?;
        let fc2 = push_linear(&mut params, "head.fc2", hidden, config.projection_dim, &mut r)?;
        Ok(Encoder {
            config,
            params,
            blocks,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Replaces the parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParamSet<S>) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn cast<T: Scalar>(&self) -> Encoder<T> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            fc1: self.fc1,
            fc2: self.fc2,
        }
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<Geom> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels || s[0] == 0 {
            return Err(Error::shape(format!(
                "encoder expects [N, {}, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        Ok(Geom { n: s[0], h: s[2], w: s[3] })
    }

    /// Backbone features only, without retaining activations.
    pub fn features(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let (out, _) = self.forward_impl(x, mode, false)?;
        Ok(out.features)
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<(EncoderOutput<S>, ForwardCache<S>)> {
        self.forward_impl(x, mode, true)
    }

    fn forward_impl(&self, x: &Tensor<S>, mode: Mode, with_head: bool) -> Result<(EncoderOutput<S>, ForwardCache<S>)> {
        let mut g = self.check_input(x)?;
        let n = g.n;
        let mut cur = layers::to_channel_major(x.data(), self.config.in_channels, g);
        let mut cin = self.config.in_channels;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (blk, &cout) in self.blocks.iter().zip(&self.config.widths) {
            let bias = blk.conv_b.map(|b| self.params.value(b));
            let (conv_out, cols) = layers::conv_forward(&cur, self.params.value(blk.conv_w), bias, cin, cout, g);
            let (mut act, bn_cache) = match blk.bn {
                Some(bn) => {
                    let running = match mode {
                        Mode::Train => None,
                        Mode::Eval => Some((self.params.value(bn.mean), self.params.value(bn.var))),
                    };
                    let (y, c) = layers::bn_forward(&conv_out, self.params.value(bn.gamma), self.params.value(bn.beta), cout, running);
                    (y, Some(c))
                }
                None => (conv_out, None),
            };
            layers::relu_inplace(&mut act);
            let pooled = g.h >= 2 && g.w >= 2;
            let block_geom = g;
            let next = if pooled {
                let (p, og) = layers::avgpool_forward(&act, cout, g);
                g = og;
                p
            } else {
                act.clone()
            };
            caches.push(BlockCache {
                cin,
                geom: block_geom,
                cols,
                bn: bn_cache,
                activation: act,
                pooled,
            });
            cur = next;
            cin = cout;
        }
        let feat_dim = self.feature_dim();
        let features = layers::gap_forward(&cur, feat_dim, g);
        let (hidden, projection, pre_norm, norms) = if with_head {
            let hd = self.config.hidden();
            let mut h = layers::linear_forward(&features, self.params.value(self.fc1.0), self.params.value(self.fc1.1), n, feat_dim, hd);
            layers::relu_inplace(&mut h);
            let p = layers::linear_forward(&h, self.params.value(self.fc2.0), self.params.value(self.fc2.1), n, hd, self.config.projection_dim);
            let (z, norms) = layers::l2_normalize(&p, self.config.projection_dim);
            (h, z, p, norms)
        } else {
            (Vec::new(), Vec::new(), Vec::new(), Vec::new())
        };
        let pd = self.config.projection_dim;
        let out = EncoderOutput {
            features: Tensor::from_vec(&[n, feat_dim], features.clone())?,
            pre_norm: if with_head { Tensor::from_vec(&[n, pd], pre_norm)? } else { Tensor::zeros(&[0, pd]) },
            projection: if with_head { Tensor::from_vec(&[n, pd], projection.clone())? } else { Tensor::zeros(&[0, pd]) },
        };
        Ok((
            out,
            ForwardCache {
                n,
                blocks: caches,
                final_geom: g,
                features,
                hidden,
                projection,
                norms,
            },
        ))
    }

    /// Folds the batch statistics of a training-mode forward pass into the
    /// running statistics.
    pub fn commit_batch_stats(&mut self, cache: &ForwardCache<S>) {
        let mom = S::c(BN_MOMENTUM);
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks) {
            let (Some(bn), Some(c)) = (blk.bn, bc.bn.as_ref()) else { continue };
            if !c.train {
                continue;
            }
            let m = bc.geom.per_channel() as f64;
            let unbias = S::c(if m > 1.0 { m / (m - 1.0) } else { 1.0 });
            let rm = self.params.value_mut(bn.mean);
            for (r, &b) in rm.iter_mut().zip(&c.batch_mean) {
                *r = (S::one() - mom) * *r + mom * b;
            }
            let rv = self.params.value_mut(bn.var);
            for (r, &b) in rv.iter_mut().zip(&c.batch_var) {
                *r = (S::one() - mom) * *r + mom * b * unbias;
            }
        }
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the backbone
    /// features and/or the normalized projection.
    pub fn backward(&self, cache: &ForwardCache<S>, d_features: Option<&[S]>, d_projection: Option<&[S]>) -> Result<Grads<S>> {
        let n = cache.n;
        let feat_dim = self.feature_dim();
        let mut grads = self.params.zero_grads();
        let mut dfeat = match d_features {
            Some(d) if d.len() != n * feat_dim => return Err(Error::shape("feature gradient has the wrong size")),
            Some(d) => d.to_vec(),
            None => vec![S::zero(); n * feat_dim],
        };
        if let Some(dz) = d_projection {
            let pd = self.config.projection_dim;
            let hd = self.config.hidden();
            if cache.projection.is_empty() {
                return Err(Error::contract("forward pass did not run the projection head"));
            }
            if dz.len() != n * pd {
                return Err(Error::shape("projection gradient has the wrong size"));
            }
            let dp = layers::l2_normalize_backward(dz, &cache.projection, &cache.norms, pd);
            let (dw2, db2, mut dh) = layers::linear_backward(&dp, &cache.hidden, self.params.value(self.fc2.0), n, hd, pd);
            grads.set(self.fc2.0, dw2);
            grads.set(self.fc2.1, db2);
            layers::relu_backward(&mut dh, &cache.hidden);
            let (dw1, db1, dx) = layers::linear_backward(&dh, &cache.features, self.params.value(self.fc1.0), n, feat_dim, hd);
            grads.set(self.fc1.0, dw1);
            grads.set(self.fc1.1, db1);
            dfeat.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
        }
        let mut d = layers::gap_backward(&dfeat, feat_dim, cache.final_geom);
        for (i, (blk, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let cout = self.config.widths[i];
            if bc.pooled {
                d = layers::avgpool_backward(&d, cout, bc.geom);
            }
            layers::relu_backward(&mut d, &bc.activation);
            if let (Some(bn), Some(c)) = (blk.bn, bc.bn.as_ref()) {
                let (dg, db, dx) = layers::bn_backward(&d, self.params.value(bn.gamma), c, cout);
                grads.set(bn.gamma, dg);
                grads.set(bn.beta, db);
                d = dx;
            }
            let (dw, db, dx) = layers::conv_backward(&d, &bc.cols, self.params.value(blk.conv_w), bc.cin, cout, bc.geom, i > 0);
            grads.set(blk.conv_w, dw);
            if let Some(b) = blk.conv_b {
                grads.set(b, db);
            }
            if let Some(dx) = dx {
                d = dx;
            }
        }
        Ok(grads)
    }
}

fn push_linear<S: Scalar>(params: &mut ParamSet<S>, name: &str, fin: usize, fout: usize, r: &mut rng::Rng) -> Result<(usize, usize)> {
    let bound = 1.0 / (fin as f64).sqrt();
    let w: Vec<S> = (0..fout * fin).map(|_| S::c(r.random_range(-bound..bound))).collect();
    let b: Vec<S> = (0..fout).map(|_| S::c(r.random_range(-bound..bound))).collect();
    let wi = params.push(format!("{name}.weight"), Tensor::from_vec(&[fout, fin], w)?, true);
    let bi = params.push(format!("{name}.bias"), Tensor::from_vec(&[fout], b)?, true);
    Ok((wi, bi))
}

/// Stacks images into an `[N, 3, H, W]` batch.
pub fn batch_from_images<'a, S: Scalar>(images: impl IntoIterator<Item = &'a crate::imageops::Image>) -> Result<Tensor<S>> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut size = None;
    for img in images {
        let s = (img.height(), img.width());
        if *size.get_or_insert(s) != s {
            return Err(Error::shape("images in a batch must share one size"));
        }
        data.extend(img.data().iter().map(|&v| S::c(v as f64)));
        n += 1;
    }
    let (h, w) = size.ok_or_else(|| Error::contract("empty batch"))?;
    Tensor::from_vec(&[n, crate::imageops::CHANNELS, h, w], data)
}
