//! Momentum-contrast pretraining: a query encoder trained by InfoNCE against a
//! slowly moving key encoder and a FIFO queue of past keys.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::nn::checkpoint;
use crate::nn::layers;
use crate::nn::{batch_from_images, Encoder, EncoderConfig, Mode, NormKind, ParamSet, Scalar, Sgd, SgdConfig, Tensor};
use crate::policy::Augment;
use crate::rng;

/// Rows of `q`, `k` and the queue must have unit norm within this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-3;

const STREAM_QUEUE: u64 = 0x51;
const STREAM_SHUFFLE: u64 = 0x52;
const STREAM_VIEWS: u64 = 0x53;
const STREAM_INIT: u64 = 0x54;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct MocoConfig {
    pub queue_size: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub encoder: EncoderConfig,
}

impl Default for MocoConfig {
    fn default() -> Self {
        MocoConfig {
            queue_size: 512,
            momentum: 0.99,
            temperature: 0.2,
            epochs: 20,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 0.03,
                momentum: 0.9,
                weight_decay: 1e-4,
                schedule: vec![(12, 0.1), (16, 0.1)],
            },
            encoder: EncoderConfig::default(),
        }
    }
}

impl MocoConfig {
    /// CIFAR-10 training parameters of the original large-scale setup.
    pub fn paper() -> Self {
        MocoConfig {
            queue_size: 65536,
            momentum: 0.999,
            temperature: 0.2,
            epochs: 200,
            batch_size: 512,
            sgd: SgdConfig {
                lr: 0.4,
                momentum: 0.9,
                weight_decay: 1e-4,
                schedule: vec![(120, 0.1), (160, 0.1)],
            },
            encoder: EncoderConfig {
                projection_dim: 128,
                ..EncoderConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.batch_size == 0 || self.queue_size == 0 || self.queue_size % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "queue size {} must be a positive multiple of batch size {}",
                self.queue_size, self.batch_size
            )));
        }
        self.sgd.validate()?;
        self.encoder.validate()
    }
}

/// InfoNCE value for a batch, with the gradient w.r.t. the queries.
#[derive(Debug, Clone)]
pub struct InfoNce<S> {
    pub loss: f64,
    pub top1: f64,
    pub dq: Vec<S>,
}

fn check_unit<S: Scalar>(rows: &[S], d: usize, what: &str) -> Result<()> {
    for (i, r) in rows.chunks(d).enumerate() {
        let norm = r.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("{what} row {i}")));
        }
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::contract(format!("{what} row {i} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

/// `(K+1)`-way softmax cross-entropy with the positive key at index 0.
/// `q` and `k` are `[N, d]`, `queue` is `[K, d]`, all row-major with unit rows.
pub fn infonce_with_grad<S: Scalar>(q: &[S], k: &[S], queue: &[S], d: usize, temperature: f64) -> Result<InfoNce<S>> {
    if d == 0 || q.len() % d != 0 || q.len() != k.len() || queue.len() % d != 0 || q.is_empty() {
        return Err(Error::shape("q, k and queue must be [N, d], [N, d] and [K, d]"));
    }
    if !(temperature > 0.0) {
        return Err(Error::contract("temperature must be positive"));
    }
    check_unit(q, d, "query")?;
    check_unit(k, d, "key")?;
    check_unit(queue, d, "queue")?;
    let n = q.len() / d;
    let kq = queue.len() / d;
    let cols = kq + 1;
    let inv_t = S::c(1.0 / temperature);
    let mut neg = vec![S::zero(); n * kq];
    crate::nn::tensor::matmul(q, false, queue, true, &mut neg, n, d, kq, false);
    let mut logits = vec![S::zero(); n * cols];
    for i in 0..n {
        let row = &mut logits[i * cols..(i + 1) * cols];
        let pos: S = q[i * d..(i + 1) * d].iter().zip(&k[i * d..(i + 1) * d]).map(|(&a, &b)| a * b).sum();
        row[0] = pos * inv_t;
        for (o, &v) in row[1..].iter_mut().zip(&neg[i * kq..(i + 1) * kq]) {
            *o = v * inv_t;
        }
    }
    let targets = vec![0usize; n];
    let (loss, dlogits, correct) = layers::softmax_cross_entropy(&logits, &targets, cols);
    let mut dq = vec![S::zero(); n * d];
    let mut dneg = vec![S::zero(); n * kq];
    for i in 0..n {
        let g0 = dlogits[i * cols] * inv_t;
        for (o, &kv) in dq[i * d..(i + 1) * d].iter_mut().zip(&k[i * d..(i + 1) * d]) {
            *o = g0 * kv;
        }
        for (o, &g) in dneg[i * kq..(i + 1) * kq].iter_mut().zip(&dlogits[i * cols + 1..(i + 1) * cols]) {
            *o = g * inv_t;
        }
    }
    crate::nn::tensor::matmul(&dneg, false, queue, false, &mut dq, n, kq, d, true);
    if !loss.is_finite() {
        return Err(Error::NonFinite("InfoNCE loss".into()));
    }
    Ok(InfoNce {
        loss,
        top1: correct as f64 / n as f64,
        dq,
    })
}

/// Loss and positive-pair top-1 accuracy for `q`, `k` of shape `[N, d]` and a
/// queue of shape `[K, d]`.
pub fn infonce_loss(q: &Tensor, k: &Tensor, queue: &Tensor, temperature: f64) -> Result<(f64, f64)> {
    let d = q.shape().last().copied().unwrap_or(0);
    if q.shape().len() != 2 || k.shape() != q.shape() || queue.shape().len() != 2 || queue.shape()[1] != d {
        return Err(Error::shape(format!(
            "q {:?}, k {:?}, queue {:?}",
            q.shape(),
            k.shape(),
            queue.shape()
        )));
    }
    let r = infonce_with_grad(q.data(), k.data(), queue.data(), d, temperature)?;
    Ok((r.loss, r.top1))
}

/// `key <- m * key + (1 - m) * query` over trainable entries.
pub fn momentum_update<S: Scalar>(query: &ParamSet<S>, key: &mut ParamSet<S>, m: f64) -> Result<()> {
    key.check_compatible(query)?;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::contract(format!("momentum {m} outside [0, 1]")));
    }
    let (mk, mq) = (S::c(m), S::c(1.0 - m));
    for (kp, qp) in key.iter_mut().zip(query.iter()) {
        if !kp.trainable {
            continue;
        }
        for (a, &b) in kp.value.data_mut().iter_mut().zip(qp.value.data()) {
            *a = mk * *a + mq * b;
        }
    }
    Ok(())
}

/// Both encoders and the negative queue.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub query: Encoder,
    pub key: Encoder,
    queue: Tensor,
    cursor: usize,
}

impl EncoderState {
    /// Fresh state: the key encoder starts as a copy of the query encoder and
    /// the queue holds random unit rows.
    pub fn new(config: &MocoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let query = Encoder::new(config.encoder.clone(), rng::derive_seed(seed, &[STREAM_INIT]))?;
        let key = query.clone();
        let d = config.encoder.projection_dim;
        let mut r = rng::stream(seed, &[STREAM_QUEUE]);
        let raw: Vec<f32> = (0..config.queue_size * d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                z as f32
            })
            .collect();
        let (rows, _) = layers::l2_normalize(&raw, d);
        Ok(EncoderState {
            query,
            key,
            queue: Tensor::from_vec(&[config.queue_size, d], rows)?,
            cursor: 0,
        })
    }

    pub fn queue(&self) -> &Tensor {
        &self.queue
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn queue_size(&self) -> usize {
        self.queue.shape()[0]
    }

    /// Overwrites the `N` rows after the cursor with `keys` (`[N, d]`), wrapping
    /// around, and advances the cursor.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let [kq, d] = [self.queue.shape()[0], self.queue.shape()[1]];
        if keys.shape().len() != 2 || keys.shape()[1] != d {
            return Err(Error::shape(format!("keys {:?} do not match queue width {d}", keys.shape())));
        }
        let n = keys.shape()[0];
        if n == 0 || kq % n != 0 {
            return Err(Error::contract(format!("{n} keys do not divide queue size {kq}")));
        }
        check_unit(keys.data(), d, "key")?;
        let q = self.queue.data_mut();
        for (i, row) in keys.data().chunks(d).enumerate() {
            let slot = (self.cursor + i) % kq;
            q[slot * d..(slot + 1) * d].copy_from_slice(row);
        }
        self.cursor = (self.cursor + n) % kq;
        Ok(())
    }

    /// Serializes both encoders, the queue and the cursor.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let cfg = self.query.config();
        let meta = |v: Vec<f32>| Tensor::from_vec(&[v.len()], v).expect("1-d tensor");
        tensors.push(("meta.in_channels".to_string(), meta(vec![cfg.in_channels as f32])));
        tensors.push(("meta.widths".to_string(), meta(cfg.widths.iter().map(|&w| w as f32).collect())));
        tensors.push((
            "meta.norm".to_string(),
            meta(vec![match cfg.norm {
                NormKind::Batch => 0.0,
                NormKind::None => 1.0,
            }]),
        ));
        tensors.push(("meta.projection_hidden".to_string(), meta(vec![cfg.projection_hidden.unwrap_or(0) as f32])));
        tensors.push(("meta.projection_dim".to_string(), meta(vec![cfg.projection_dim as f32])));
        for (prefix, enc) in [("query", &self.query), ("key", &self.key)] {
            for p in enc.params().iter() {
                tensors.push((format!("{prefix}.{}", p.name), p.value.clone()));
            }
        }
        tensors.push(("queue".to_string(), self.queue.clone()));
        tensors.push(("cursor".to_string(), meta(vec![self.cursor as f32])));
        checkpoint::encode_checkpoint(&tensors)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let tensors = checkpoint::read_checkpoint(bytes)?;
        let get = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor {name}")))
        };
        let scalar = |name: &str| -> Result<usize> {
            let t = get(name)?;
            t.data()
                .first()
                .map(|&v| v as usize)
                .ok_or_else(|| Error::parse("checkpoint", format!("empty tensor {name}")))
        };
        let hidden = scalar("meta.projection_hidden")?;
        let config = EncoderConfig {
            in_channels: scalar("meta.in_channels")?,
            widths: get("meta.widths")?.data().iter().map(|&v| v as usize).collect(),
            norm: if scalar("meta.norm")? == 0 { NormKind::Batch } else { NormKind::None },
            projection_hidden: (hidden > 0).then_some(hidden),
            projection_dim: scalar("meta.projection_dim")?,
        };
        let mut query = Encoder::new(config, 0)?;
        let mut key = query.clone();
        for (prefix, enc) in [("query", &mut query), ("key", &mut key)] {
            for p in enc.params_mut().iter_mut() {
                let t = get(&format!("{prefix}.{}", p.name))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::shape(format!("checkpoint tensor {prefix}.{} has shape {:?}", p.name, t.shape())));
                }
                p.value = t.clone();
            }
        }
        let queue = get("queue")?.clone();
        if queue.shape().len() != 2 || queue.shape()[1] != query.config().projection_dim {
            return Err(Error::shape("checkpoint queue does not match the projection width"));
        }
        let cursor = scalar("cursor")?;
        if cursor >= queue.shape()[0] {
            return Err(Error::parse("checkpoint", "cursor outside the queue"));
        }
        Ok(EncoderState { query, key, queue, cursor })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive_top1: f64,
    pub wall_seconds: f64,
}

/// A query encoder, its optimizer, and the shared state.
pub struct MocoTrainer {
    pub config: MocoConfig,
    pub state: EncoderState,
    optimizer: Sgd<f32>,
    seed: u64,
}

/// Loss and accuracy of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub top1: f64,
}

/// Two independently augmented views of each image, computed from a stream
/// keyed by the sample index so results do not depend on scheduling.
pub fn make_views(images: &[&Image], indices: &[usize], aug: &dyn Augment, seed: u64, epoch: usize) -> Result<(Vec<Image>, Vec<Image>)> {
    let pairs: Vec<Result<(Image, Image)>> = images
        .par_iter()
        .zip(indices.par_iter())
        .map(|(img, &idx)| {
            let mut r = rng::stream(seed, &[STREAM_VIEWS, epoch as u64, idx as u64]);
            let a = aug.augment(img, &mut r)?;
            let b = aug.augment(img, &mut r)?;
            Ok((a, b))
        })
        .collect();
    let mut qs = Vec::with_capacity(pairs.len());
    let mut ks = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = p?;
        qs.push(a);
        ks.push(b);
    }
    Ok((qs, ks))
}

impl MocoTrainer {
    pub fn new(config: MocoConfig, seed: u64) -> Result<Self> {
        let state = EncoderState::new(&config, seed)?;
        Self::from_state(config, state, seed)
    }

    pub fn from_state(config: MocoConfig, state: EncoderState, seed: u64) -> Result<Self> {
        config.validate()?;
        let optimizer = Sgd::new(config.sgd.clone(), state.query.params())?;
        Ok(MocoTrainer {
            config,
            state,
            optimizer,
            seed,
        })
    }

    /// One optimization step on a batch of view pairs.
    pub fn step(&mut self, queries: &[Image], keys: &[Image], epoch: usize) -> Result<StepStats> {
        let xq: Tensor = batch_from_images(queries)?;
        let xk: Tensor = batch_from_images(keys)?;
        let (q_out, q_cache) = self.state.query.forward(&xq, Mode::Train)?;
        momentum_update(self.state.query.params(), self.state.key.params_mut(), self.config.momentum)?;
        let (k_out, k_cache) = self.state.key.forward(&xk, Mode::Train)?;
        self.state.key.commit_batch_stats(&k_cache);
        let d = self.config.encoder.projection_dim;
        let nce = infonce_with_grad(
            q_out.projection.data(),
            k_out.projection.data(),
            self.state.queue.data(),
            d,
            self.config.temperature,
        )
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::Diverged(format!("epoch {epoch}: {m}")),
            other => other,
        })?;
        let grads = self.state.query.backward(&q_cache, None, Some(&nce.dq))?;
        if !grads.all_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: non-finite gradient")));
        }
        self.optimizer.step(self.state.query.params_mut(), &grads, epoch);
        self.state.query.commit_batch_stats(&q_cache);
        if !self.state.query.params().all_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: non-finite parameters")));
        }
        self.state.enqueue(&k_out.projection)?;
        Ok(StepStats {
            loss: nce.loss,
            top1: nce.top1,
        })
    }

    /// One pass over the dataset in shuffled, full batches.
    pub fn train_epoch(&mut self, data: &Dataset, aug: &dyn Augment, epoch: usize) -> Result<StepStats> {
        let bs = self.config.batch_size;
        if data.len() < bs {
            return Err(Error::contract(format!(
                "dataset of {} images is smaller than one batch of {bs}",
                data.len()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng::stream(self.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let (mut loss, mut top1, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks_exact(bs) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
            let (qs, ks) = make_views(&imgs, chunk, aug, self.seed, epoch)?;
            let s = self.step(&qs, &ks, epoch)?;
            loss += s.loss;
            top1 += s.top1;
            steps += 1;
        }
        Ok(StepStats {
            loss: loss / steps as f64,
            top1: top1 / steps as f64,
        })
    }
}

/// Result of [`train_moco`].
pub struct MocoRun {
    pub state: EncoderState,
    pub log: Vec<EpochLog>,
}

/// Pretrains from scratch for `config.epochs` epochs. When `log_sink` is given,
/// each epoch record is written to it as one JSON line.
pub fn train_moco(data: &Dataset, aug: &dyn Augment, config: &MocoConfig, seed: u64, mut log_sink: Option<&mut dyn Write>) -> Result<MocoRun> {
    if data.is_empty() {
        return Err(Error::contract("cannot pretrain on an empty dataset"));
    }
    let mut trainer = MocoTrainer::new(config.clone(), seed)?;
    let start = Instant::now();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let s = trainer.train_epoch(data, aug, epoch)?;
        let rec = EpochLog {
            epoch,
            loss: s.loss,
            contrastive_top1: s.top1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("log records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log.push(rec);
    }
    Ok(MocoRun {
        state: trainer.state,
        log,
    })
}

/// InfoNCE and contrastive top-1 of a frozen state on freshly augmented view
/// pairs of `images`, with batch norm in evaluation mode and the state's queue
/// as negatives.
pub fn evaluate_infonce(state: &EncoderState, images: &[Image], aug: &dyn Augment, temperature: f64, batch_size: usize, seed: u64) -> Result<(f64, f64)> {
    if images.is_empty() {
        return Err(Error::contract("no images to evaluate"));
    }
    let bs = batch_size.max(1);
    let d = state.query.config().projection_dim;
    let (mut loss, mut top1) = (0.0, 0.0);
    let indices: Vec<usize> = (0..images.len()).collect();
    for chunk in indices.chunks(bs) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
        let (qs, ks) = make_views(&imgs, chunk, aug, seed, 0)?;
        let (q_out, _) = state.query.forward(&batch_from_images(&qs)?, Mode::Eval)?;
        let (k_out, _) = state.key.forward(&batch_from_images(&ks)?, Mode::Eval)?;
        let r = infonce_with_grad(q_out.projection.data(), k_out.projection.data(), state.queue.data(), d, temperature)?;
        loss += r.loss * chunk.len() as f64;
        top1 += r.top1 * chunk.len() as f64;
    }
    let n = images.len() as f64;
    Ok((loss / n, top1 / n))
}
