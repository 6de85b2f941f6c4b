//! Linear probes on a frozen backbone: 4-way rotation, 24-way jigsaw, and a
//! supervised probe for label-based evaluation.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::nn::layers;
use crate::nn::{batch_from_images, Encoder, LinearHead, Mode, Sgd, SgdConfig, Tensor};
use crate::rng;

const STREAM_JIGSAW: u64 = 0x71;
const STREAM_PROBE: u64 = 0x72;
const STREAM_SPLIT: u64 = 0x73;

/// Forward passes over frozen encoders are chunked to bound memory.
const FEATURE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ProbeKind {
    Rotation,
    Jigsaw,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbeTask {
    pub kind: ProbeKind,
    pub num_classes: usize,
}

impl ProbeTask {
    pub fn rotation() -> Self {
        ProbeTask {
            kind: ProbeKind::Rotation,
            num_classes: 4,
        }
    }

    pub fn jigsaw() -> Self {
        ProbeTask {
            kind: ProbeKind::Jigsaw,
            num_classes: 24,
        }
    }

    pub fn supervised(num_classes: usize) -> Self {
        ProbeTask {
            kind: ProbeKind::Supervised,
            num_classes,
        }
    }
}

/// Rotates a square image counter-clockwise by `quarter_turns * 90` degrees.
pub fn rotate_image(img: &Image, quarter_turns: usize) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    if w != h {
        return Err(Error::contract(format!("rotation needs a square image, got {w}x{h}")));
    }
    let mut cur = img.clone();
    for _ in 0..quarter_turns % 4 {
        cur = Image::from_fn(w, h, |c, y, x| cur.get(c, x, w - 1 - y));
    }
    Ok(cur)
}

/// Every image in all four rotations, labelled by quarter turns; output order
/// is image-major.
pub fn rotate_batch(imgs: &[Image]) -> Result<(Vec<Image>, Vec<usize>)> {
    let mut out = Vec::with_capacity(4 * imgs.len());
    let mut labels = Vec::with_capacity(4 * imgs.len());
    for img in imgs {
        for k in 0..4 {
            out.push(rotate_image(img, k)?);
            labels.push(k);
        }
    }
    Ok((out, labels))
}

/// The 24 orderings of four quadrants in lexicographic order.
pub fn permutations() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    if p.iter().all(|&v| !std::mem::replace(&mut seen[v], true)) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Rearranges quadrants (top-left 0, top-right 1, bottom-left 2, bottom-right
/// 3): output quadrant `j` receives input quadrant `perm[j]`.
pub fn apply_jigsaw(img: &Image, perm: &[usize; 4]) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::contract(format!("jigsaw needs even dimensions, got {w}x{h}")));
    }
    let (hw, hh) = (w / 2, h / 2);
    Ok(Image::from_fn(w, h, |c, y, x| {
        let j = (y / hh) * 2 + x / hw;
        let src = perm[j];
        let sy = (src / 2) * hh + y % hh;
        let sx = (src % 2) * hw + x % hw;
        img.get(c, sy, sx)
    }))
}

/// Shuffles each image's quadrants by a uniformly drawn permutation; the label
/// is the permutation's lexicographic index.
pub fn jigsaw_batch(imgs: &[Image], rng: &mut rng::Rng) -> Result<(Vec<Image>, Vec<usize>)> {
    let perms = permutations();
    let mut out = Vec::with_capacity(imgs.len());
    let mut labels = Vec::with_capacity(imgs.len());
    for img in imgs {
        let l = rng.random_range(0..perms.len());
        out.push(apply_jigsaw(img, &perms[l])?);
        labels.push(l);
    }
    Ok((out, labels))
}

/// Backbone features of `imgs` in evaluation mode, `[N, feature_dim]`.
pub fn extract_features(encoder: &Encoder, imgs: &[Image]) -> Result<Tensor> {
    let fd = encoder.feature_dim();
    let mut data = Vec::with_capacity(imgs.len() * fd);
    for chunk in imgs.chunks(FEATURE_CHUNK) {
        let x: Tensor = batch_from_images(chunk)?;
        data.extend_from_slice(encoder.features(&x, Mode::Eval)?.data());
    }
    Tensor::from_vec(&[imgs.len(), fd], data)
}

/// Task inputs and labels derived from `images`.
pub fn task_inputs(task: ProbeTask, images: &[Image], labels: Option<&[usize]>, jigsaw_copies: usize, seed: u64) -> Result<(Vec<Image>, Vec<usize>)> {
    match task.kind {
        ProbeKind::Rotation => rotate_batch(images),
        ProbeKind::Jigsaw => {
            let mut r = rng::stream(seed, &[STREAM_JIGSAW]);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for _ in 0..jigsaw_copies.max(1) {
                let (a, b) = jigsaw_batch(images, &mut r)?;
                xs.extend(a);
                ys.extend(b);
            }
            Ok((xs, ys))
        }
        ProbeKind::Supervised => {
            let labels = labels.ok_or_else(|| Error::contract("supervised probe needs labels"))?;
            if labels.len() != images.len() {
                return Err(Error::shape("labels and images differ in length"));
            }
            Ok((images.to_vec(), labels.to_vec()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Fraction of images held out for evaluation when a single dataset is given.
    pub held_out_fraction: f64,
    /// Jigsaw permutations drawn per image.
    pub jigsaw_copies: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            batch_size: 256,
            sgd: SgdConfig {
                lr: 0.5,
                momentum: 0.9,
                weight_decay: 0.0,
                schedule: vec![(20, 0.1), (30, 0.1)],
            },
            held_out_fraction: 0.2,
            jigsaw_copies: 4,
        }
    }
}

impl ProbeConfig {
    /// Classifier parameters of the original large-scale setup.
    pub fn paper() -> Self {
        ProbeConfig {
            sgd: SgdConfig {
                lr: 15.0,
                ..ProbeConfig::default().sgd
            },
            ..ProbeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch size must be positive".into()));
        }
        if !(0.0 < self.held_out_fraction && self.held_out_fraction < 1.0) {
            return Err(Error::Config("held_out_fraction must lie in (0, 1)".into()));
        }
        self.sgd.validate()
    }
}

/// A trained linear head together with the per-dimension feature
/// standardization fitted on its training split. Standardization is an affine
/// map, so head and standardization together remain a single linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedProbe {
    pub task: ProbeTask,
    pub head: LinearHead,
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl FittedProbe {
    fn standardize(&self, features: &Tensor) -> Result<Tensor> {
        standardize(features, &self.mean, &self.inv_std)
    }

    /// Pre-softmax activations for backbone features.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.head.logits(&self.standardize(features)?)
    }

    /// Mean cross-entropy and top-1 accuracy on labelled features.
    pub fn evaluate(&self, features: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
        if labels.is_empty() {
            return Err(Error::contract("no samples to evaluate"));
        }
        let logits = self.logits(features)?;
        let (loss, _, correct) = layers::softmax_cross_entropy(logits.data(), labels, self.task.num_classes);
        Ok((loss, correct as f64 / labels.len() as f64))
    }

    /// Cross-entropy and accuracy of this probe on images, derived into task
    /// inputs by the probe's own task.
    pub fn evaluate_images(&self, encoder: &Encoder, images: &[Image], labels: Option<&[usize]>, seed: u64) -> Result<(f64, f64)> {
        let (xs, ys) = task_inputs(self.task, images, labels, 1, seed)?;
        let f = extract_features(encoder, &xs)?;
        self.evaluate(&f, &ys)
    }
}

fn standardize(features: &Tensor, mean: &[f32], inv_std: &[f32]) -> Result<Tensor> {
    let d = mean.len();
    if features.shape().len() != 2 || features.shape()[1] != d {
        return Err(Error::shape(format!("features {:?} vs probe width {d}", features.shape())));
    }
    let data = features
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(mean).zip(inv_std).map(|((&v, &m), &s)| (v - m) * s))
        .collect();
    Tensor::from_vec(features.shape(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub task: ProbeTask,
    pub top1: f64,
    pub eval_loss: f64,
    pub probe: FittedProbe,
}

/// Fits a linear probe on precomputed features and evaluates it on held-out
/// features.
pub fn fit_probe(task: ProbeTask, train: (&Tensor, &[usize]), held: (&Tensor, &[usize]), cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    let (xf, yf) = train;
    if yf.is_empty() || held.1.is_empty() {
        return Err(Error::contract("probe needs non-empty training and held-out data"));
    }
    if xf.shape().len() != 2 || xf.shape()[0] != yf.len() {
        return Err(Error::shape("training features and labels disagree"));
    }
    let (n, d) = (xf.shape()[0], xf.shape()[1]);
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in xf.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
            sq[j] += (row[j] as f64).powi(2);
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / n as f64).collect();
    let inv_std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / n as f64 - m * m).max(0.0);
            (1.0 / (var + 1e-6).sqrt()) as f32
        })
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let x = standardize(xf, &mean, &inv_std)?;
    let mut head = LinearHead::new(task.num_classes, d, rng::derive_seed(seed, &[STREAM_PROBE]))?;
    let mut opt = Sgd::new(cfg.sgd.clone(), head.params())?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[STREAM_PROBE, 1]);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            let mut bx = Vec::with_capacity(chunk.len() * d);
            let mut by = Vec::with_capacity(chunk.len());
            for &i in chunk {
                bx.extend_from_slice(x.row(i));
                by.push(yf[i]);
            }
            let bx = Tensor::from_vec(&[chunk.len(), d], bx)?;
            let (loss, grads, _, _) = head.cross_entropy(&bx, &by)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("probe loss at epoch {epoch}")));
            }
            opt.step(head.params_mut(), &grads, epoch);
        }
    }
    let probe = FittedProbe { task, head, mean, inv_std };
    let (eval_loss, top1) = probe.evaluate(held.0, held.1)?;
    Ok(ProbeResult {
        task,
        top1,
        eval_loss,
        probe,
    })
}

/// Trains a probe for `task` on `train` images and evaluates it on `held`.
/// The encoder is only read; its parameters are never updated.
pub fn train_probe_split(encoder: &Encoder, task: ProbeTask, train: &Dataset, held: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    if train.is_empty() || held.is_empty() {
        return Err(Error::contract("probe needs non-empty training and held-out data"));
    }
    let (tx, ty) = task_inputs(task, &train.images, train.labels.as_deref(), cfg.jigsaw_copies, rng::derive_seed(seed, &[0]))?;
    let (hx, hy) = task_inputs(task, &held.images, held.labels.as_deref(), cfg.jigsaw_copies, rng::derive_seed(seed, &[1]))?;
    let tf = extract_features(encoder, &tx)?;
    let hf = extract_features(encoder, &hx)?;
    fit_probe(task, (&tf, &ty), (&hf, &hy), cfg, seed)
}

/// Splits `data` by `cfg.held_out_fraction` and trains a probe on the larger
/// part.
pub fn train_probe(encoder: &Encoder, task: ProbeTask, data: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::contract("probe needs at least two images"));
    }
    let (train, held) = data.split(cfg.held_out_fraction, rng::derive_seed(seed, &[STREAM_SPLIT]));
    train_probe_split(encoder, task, &train, &held, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |c, y, x| ((c * 100 + y * w + x) as f32) / 400.0)
    }

    #[test]
    fn rotation_by_quarter_turn() {
        // [[a, b], [c, d]] turned counter-clockwise is [[b, d], [a, c]].
        let img = tagged(2, 2);
        let r = rotate_image(&img, 1).unwrap();
        for c in 0..3 {
            assert_eq!(r.get(c, 0, 0), img.get(c, 0, 1));
            assert_eq!(r.get(c, 0, 1), img.get(c, 1, 1));
            assert_eq!(r.get(c, 1, 0), img.get(c, 0, 0));
            assert_eq!(r.get(c, 1, 1), img.get(c, 1, 0));
        }
        assert_eq!(rotate_image(&img, 0).unwrap(), img);
        assert_eq!(rotate_image(&img, 4).unwrap(), img);
        assert!(rotate_image(&tagged(2, 3), 1).is_err());
    }

    #[test]
    fn permutations_are_lexicographic() {
        let p = permutations();
        assert_eq!(p.len(), 24);
        assert_eq!(p[0], [0, 1, 2, 3]);
        assert_eq!(p[6], [1, 0, 2, 3]);
        assert_eq!(p[23], [3, 2, 1, 0]);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn jigsaw_swaps_blocks() {
        let img = tagged(4, 4);
        assert_eq!(apply_jigsaw(&img, &[0, 1, 2, 3]).unwrap(), img);
        let s = apply_jigsaw(&img, &[1, 0, 2, 3]).unwrap();
        assert_eq!(s.get(0, 0, 0), img.get(0, 0, 2));
        assert_eq!(s.get(0, 1, 3), img.get(0, 1, 1));
        assert_eq!(s.get(0, 3, 3), img.get(0, 3, 3));
        assert!(apply_jigsaw(&tagged(3, 4), &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn probe_separates_linear_classes() {
        let mut r = rng::stream(1, &[]);
        let n = 64;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let feats: Vec<f32> = labels
            .iter()
            .flat_map(|&l| {
                let s = if l == 0 { -1.0 } else { 1.0 };
                [s + r.random_range(-0.3..0.3), r.random_range(-1.0..1.0)]
            })
            .collect();
        let x = Tensor::from_vec(&[n, 2], feats).unwrap();
        let cfg = ProbeConfig {
            epochs: 20,
            batch_size: 16,
            ..ProbeConfig::default()
        };
        let res = fit_probe(ProbeTask::supervised(2), (&x, &labels), (&x, &labels), &cfg, 0).unwrap();
        assert_eq!(res.top1, 1.0);
        assert_eq!(res.probe.head.params().num_trainable_scalars(), 2 * 3);
    }
}
