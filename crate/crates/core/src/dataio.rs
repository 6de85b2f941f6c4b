//! Dataset ingestion and the fold splits used by the search.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::imageops::{Image, CHANNELS};
use crate::rng;

/// Bytes per CIFAR-10 record: one label byte and a 32x32x3 planar image.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_BATCH: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Vec<Image>,
    /// Class ids. Only the supervised probe of the correlation harness reads them.
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Vec<Image>, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::contract(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= num_classes) {
                return Err(Error::contract(format!(
                    "class id {bad} outside [0, {num_classes})"
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Image side lengths as `(H, W)`; all images share one size.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height(), i.width()))
    }

    /// The dataset restricted to `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// A seeded random subset of `n` images (all of them when `n >= len`).
    pub fn subsample(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[0x5B5A]));
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        let mut out = self.select(&idx);
        out.name = format!("{}[{}]", self.name, out.len());
        out
    }

    /// Seeded split into `(train, held_out)` with `held_out_fraction` of the images.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, &[0x5B11]));
        let n_out = ((self.len() as f64 * held_out_fraction).round() as usize).min(self.len());
        let (held, train) = idx.split_at(n_out);
        let (mut train, mut held) = (train.to_vec(), held.to_vec());
        train.sort_unstable();
        held.sort_unstable();
        (self.select(&train), self.select(&held))
    }
}

/// Reads the five CIFAR-10 training batches from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Dataset> {
    let mut images = Vec::with_capacity(5 * CIFAR_RECORDS_PER_BATCH);
    let mut labels = Vec::with_capacity(5 * CIFAR_RECORDS_PER_BATCH);
    for file in CIFAR_TRAIN_FILES {
        let path = dir.join(file);
        let bytes = read_all(&path)?;
        let (imgs, labs) = parse_cifar_batch(&bytes, &path)?;
        images.extend(imgs);
        labels.extend(labs);
    }
    Dataset::new("cifar10", images, Some(labels), 10)
}

/// Reads `test_batch.bin` from `dir`.
pub fn load_cifar10_test(dir: &Path) -> Result<Dataset> {
    let path = dir.join("test_batch.bin");
    let bytes = read_all(&path)?;
    let (images, labels) = parse_cifar_batch(&bytes, &path)?;
    Dataset::new("cifar10-test", images, Some(labels), 10)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Parses one batch file: a sequence of 3073-byte records.
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<Image>, Vec<usize>)> {
    if bytes.len() != CIFAR_RECORD * CIFAR_RECORDS_PER_BATCH {
        let complete = bytes.len() / CIFAR_RECORD;
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: format!(
                "short read: {} bytes, expected {}; truncated at offset {} (record {})",
                bytes.len(),
                CIFAR_RECORD * CIFAR_RECORDS_PER_BATCH,
                complete * CIFAR_RECORD,
                complete
            ),
        });
    }
    let mut images = Vec::with_capacity(CIFAR_RECORDS_PER_BATCH);
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_BATCH);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("label byte {label} > 9 at offset {}", i * CIFAR_RECORD),
            });
        }
        let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Image::new(32, 32, data)?);
        labels.push(label);
    }
    Ok((images, labels))
}

/// Class-conditional objects. Each image holds a disc filled with a grating
/// whose orientation and frequency identify the class, drawn at a random
/// position and in random colours. The background is lit from the top and the
/// disc is shaded from above, which fixes an upright direction for rotation
/// prediction.
pub fn gen_synthetic(num_classes: usize, per_class: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    use std::f64::consts::{PI, TAU};
    if num_classes < 2 {
        return Err(Error::contract("synthetic data needs at least two classes"));
    }
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::contract("synthetic image size must be positive"));
    }
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    let colour = |r: &mut rng::Rng| [r.random_range(0.2..1.0), r.random_range(0.2..1.0), r.random_range(0.2..1.0)];
    for i in 0..per_class {
        for class in 0..num_classes {
            let mut r = rng::stream(seed, &[0x5E7, class as u64, i as u64]);
            let light = r.random_range(0.1..0.25);
            let base = colour(&mut r);
            let theta = PI * (class as f64 + 0.5) / num_classes as f64 + r.random_range(-0.1..0.1);
            let (ct, st) = (theta.cos(), theta.sin());
            let freq = 3.0 + (class % 2) as f64 * 1.5 + r.random_range(-0.3..0.3);
            let phase = r.random_range(0.0..TAU);
            let radius = r.random_range(0.22..0.32);
            let (cx, cy) = (r.random_range(radius..1.0 - radius), r.random_range(radius..1.0 - radius));
            let ink = colour(&mut r);
            let contrast = r.random_range(0.25..0.45);
            let noise: Vec<f64> = (0..CHANNELS * h * w).map(|_| r.random_range(-0.06..0.06)).collect();
            let img = Image::from_fn(w, h, |c, y, x| {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                let mut val = 0.35 * base[c] + light * (1.0 - v);
                let (du, dv) = (u - cx, v - cy);
                if du * du + dv * dv < radius * radius {
                    let wave = (TAU * freq * (du * ct + dv * st) + phase).sin();
                    let shade = 1.0 - 0.8 * (dv / radius + 1.0) / 2.0;
                    val = 0.25 + ink[c] * (0.35 + contrast * wave) * (0.5 + 0.5 * shade);
                }
                (val + noise[(c * h + y) * w + x]).clamp(0.0, 1.0) as f32
            });
            images.push(img);
            labels.push(class);
        }
    }
    Dataset::new(format!("synthetic-{num_classes}x{per_class}"), images, Some(labels), num_classes)
}

/// One fold: `model` trains the fold network, `augment` scores policies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub model: Vec<usize>,
    pub augment: Vec<usize>,
}

/// Shuffles `0..n` once and deals it into `k` folds, each halved into
/// `(model, augment)` index lists.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k == 0 {
        return Err(Error::contract("K must be at least 1"));
    }
    if n < 2 * k {
        return Err(Error::contract(format!(
            "{n} samples cannot fill {k} folds with two halves each"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0xF01D]));
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = n / k + usize::from(fold < n % k);
        let chunk = &idx[start..start + size];
        start += size;
        let half = size / 2;
        folds.push(FoldSplit {
            k: fold,
            model: chunk[..half].to_vec(),
            augment: chunk[half..].to_vec(),
        });
    }
    Ok(folds)
}
