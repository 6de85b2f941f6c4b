//! Objectives that score a candidate augmentation on a frozen fold model.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{evaluate_infonce, EncoderState};
use crate::error::{Error, Result};
use crate::imageops::Image;
use crate::policy::Augment;
use crate::rng;
use crate::sseval::{extract_features, rotate_batch, FittedProbe};

const STREAM_ROT_VIEW: u64 = 0x70;

/// What a policy search minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LossKind {
    /// Rotation-prediction cross-entropy.
    MinRot,
    /// InfoNCE.
    MinInfo,
    /// Negated InfoNCE.
    MaxInfo,
    /// Normalized rotation loss minus normalized InfoNCE.
    Minimax,
    /// `lambda_rot * rot - lambda_nce * nce` on normalized losses.
    WeightedMinimax { lambda_rot: f64, lambda_nce: f64 },
}

impl LossKind {
    pub const BASIC: [LossKind; 4] = [LossKind::MinRot, LossKind::MinInfo, LossKind::MaxInfo, LossKind::Minimax];

    pub fn needs_rotation(self) -> bool {
        matches!(self, LossKind::MinRot | LossKind::Minimax | LossKind::WeightedMinimax { .. })
    }

    pub fn needs_infonce(self) -> bool {
        !matches!(self, LossKind::MinRot)
    }

    pub fn validate(self) -> Result<()> {
        if let LossKind::WeightedMinimax { lambda_rot, lambda_nce } = self {
            if !(lambda_rot.is_finite() && lambda_nce.is_finite() && lambda_rot >= 0.0 && lambda_nce >= 0.0) {
                return Err(Error::Config(format!("loss weights ({lambda_rot}, {lambda_nce}) must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::MinRot => f.write_str("minRot"),
            LossKind::MinInfo => f.write_str("minInfo"),
            LossKind::MaxInfo => f.write_str("maxInfo"),
            LossKind::Minimax => f.write_str("minimax"),
            LossKind::WeightedMinimax { lambda_rot, lambda_nce } => {
                write!(f, "weightedMinimax({lambda_rot},{lambda_nce})")
            }
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::parse("lossKind", format!("unknown loss {s:?}"));
        let kind = match s.trim() {
            "minRot" => LossKind::MinRot,
            "minInfo" => LossKind::MinInfo,
            "maxInfo" => LossKind::MaxInfo,
            "minimax" => LossKind::Minimax,
            other => {
                let args = other
                    .strip_prefix("weightedMinimax(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?;
                let (a, b) = args.split_once(',').ok_or_else(bad)?;
                LossKind::WeightedMinimax {
                    lambda_rot: a.trim().parse().map_err(|_| bad())?,
                    lambda_nce: b.trim().parse().map_err(|_| bad())?,
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl TryFrom<String> for LossKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossKind> for String {
    fn from(k: LossKind) -> String {
        k.to_string()
    }
}

/// Expected rotation and InfoNCE losses under the base augmentation, used to
/// put both terms of the minimax objectives on a common scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LossNormalizer {
    pub mean_rot: f64,
    pub mean_nce: f64,
}

impl LossNormalizer {
    pub fn new(mean_rot: f64, mean_nce: f64) -> Result<Self> {
        let n = LossNormalizer { mean_rot, mean_nce };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_rot > 0.0 && self.mean_nce > 0.0 && self.mean_rot.is_finite() && self.mean_nce.is_finite()) {
            return Err(Error::contract(format!(
                "normalizer means ({}, {}) must be positive and finite",
                self.mean_rot, self.mean_nce
            )));
        }
        Ok(())
    }

    /// Averages per-fold raw losses.
    pub fn from_folds(losses: &[RawLosses]) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::contract("normalizer needs at least one fold"));
        }
        let n = losses.len() as f64;
        let mean = |f: fn(&RawLosses) -> Option<f64>, what: &str| -> Result<f64> {
            losses
                .iter()
                .map(|l| f(l).ok_or_else(|| Error::contract(format!("fold loss without {what}"))))
                .sum::<Result<f64>>()
                .map(|s| s / n)
        };
        LossNormalizer::new(mean(|l| l.rot, "rotation")?, mean(|l| l.nce, "InfoNCE")?)
    }
}

/// The raw losses of one candidate on one fold; absent terms were not needed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RawLosses {
    pub rot: Option<f64>,
    pub nce: Option<f64>,
}

/// Combines raw losses into the objective for `kind`.
pub fn combine(kind: LossKind, raw: RawLosses, norm: &LossNormalizer) -> Result<f64> {
    let rot = || raw.rot.ok_or_else(|| Error::contract(format!("{kind} needs the rotation loss")));
    let nce = || raw.nce.ok_or_else(|| Error::contract(format!("{kind} needs the InfoNCE loss")));
    let score = match kind {
        LossKind::MinRot => rot()?,
        LossKind::MinInfo => nce()?,
        LossKind::MaxInfo => -nce()?,
        LossKind::Minimax => rot()? / norm.mean_rot - nce()? / norm.mean_nce,
        LossKind::WeightedMinimax { lambda_rot, lambda_nce } => {
            lambda_rot * rot()? / norm.mean_rot - lambda_nce * nce()? / norm.mean_nce
        }
    };
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("{kind} score {score} (raw {raw:?})")));
    }
    Ok(score)
}

/// A frozen fold network with its rotation head and the images it scores
/// candidates on.
#[derive(Debug, Clone)]
pub struct FoldModel {
    pub fold_id: usize,
    pub state: EncoderState,
    pub rotation: FittedProbe,
    pub augment_images: Vec<Image>,
    pub temperature: f64,
    pub batch_size: usize,
}

impl FoldModel {
    /// Rotation cross-entropy on one augmented view of each scoring image.
    pub fn rotation_loss(&self, aug: &dyn Augment, seed: u64) -> Result<f64> {
        let views: Vec<Image> = self
            .augment_images
            .par_iter()
            .enumerate()
            .map(|(i, img)| aug.augment(img, &mut rng::stream(seed, &[STREAM_ROT_VIEW, i as u64])))
            .collect::<Result<_>>()?;
        let (xs, ys) = rotate_batch(&views)?;
        let f = extract_features(&self.state.query, &xs)?;
        Ok(self.rotation.evaluate(&f, &ys)?.0)
    }

    /// InfoNCE on augmented view pairs of the scoring images.
    pub fn infonce_loss(&self, aug: &dyn Augment, seed: u64) -> Result<f64> {
        Ok(evaluate_infonce(&self.state, &self.augment_images, aug, self.temperature, self.batch_size, seed)?.0)
    }

    /// The raw losses `kind` needs, with the model and head left untouched.
    pub fn raw_losses(&self, kind: LossKind, aug: &dyn Augment, seed: u64) -> Result<RawLosses> {
        Ok(RawLosses {
            rot: if kind.needs_rotation() { Some(self.rotation_loss(aug, seed)?) } else { None },
            nce: if kind.needs_infonce() { Some(self.infonce_loss(aug, seed)?) } else { None },
        })
    }
}

/// Scores one augmentation on a fold under `kind`.
pub fn policy_loss(kind: LossKind, fold: &FoldModel, aug: &dyn Augment, norm: &LossNormalizer, seed: u64) -> Result<f64> {
    let raw = fold.raw_losses(kind, aug, seed)?;
    combine(kind, raw, norm)
}
