//! Policy search over K folds: a base augmentation trains one frozen model per
//! fold, then TPE proposes sub-policies scored on each fold's held-back half,
//! and the best few of every iteration are merged into the final policy.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{combine, FoldModel, LossKind, LossNormalizer, RawLosses};
use super::tpe::{tpe_suggest, Dim, Observation, Space, TpeConfig};
use crate::contrastive::{train_moco, EpochLog, MocoConfig};
use crate::dataio::{kfold_split, Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::imageops::OpId;
use crate::policy::{Augment, Pipeline, Policy, Provenance, SubPolicy, TransformSpec};
use crate::rng;
use crate::sseval::{train_probe, ProbeConfig, ProbeTask};

const STREAM_BASE: u64 = 0xBA5E;
const STREAM_FOLD: u64 = 0xF0;
const STREAM_SCORE: u64 = 0xF1;
const STREAM_TRIAL: u64 = 0xF2;
const STREAM_VIEW: u64 = 0xF3;

/// How the base augmentation is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum BasePolicyMode {
    /// Short pretraining runs on every single-transform candidate.
    SearchSingles,
    /// Use this policy as given.
    Fixed(Policy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SearchConfig {
    /// Folds.
    pub k: usize,
    /// Search iterations per fold.
    pub t: usize,
    /// Trials per iteration.
    pub b: usize,
    /// Sub-policies kept per iteration.
    pub p: usize,
    /// Transforms per candidate sub-policy.
    pub n_tau_search: usize,
    pub loss_kind: LossKind,
    pub base_policy: BasePolicyMode,
    /// When set, the operations of every candidate are fixed to this sequence
    /// and only probabilities and magnitudes are searched.
    pub fixed_ops: Option<Vec<OpId>>,
    /// Share of the pretraining epochs spent on each base-policy candidate.
    pub short_epoch_fraction: f64,
    pub tpe: TpeConfig,
    /// Rotation probes of the base sweep and of the fold models. A run
    /// configuration fills this from its own probe section.
    #[serde(skip)]
    pub probe: ProbeConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k: 2,
            t: 2,
            b: 20,
            p: 3,
            n_tau_search: 2,
            loss_kind: LossKind::Minimax,
            base_policy: BasePolicyMode::SearchSingles,
            fixed_ops: None,
            short_epoch_fraction: 0.1,
            tpe: TpeConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn paper() -> Self {
        SearchConfig {
            k: 5,
            t: 2,
            b: 200,
            p: 10,
            probe: ProbeConfig::paper(),
            ..SearchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.t == 0 || self.b == 0 || self.p == 0 || self.n_tau_search == 0 {
            return Err(Error::Config("K, T, B, P and nTauSearch must all be at least 1".into()));
        }
        if self.p > self.b {
            return Err(Error::Config(format!("P = {} exceeds B = {}", self.p, self.b)));
        }
        if let Some(ops) = &self.fixed_ops {
            if ops.len() != self.n_tau_search {
                return Err(Error::Config(format!(
                    "{} fixed operations for {} transform slots",
                    ops.len(),
                    self.n_tau_search
                )));
            }
        }
        if !(self.short_epoch_fraction > 0.0 && self.short_epoch_fraction <= 1.0) {
            return Err(Error::Config(format!("short epoch fraction {} outside (0, 1]", self.short_epoch_fraction)));
        }
        self.loss_kind.validate()?;
        self.tpe.validate()?;
        self.probe.validate()
    }
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Trial {
    pub fold_id: usize,
    pub iter_id: usize,
    pub trial_idx: usize,
    pub candidate: Vec<TransformSpec>,
    pub loss_kind: LossKind,
    pub score: f64,
    /// Seed of the stream that proposed the candidate.
    pub seed: u64,
}

/// Writes one JSON object per trial.
pub fn write_trial_log(trials: &[Trial], mut w: impl Write) -> Result<()> {
    for t in trials {
        let line = serde_json::to_string(t).expect("trials serialize");
        writeln!(w, "{line}").map_err(|e| Error::io("trial log", e))?;
    }
    Ok(())
}

/// The 15 searchable operations and random-resize-crop, each as a policy
/// applied every time.
pub fn base_candidates() -> Vec<Policy> {
    OpId::SEARCHABLE
        .iter()
        .chain(&[OpId::RandomResizeCrop])
        .map(|&op| Policy::single_op(op))
        .collect()
}

/// Training-time augmentation around a base policy: random flip, then the policy.
pub fn base_pipeline(policy: &Policy) -> Pipeline {
    Pipeline::flip_only()
        .named(format!("flip+{}", policy.name()))
        .with_policy(policy.clone())
}

/// Pretraining epochs of each base candidate.
pub fn short_epochs(full: usize, fraction: f64) -> usize {
    ((full as f64 * fraction).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BaseCandidate {
    pub policy_name: String,
    /// Held-out rotation loss; absent when training diverged.
    pub rotation_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseSelection {
    pub policy: Policy,
    pub candidates: Vec<BaseCandidate>,
}

/// Trains a short MoCo run per candidate and keeps the one whose frozen
/// encoder gives the lowest held-out rotation loss. Every candidate starts
/// from the same initialization; ties go to the earlier candidate.
pub fn select_base_policy(
    data: &Dataset,
    candidates: &[Policy],
    moco: &MocoConfig,
    probe: &ProbeConfig,
    short_epochs: usize,
    seed: u64,
) -> Result<BaseSelection> {
    if candidates.is_empty() {
        return Err(Error::contract("no base-policy candidates"));
    }
    let cfg = MocoConfig {
        epochs: short_epochs,
        ..moco.clone()
    };
    let run_seed = rng::derive_seed(seed, &[STREAM_BASE]);
    let results: Vec<Result<f64>> = candidates
        .par_iter()
        .map(|c| {
            let run = train_moco(data, &base_pipeline(c), &cfg, run_seed, None)?;
            let r = train_probe(&run.state.query, ProbeTask::rotation(), data, probe, run_seed)?;
            Ok(r.eval_loss)
        })
        .collect();
    let mut summary = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, usize)> = None;
    for (i, (c, r)) in candidates.iter().zip(results).enumerate() {
        match r {
            Ok(loss) => {
                if best.is_none_or(|(b, _)| loss < b) {
                    best = Some((loss, i));
                }
                summary.push(BaseCandidate {
                    policy_name: c.name().to_owned(),
                    rotation_loss: Some(loss),
                    error: None,
                });
            }
            Err(e @ Error::Diverged(_)) => summary.push(BaseCandidate {
                policy_name: c.name().to_owned(),
                rotation_loss: None,
                error: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    let (_, i) = best.ok_or_else(|| Error::Diverged("every base-policy candidate diverged".into()))?;
    Ok(BaseSelection {
        policy: candidates[i].clone(),
        candidates: summary,
    })
}

/// Everything the search needs before the first trial: the base pipeline,
/// one frozen model per fold, and the loss normalizer.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub base: Policy,
    pub base_selection: Option<BaseSelection>,
    pub folds: Vec<FoldModel>,
    pub fold_logs: Vec<Vec<EpochLog>>,
    pub normalizer: LossNormalizer,
    seed: u64,
}

impl Prepared {
    pub fn base_pipeline(&self) -> Pipeline {
        base_pipeline(&self.base)
    }

    fn score_seed(&self, fold: usize) -> u64 {
        rng::derive_seed(self.seed, &[STREAM_SCORE, fold as u64])
    }
}

/// One augmented view of every image, each from its own indexed stream.
fn augment_once(data: &Dataset, aug: &dyn Augment, seed: u64) -> Result<Dataset> {
    let images = data
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| aug.augment(img, &mut rng::stream(seed, &[STREAM_VIEW, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: data.name.clone(),
        images,
        labels: data.labels.clone(),
        num_classes: data.num_classes,
    })
}

fn train_fold(
    data: &Dataset,
    split: &FoldSplit,
    base: &Pipeline,
    moco: &MocoConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<(FoldModel, Vec<EpochLog>)> {
    let dm = data.select(&split.model);
    let da = data.select(&split.augment);
    let attempt = |a: u64| -> Result<(FoldModel, Vec<EpochLog>)> {
        let s = rng::derive_seed(seed, &[STREAM_FOLD, split.k as u64, a]);
        let run = train_moco(&dm, base, moco, s, None)?;
        // The head sees the base distribution it will later score candidates on.
        let views = augment_once(&dm, base, s)?;
        let rot = train_probe(&run.state.query, ProbeTask::rotation(), &views, probe, s)?;
        Ok((
            FoldModel {
                fold_id: split.k,
                state: run.state,
                rotation: rot.probe,
                augment_images: da.images.clone(),
                temperature: moco.temperature,
                batch_size: moco.batch_size,
            },
            run.log,
        ))
    };
    match attempt(0) {
        Err(Error::Diverged(first)) => attempt(1).map_err(|e| match e {
            Error::Diverged(second) => {
                Error::Diverged(format!("fold {} diverged twice: {first}; {second}", split.k))
            }
            other => other,
        }),
        other => other,
    }
}

/// Picks or takes the base policy, trains the fold models on the base
/// augmentation and measures the base losses that normalize the objectives.
pub fn prepare(data: &Dataset, cfg: &SearchConfig, moco: &MocoConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    moco.validate()?;
    let (base, base_selection) = match &cfg.base_policy {
        BasePolicyMode::Fixed(p) => (p.clone(), None),
        BasePolicyMode::SearchSingles => {
            let sel = select_base_policy(
                data,
                &base_candidates(),
                moco,
                &cfg.probe,
                short_epochs(moco.epochs, cfg.short_epoch_fraction),
                seed,
            )?;
            (sel.policy.clone(), Some(sel))
        }
    };
    let pipeline = base_pipeline(&base);
    let splits = kfold_split(data.len(), cfg.k, rng::derive_seed(seed, &[STREAM_FOLD]))?;
    let trained: Vec<(FoldModel, Vec<EpochLog>)> = splits
        .par_iter()
        .map(|s| train_fold(data, s, &pipeline, moco, &cfg.probe, seed))
        .collect::<Result<_>>()?;
    let (folds, fold_logs): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    let mut prepared = Prepared {
        base,
        base_selection,
        folds,
        fold_logs,
        normalizer: LossNormalizer { mean_rot: 1.0, mean_nce: 1.0 },
        seed,
    };
    let raw: Vec<RawLosses> = prepared
        .folds
        .iter()
        .map(|f| f.raw_losses(LossKind::Minimax, &pipeline, prepared.score_seed(f.fold_id)))
        .collect::<Result<_>>()?;
    prepared.normalizer = LossNormalizer::from_folds(&raw)?;
    Ok(prepared)
}

/// The candidate space: per slot an operation choice (unless fixed) plus
/// probability and magnitude in `[0, 1]`.
pub fn candidate_space(cfg: &SearchConfig) -> Space {
    let mut dims = Vec::new();
    for _ in 0..cfg.n_tau_search {
        if cfg.fixed_ops.is_none() {
            dims.push(Dim::Categorical { n: OpId::SEARCHABLE.len() });
        }
        dims.push(Dim::Unit);
        dims.push(Dim::Unit);
    }
    Space { dims }
}

pub fn decode_candidate(x: &[f64], cfg: &SearchConfig) -> Result<Vec<TransformSpec>> {
    let width = if cfg.fixed_ops.is_some() { 2 } else { 3 };
    if x.len() != width * cfg.n_tau_search {
        return Err(Error::shape(format!("candidate of length {} for {} slots", x.len(), cfg.n_tau_search)));
    }
    x.chunks(width)
        .enumerate()
        .map(|(slot, c)| {
            let (op, p, lambda) = match &cfg.fixed_ops {
                Some(ops) => (ops[slot], c[0], c[1]),
                None => (OpId::SEARCHABLE[c[0] as usize], c[1], c[2]),
            };
            TransformSpec::new(op, p, lambda)
        })
        .collect()
}

/// Keeps the `p` lowest-scoring trials; equal scores are ordered by seed.
pub fn top_p(trials: &[Trial], p: usize) -> Vec<Trial> {
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.seed.cmp(&b.seed)));
    sorted.truncate(p);
    sorted
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub policy: Policy,
    /// Every scored trial in fold, iteration, trial order.
    pub trials: Vec<Trial>,
    /// Trials whose score was not finite, with the diagnostic.
    pub rejected: Vec<(usize, usize, usize, String)>,
}

struct FoldSearch {
    selected: Vec<Trial>,
    trials: Vec<Trial>,
    rejected: Vec<(usize, usize, usize, String)>,
}

fn search_fold(prepared: &Prepared, fold: &FoldModel, kind: LossKind, cfg: &SearchConfig, seed: u64) -> Result<FoldSearch> {
    let space = candidate_space(cfg);
    let base = prepared.base_pipeline();
    let score_seed = prepared.score_seed(fold.fold_id);
    let mut history: Vec<Observation> = Vec::new();
    let mut out = FoldSearch {
        selected: Vec::new(),
        trials: Vec::new(),
        rejected: Vec::new(),
    };
    for iter in 0..cfg.t {
        let mut iteration = Vec::with_capacity(cfg.b);
        for idx in 0..cfg.b {
            let trial_seed = rng::derive_seed(seed, &[STREAM_TRIAL, fold.fold_id as u64, iter as u64, idx as u64]);
            let x = tpe_suggest(&history, &space, &cfg.tpe, &mut rng::stream(trial_seed, &[]))?;
            let candidate = decode_candidate(&x, cfg)?;
            let sub = SubPolicy::new(candidate.clone())?;
            let name = format!("candidate-{}-{iter}-{idx}", fold.fold_id);
            let aug = base.clone().with_policy(Policy::new(name, vec![sub])?);
            let scored = fold
                .raw_losses(kind, &aug, score_seed)
                .and_then(|raw| combine(kind, raw, &prepared.normalizer));
            let score = match scored {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => {
                    out.rejected.push((fold.fold_id, iter, idx, e.to_string()));
                    continue;
                }
                Err(e) => return Err(e),
            };
            history.push(Observation { x, score });
            iteration.push(Trial {
                fold_id: fold.fold_id,
                iter_id: iter,
                trial_idx: idx,
                candidate,
                loss_kind: kind,
                score,
                seed: trial_seed,
            });
        }
        if iteration.len() < cfg.p {
            return Err(Error::NonFinite(format!(
                "fold {} iteration {iter}: only {} of {} trials scored",
                fold.fold_id,
                iteration.len(),
                cfg.b
            )));
        }
        out.selected.extend(top_p(&iteration, cfg.p));
        out.trials.extend(iteration);
    }
    Ok(out)
}

/// Runs the policy search for one objective on prepared fold models. The
/// result holds `K * T * P` sub-policies, ordered by fold, iteration and rank.
pub fn search(prepared: &Prepared, kind: LossKind, cfg: &SearchConfig, seed: u64) -> Result<SearchOutcome> {
    cfg.validate()?;
    kind.validate()?;
    let per_fold: Vec<FoldSearch> = prepared
        .folds
        .par_iter()
        .map(|f| search_fold(prepared, f, kind, cfg, seed))
        .collect::<Result<_>>()?;
    let mut subs = Vec::new();
    let mut provenance = Provenance {
        loss_kind: Some(kind.to_string()),
        ..Provenance::default()
    };
    let mut trials = Vec::new();
    let mut rejected = Vec::new();
    for f in per_fold {
        for t in &f.selected {
            subs.push(SubPolicy::new(t.candidate.clone())?);
            provenance.seeds.push(t.seed);
            provenance.fold_ids.push(t.fold_id);
        }
        trials.extend(f.trials);
        rejected.extend(f.rejected);
    }
    let policy = Policy::new(format!("selfaugment-{kind}"), subs)?.with_provenance(provenance);
    Ok(SearchOutcome {
        policy,
        trials,
        rejected,
    })
}

#[derive(Debug, Clone)]
pub struct SelfAugmentRun {
    pub prepared: Prepared,
    pub outcome: SearchOutcome,
}

/// Base selection, fold training and search with `cfg.loss_kind`.
pub fn run_selfaugment(data: &Dataset, cfg: &SearchConfig, moco: &MocoConfig, seed: u64) -> Result<SelfAugmentRun> {
    let prepared = prepare(data, cfg, moco, seed)?;
    let outcome = search(&prepared, cfg.loss_kind, cfg, seed)?;
    Ok(SelfAugmentRun { prepared, outcome })
}
