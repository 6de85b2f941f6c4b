//! Command-line front end: argument parsing, run directories and the
//! subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analytics::{self, render_reports, run_correlation_study, EvalReport, ModelSpec, ReportFormat, StudyConfig};
use crate::config::{Profile, RunConfig};
use crate::contrastive::{evaluate_infonce, train_moco, EncoderState};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::imageops::OpId;
use crate::policy::{Pipeline, Policy, RandAugmentConfig};
use crate::rng;
use crate::search::randaugment::default_grid;
use crate::search::selfaugment::{base_candidates, base_pipeline, short_epochs, write_trial_log};
use crate::search::{prepare, run_selfrandaugment, search, select_base_policy, BasePolicyMode};

#[derive(Debug, Parser)]
#[command(name = "selfaug", version, about = "Augmentation policy search for contrastive pretraining")]
pub struct Cli {
    /// TOML configuration layered over the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in defaults: `desk` or `paper`.
    #[arg(long, global = true, default_value = "desk")]
    pub profile: String,
    /// Overrides the configured seed and SELFAUG_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pick the base policy from single-transform pretraining runs.
    FindBase,
    /// Run the fold-based policy search.
    Search {
        /// minRot, minInfo, maxInfo, minimax or weightedMinimax(a,b).
        #[arg(long)]
        loss_kind: Option<String>,
        /// Policy JSON used as the base instead of searching singles.
        #[arg(long)]
        base_policy: Option<PathBuf>,
    },
    /// Pretrain with flip and crop plus an optional policy.
    Pretrain {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Probe a pretrained checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// rotation, jigsaw or supervised; rotation is always included.
        #[arg(long, default_value = "rotation")]
        task: String,
    },
    /// Correlate self-supervised and supervised probe accuracy over many models.
    Correlate {
        /// JSON list of `{pipeline, epochs}`; a built-in study when absent.
        #[arg(long)]
        study: Option<PathBuf>,
    },
    /// Grid search RandAugment's (n, m) by rotation accuracy.
    Randaugment {
        /// Comma-separated `n:m` points, e.g. `1:4,2:9`.
        #[arg(long)]
        grid: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::FindBase => "find-base",
            Command::Search { .. } => "search",
            Command::Pretrain { .. } => "pretrain",
            Command::Probe { .. } => "probe",
            Command::Correlate { .. } => "correlate",
            Command::Randaugment { .. } => "randaugment",
        }
    }
}

/// Profile, then config file, then SELFAUG_SEED, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let profile: Profile = cli.profile.parse()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path, profile)?,
        None => RunConfig::profile(profile),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    if let Command::Search { loss_kind: Some(k), .. } = &cli.command {
        cfg.search.loss_kind = k.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    files: Vec<ManifestEntry>,
}

/// A run's output directory; every file written through it is listed in the
/// manifest.
pub struct RunDir {
    path: PathBuf,
    command: &'static str,
    seed: u64,
    files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &'static str) -> Result<Self> {
        let path = cfg.out_dir.join(format!("{command}-s{}", cfg.seed));
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let mut dir = RunDir {
            path,
            command,
            seed: cfg.seed,
            files: Vec::new(),
        };
        dir.write("config.toml", cfg.to_toml().as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.files.retain(|f| f.path != name);
        self.files.push(ManifestEntry {
            path: name.to_owned(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json` and returns the directory.
    pub fn finish(mut self) -> Result<PathBuf> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            files: std::mem::take(&mut self.files),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let p = self.path.join("manifest.json");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(self.path)
    }
}

fn read_policy(path: &Path) -> Result<Policy> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Policy::from_json(&bytes)
}

fn policy_bytes(p: &Policy) -> Vec<u8> {
    let mut b = p.to_canonical_json().into_bytes();
    b.push(b'\n');
    b
}

/// Parses `n:m` pairs separated by commas.
pub fn parse_grid(spec: &str) -> Result<Vec<(usize, u32)>> {
    spec.split(',')
        .map(|item| {
            let bad = || Error::parse("grid", format!("expected n:m, got {item:?}"));
            let (n, m) = item.trim().split_once(':').ok_or_else(bad)?;
            Ok((n.trim().parse().map_err(|_| bad())?, m.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Twelve models spanning flip and crop alone, RandAugment on top of it, and
/// single transforms.
pub fn default_study(epochs: usize) -> Vec<ModelSpec> {
    let mut pipelines = vec![Pipeline::base()];
    for (n, m) in [(1, 5), (2, 9), (3, 11)] {
        pipelines.push(
            Pipeline::base()
                .named(format!("base+ra(n={n},m={m})"))
                .with_randaugment(RandAugmentConfig::new(n, m))
                .expect("valid RandAugment settings"),
        );
    }
    for op in [
        OpId::Rotate,
        OpId::Invert,
        OpId::Solarize,
        OpId::Cutout,
        OpId::Equalize,
        OpId::Color,
        OpId::ShearX,
        OpId::TranslateY,
    ] {
        pipelines.push(base_pipeline(&Policy::single_op(op)));
    }
    pipelines.into_iter().map(|pipeline| ModelSpec { pipeline, epochs }).collect()
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    cfg.dataset.load(rng::derive_seed(cfg.seed, &[0xDA7A]))
}

/// Runs one subcommand and returns its run directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let cfg = resolve_config(cli)?;
    let seed = cfg.seed;
    match &cli.command {
        Command::FindBase => {
            let data = load_data(&cfg)?;
            let mut dir = RunDir::create(&cfg, "find-base")?;
            let sel = select_base_policy(
                &data,
                &base_candidates(),
                &cfg.moco,
                &cfg.probe,
                short_epochs(cfg.moco.epochs, cfg.search.short_epoch_fraction),
                seed,
            )?;
            dir.write("base_policy.json", &policy_bytes(&sel.policy))?;
            dir.write_json("base_candidates.json", &sel.candidates)?;
            dir.finish()
        }
        Command::Search { base_policy, .. } => {
            let mut scfg = cfg.search_config();
            if let Some(p) = base_policy {
                scfg.base_policy = BasePolicyMode::Fixed(read_policy(p)?);
            }
            let data = load_data(&cfg)?;
            let mut dir = RunDir::create(&cfg, "search")?;
            let prepared = prepare(&data, &scfg, &cfg.moco, seed)?;
            let outcome = search(&prepared, scfg.loss_kind, &scfg, seed)?;
            dir.write("base_policy.json", &policy_bytes(&prepared.base))?;
            if let Some(sel) = &prepared.base_selection {
                dir.write_json("base_candidates.json", &sel.candidates)?;
            }
            dir.write_json("normalizer.json", &prepared.normalizer)?;
            let mut log = Vec::new();
            write_trial_log(&outcome.trials, &mut log)?;
            dir.write("trials.jsonl", &log)?;
            dir.write("policy.json", &policy_bytes(&outcome.policy))?;
            dir.finish()
        }
        Command::Pretrain { policy } => {
            let mut pipeline = Pipeline::base();
            if let Some(p) = policy {
                let p = read_policy(p)?;
                pipeline = pipeline.named(format!("base+{}", p.name())).with_policy(p);
            }
            let data = load_data(&cfg)?;
            let mut dir = RunDir::create(&cfg, "pretrain")?;
            let mut log = Vec::new();
            let run = train_moco(&data, &pipeline, &cfg.moco, seed, Some(&mut log))?;
            dir.write("train_log.jsonl", &log)?;
            dir.write_json("pipeline.json", &pipeline)?;
            dir.write("checkpoint.saug", &run.state.to_checkpoint())?;
            dir.finish()
        }
        Command::Probe { checkpoint, task } => {
            let (jigsaw, supervised) = match task.as_str() {
                "rotation" => (false, false),
                "jigsaw" => (true, false),
                "supervised" => (false, true),
                other => return Err(Error::Config(format!("unknown probe task {other:?}"))),
            };
            let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
            let state = EncoderState::from_checkpoint(&bytes)?;
            let mut data = load_data(&cfg)?;
            if supervised && data.labels.is_none() {
                return Err(Error::contract("the supervised probe needs labelled data"));
            }
            if !supervised {
                data.labels = None;
            }
            let mut dir = RunDir::create(&cfg, "probe")?;
            let (train, held) = data.split(cfg.probe.held_out_fraction, rng::derive_seed(seed, &[0x9E0]));
            let scores = analytics::probe_encoder(&state.query, &train, &held, &cfg.probe, jigsaw, seed)?;
            let (info_nce, contrastive_top1) =
                evaluate_infonce(&state, &held.images, &Pipeline::base(), cfg.moco.temperature, cfg.moco.batch_size, seed)?;
            let report = EvalReport {
                model_id: checkpoint.display().to_string(),
                policy_name: "checkpoint".into(),
                rotation_top1: scores.rotation,
                jigsaw_top1: scores.jigsaw,
                supervised_top1: scores.supervised,
                info_nce,
                contrastive_top1,
                epochs: cfg.moco.epochs,
                seed,
            };
            dir.write_json("report.json", &report)?;
            dir.finish()
        }
        Command::Correlate { study } => {
            let specs: Vec<ModelSpec> = match study {
                Some(p) => {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_slice(&bytes).map_err(|e| Error::parse("study", e.to_string()))?
                }
                None => default_study(cfg.moco.epochs),
            };
            let data = load_data(&cfg)?;
            let mut dir = RunDir::create(&cfg, "correlate")?;
            let study_cfg = StudyConfig {
                moco: cfg.moco.clone(),
                probe: cfg.probe.clone(),
                held_out_fraction: cfg.probe.held_out_fraction,
                jigsaw: true,
            };
            let result = run_correlation_study(&specs, &data, &study_cfg, seed)?;
            dir.write("reports.csv", render_reports(&result.reports, ReportFormat::Csv)?.as_bytes())?;
            dir.write("reports.jsonl", render_reports(&result.reports, ReportFormat::Jsonl)?.as_bytes())?;
            dir.write_json(
                "correlation.json",
                &serde_json::json!({
                    "rhoRotation": result.rho_rotation,
                    "rhoJigsaw": result.rho_jigsaw,
                    "failures": result.failures,
                }),
            )?;
            dir.finish()
        }
        Command::Randaugment { grid } => {
            let grid = match grid {
                Some(g) => parse_grid(g)?,
                None => default_grid(),
            };
            let data = load_data(&cfg)?;
            let mut dir = RunDir::create(&cfg, "randaugment")?;
            let out = run_selfrandaugment(&data, &grid, &Pipeline::base(), &cfg.moco, &cfg.probe, seed)?;
            dir.write_json("best.json", &out.best)?;
            dir.write_json("grid.json", &out.results)?;
            let reports: Vec<EvalReport> = out.results.iter().filter_map(|r| r.report.clone()).collect();
            if !reports.is_empty() {
                dir.write("reports.csv", render_reports(&reports, ReportFormat::Csv)?.as_bytes())?;
            }
            dir.finish()
        }
    }
}

/// Exit status for a finished command: 0 on success, 2 on any runtime error.
pub fn exit_code(result: &Result<PathBuf>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(_) => 2,
    }
}
