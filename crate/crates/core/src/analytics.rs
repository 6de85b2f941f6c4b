//! Rank correlation between evaluation metrics, activation similarity, and
//! per-model evaluation reports.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{train_moco, MocoConfig};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::nn::Encoder;
use crate::policy::{Augment, Pipeline};
use crate::rng;
use crate::sseval::{train_probe_split, ProbeConfig, ProbeTask};

/// Column order of the CSV report.
pub const CSV_HEADER: &str = "modelId,policyName,rotationTop1,jigsawTop1,supervisedTop1,infoNce,contrastiveTop1,epochs,seed";

const STREAM_STUDY: u64 = 0xC0;

/// Ranks starting at 1, with tied values sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("spearman inputs of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::contract("spearman needs at least three pairs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Rows are samples, columns are activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ActivationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(Error::shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(ActivationMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `vec(X~X') . vec(Y~Y')` where `~` drops the diagonal of the Gram matrix.
/// Uses `sum_{i != j} (x_i.x_j)(y_i.y_j) = ||X'Y||_F^2 - sum_i |x_i|^2 |y_i|^2`
/// so the `n x n` Gram matrices are never formed.
fn offdiag_inner(x: &ActivationMatrix, y: &ActivationMatrix) -> f64 {
    let mut cross = vec![0.0; x.cols * y.cols];
    let mut diag = 0.0;
    for i in 0..x.rows {
        let (xi, yi) = (x.row(i), y.row(i));
        for (a, &xa) in xi.iter().enumerate() {
            let line = &mut cross[a * y.cols..(a + 1) * y.cols];
            for (c, &yb) in line.iter_mut().zip(yi) {
                *c += xa * yb;
            }
        }
        let nx: f64 = xi.iter().map(|v| v * v).sum();
        let ny: f64 = yi.iter().map(|v| v * v).sum();
        diag += nx * ny;
    }
    cross.iter().map(|v| v * v).sum::<f64>() - diag
}

/// The RV2 coefficient: cosine similarity of the two Gram matrices with their
/// diagonals removed. Inputs are used as given, without centering.
pub fn rv2(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::shape(format!("RV2 needs equal row counts, got {} and {}", x.rows, y.rows)));
    }
    if x.data.iter().chain(&y.data).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("RV2 input".into()));
    }
    let xx = offdiag_inner(x, x);
    let yy = offdiag_inner(y, y);
    if !(xx > 0.0 && yy > 0.0) {
        return Err(Error::Undefined("RV2 with a zero off-diagonal Gram matrix".into()));
    }
    Ok(offdiag_inner(x, y) / (xx * yy).sqrt())
}

/// Evaluation of one pretrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub model_id: String,
    pub policy_name: String,
    pub rotation_top1: f64,
    pub jigsaw_top1: Option<f64>,
    pub supervised_top1: Option<f64>,
    /// Final-epoch InfoNCE.
    pub info_nce: f64,
    pub contrastive_top1: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let accs = [Some(self.rotation_top1), self.jigsaw_top1, self.supervised_top1, Some(self.contrastive_top1)];
        if accs.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::contract(format!("report {} has an accuracy outside [0, 1]", self.model_id)));
        }
        Ok(())
    }

    fn rounded(&self) -> EvalReport {
        let r = |v: f64| (v * 1e6).round() / 1e6;
        EvalReport {
            rotation_top1: r(self.rotation_top1),
            jigsaw_top1: self.jigsaw_top1.map(r),
            supervised_top1: self.supervised_top1.map(r),
            info_nce: r(self.info_nce),
            contrastive_top1: r(self.contrastive_top1),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Renders reports with floats rounded to six decimals.
pub fn render_reports(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::contract("no reports to emit"));
    }
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
            for r in reports {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{},{},{:.6},{:.6},{},{}",
                    csv_field(&r.model_id),
                    csv_field(&r.policy_name),
                    r.rotation_top1,
                    opt(r.jigsaw_top1),
                    opt(r.supervised_top1),
                    r.info_nce,
                    r.contrastive_top1,
                    r.epochs,
                    r.seed
                );
            }
        }
        ReportFormat::Jsonl => {
            for r in reports {
                let line = serde_json::to_string(&r.rounded()).expect("reports serialize");
                out.push_str(&line);
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    let text = render_reports(reports, format)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One model of a correlation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelSpec {
    pub pipeline: Pipeline,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct StudyConfig {
    pub moco: MocoConfig,
    pub probe: ProbeConfig,
    /// Fraction of the labelled data held out for probe evaluation.
    pub held_out_fraction: f64,
    pub jigsaw: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            moco: MocoConfig::default(),
            probe: ProbeConfig::default(),
            held_out_fraction: 0.2,
            jigsaw: true,
        }
    }
}

/// Probe accuracies of one frozen encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeScores {
    pub rotation: f64,
    pub jigsaw: Option<f64>,
    pub supervised: Option<f64>,
}

/// Trains the rotation probe, plus jigsaw when asked and supervised when the
/// data is labelled, on `train` and scores them on `held`.
pub fn probe_encoder(encoder: &Encoder, train: &Dataset, held: &Dataset, probe: &ProbeConfig, jigsaw: bool, seed: u64) -> Result<ProbeScores> {
    let rotation = train_probe_split(encoder, ProbeTask::rotation(), train, held, probe, rng::derive_seed(seed, &[0]))?.top1;
    let jigsaw = if jigsaw {
        Some(train_probe_split(encoder, ProbeTask::jigsaw(), train, held, probe, rng::derive_seed(seed, &[1]))?.top1)
    } else {
        None
    };
    let supervised = match (&train.labels, &held.labels) {
        (Some(_), Some(_)) => Some(
            train_probe_split(encoder, ProbeTask::supervised(train.num_classes), train, held, probe, rng::derive_seed(seed, &[2]))?.top1,
        ),
        _ => None,
    };
    Ok(ProbeScores { rotation, jigsaw, supervised })
}

/// Pretrains on `train` with `aug`, then probes the frozen query encoder.
pub fn pretrain_and_evaluate(
    model_id: &str,
    aug: &dyn Augment,
    train: &Dataset,
    held: &Dataset,
    moco: &MocoConfig,
    probe: &ProbeConfig,
    jigsaw: bool,
    seed: u64,
) -> Result<EvalReport> {
    let run = train_moco(train, aug, moco, seed, None)?;
    let last = run.log.last().ok_or_else(|| Error::contract("pretraining ran for zero epochs"))?;
    let scores = probe_encoder(&run.state.query, train, held, probe, jigsaw, seed)?;
    Ok(EvalReport {
        model_id: model_id.to_owned(),
        policy_name: aug.describe(),
        rotation_top1: scores.rotation,
        jigsaw_top1: scores.jigsaw,
        supervised_top1: scores.supervised,
        info_nce: last.loss,
        contrastive_top1: last.contrastive_top1,
        epochs: moco.epochs,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub reports: Vec<EvalReport>,
    /// Models that failed, with the reason.
    pub failures: Vec<(usize, String)>,
    pub rho_rotation: f64,
    pub rho_jigsaw: Option<f64>,
}

/// Trains one model per spec and correlates each self-supervised probe
/// accuracy with supervised probe accuracy.
pub fn run_correlation_study(specs: &[ModelSpec], data: &Dataset, cfg: &StudyConfig, seed: u64) -> Result<StudyResult> {
    if specs.len() < 3 {
        return Err(Error::contract("a correlation study needs at least three models"));
    }
    if data.labels.is_none() {
        return Err(Error::contract("a correlation study needs labelled data"));
    }
    let (train, held) = data.split(cfg.held_out_fraction, rng::derive_seed(seed, &[STREAM_STUDY]));
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let pipeline = spec.pipeline.clone().compile()?;
        let moco = MocoConfig {
            epochs: spec.epochs,
            ..cfg.moco.clone()
        };
        let model_seed = rng::derive_seed(seed, &[STREAM_STUDY, 1, i as u64]);
        match pretrain_and_evaluate(&format!("m{i:03}"), &pipeline, &train, &held, &moco, &cfg.probe, cfg.jigsaw, model_seed) {
            Ok(r) => reports.push(r),
            Err(e @ Error::Diverged(_)) => failures.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if reports.len() < 3 {
        return Err(Error::contract(format!("only {} models trained successfully", reports.len())));
    }
    let sup: Vec<f64> = reports.iter().map(|r| r.supervised_top1.expect("labelled data")).collect();
    let rot: Vec<f64> = reports.iter().map(|r| r.rotation_top1).collect();
    let rho_rotation = spearman(&rot, &sup)?;
    let rho_jigsaw = if cfg.jigsaw {
        let jig: Vec<f64> = reports.iter().map(|r| r.jigsaw_top1.expect("jigsaw enabled")).collect();
        Some(spearman(&jig, &sup)?)
    } else {
        None
    };
    Ok(StudyResult {
        reports,
        failures,
        rho_rotation,
        rho_jigsaw,
    })
}
