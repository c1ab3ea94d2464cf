//! Mini-batch training with Adam, per-fold model selection on dev macro-F1,
//! cross-validation and run manifests.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{assign_folds, to_conll_string, CorpusError, FoldAssignment, LabelSet, LabeledSequence};
use crate::embeddings::collapse_to_tokens;
use crate::evaluation::{evaluate_with, EvalError, MetricsReport, ReportMeta};
use crate::gazetteer::hex;
use crate::network::{
    build_inputs, decode, loss_and_grad, Model, ModelConfig, ModelInput, ModelParams, NetworkError, Resources,
    SequenceBatch,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    0.01
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> Option<usize> {
    Some(10)
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_folds() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs without dev improvement before stopping; `None` disables.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    /// Global gradient-norm cap, off by default.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            patience: default_patience(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            grad_clip: None,
            seed: 0,
            folds: default_folds(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        Ok(())
    }
}

/// Adam with the weight-decay term added to the gradient before the moment
/// updates. Non-finite parameters (the fixed CRF transitions) are skipped.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, _, p), (_, _, g)), ((_, _, m), (_, _, v))) in tensors {
            for i in 0..p.len() {
                if !p[i].is_finite() {
                    continue;
                }
                let gi = g[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Euclidean norm over all finite-parameter gradient entries.
pub fn grad_norm(grad: &ModelParams) -> f64 {
    grad.tensors()
        .iter()
        .flat_map(|(_, _, v)| v.iter())
        .filter(|x| x.is_finite())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Batches of positions into `ids` for one epoch: ids are sorted, shuffled
/// by a generator keyed on `(seed, epoch)`, then chunked.
pub fn batch_order(ids: &[&str], seed: u64, epoch: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(ids[b]).then(a.cmp(&b)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sequence negative log-likelihood over the epoch.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_macro_f1: Option<f64>,
}

/// What one call to [`train_fold`] did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_report: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: Model,
    pub record: FoldRecord,
}

fn prepare(
    seqs: &[LabeledSequence],
    resources: &Resources,
    labels: &LabelSet,
    config: &ModelConfig,
) -> Result<Vec<ModelInput>, NetworkError> {
    seqs.par_iter().map(|s| build_inputs(s, resources, labels, config)).collect()
}

/// Token-level label indices for prepared inputs.
fn decode_inputs(params: &ModelParams, config: &ModelConfig, inputs: &[ModelInput]) -> Result<Vec<Vec<usize>>, NetworkError> {
    inputs
        .par_iter()
        .map(|input| {
            let mut bare = input.clone();
            bare.labels = None;
            let path = decode(params, &SequenceBatch::from_inputs(0, [&bare]), config)?.remove(0);
            Ok(match &input.alignment {
                Some(a) => collapse_to_tokens(a, &path)?,
                None => path,
            })
        })
        .collect()
}

fn relabel(seqs: &[LabeledSequence], paths: Vec<Vec<usize>>, labels: &LabelSet) -> Vec<LabeledSequence> {
    seqs.iter()
        .zip(paths)
        .map(|(s, p)| LabeledSequence {
            labels: Some(p.into_iter().map(|i| labels.tag(i)).collect()),
            ..s.clone()
        })
        .collect()
}

/// Summed loss and gradient over the batch items, computed per sequence in
/// parallel and reduced in item order.
fn batch_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    items: &[&ModelInput],
    batch_id: usize,
) -> Result<(f64, ModelParams), NetworkError> {
    let parts: Vec<(f64, ModelParams)> = items
        .par_iter()
        .map(|input| {
            let lg = loss_and_grad(params, &SequenceBatch::from_inputs(batch_id, [*input]), config)?;
            Ok((lg.loss, lg.grads.params))
        })
        .collect::<Result<_, NetworkError>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    Ok((loss, total))
}

/// Trains one model. With a dev set, the parameters of the epoch with the
/// best dev macro-F1 are returned (earliest on ties) and training stops after
/// `patience` epochs without improvement; without one, the final epoch wins.
pub fn train_fold(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    labels: &LabelSet,
    train: &[LabeledSequence],
    dev: Option<&[LabeledSequence]>,
    resources: &Resources,
) -> Result<TrainedFold, TrainError> {
    train_config.validate()?;
    model_config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if labels.len() != model_config.label_count {
        return Err(TrainError::Config(format!(
            "{} labels but label_count is {}",
            labels.len(),
            model_config.label_count
        )));
    }
    let inputs = prepare(train, resources, labels, model_config)?;
    if inputs.iter().any(|i| i.labels.is_none()) {
        return Err(TrainError::Config("training sequences must be labeled".into()));
    }
    let dev_inputs = dev
        .map(|d| prepare(&d.iter().map(LabeledSequence::unlabeled).collect::<Vec<_>>(), resources, labels, model_config))
        .transpose()?;
    let ids: Vec<&str> = train.iter().map(|s| s.id.as_str()).collect();

    let mut params = ModelParams::init(model_config)?;
    let mut adam = Adam::new(&params, train_config);
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams, MetricsReport)> = None;
    let mut stopped_early = false;

    for epoch in 1..=train_config.epochs {
        let mut epoch_loss = 0.0;
        for (b, batch) in batch_order(&ids, train_config.seed, epoch, train_config.batch_size).iter().enumerate() {
            let items: Vec<&ModelInput> = batch.iter().map(|&i| &inputs[i]).collect();
            let (loss, mut grad) = batch_gradient(&params, model_config, &items, b).map_err(|e| match e {
                NetworkError::Numeric { batch } => TrainError::Diverged { epoch, batch },
                other => other.into(),
            })?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b });
            }
            epoch_loss += loss;
            let scale = 1.0 / items.len() as f64;
            let norm = grad_norm(&grad) * scale;
            let clip = train_config.grad_clip.map_or(1.0, |c| if norm > c { c / norm } else { 1.0 });
            let mut mean_grad = grad.zeros_like();
            mean_grad.add_scaled(&grad, scale * clip);
            grad = mean_grad;
            adam.step(&mut params, &grad);
        }
        let mut record = EpochRecord {
            epoch,
            loss: epoch_loss / train.len() as f64,
            dev_macro_f1: None,
        };
        if let (Some(dev), Some(dev_inputs)) = (dev, &dev_inputs) {
            let predicted = relabel(dev, decode_inputs(&params, model_config, dev_inputs)?, labels);
            let report = evaluate_with(dev, &predicted, ReportMeta::default())?;
            let f1 = report.macro_avg.f1;
            record.dev_macro_f1 = Some(f1);
            if best.as_ref().is_none_or(|(bf, ..)| f1 > *bf) {
                best = Some((f1, epoch, params.clone(), report));
            }
        }
        log::debug!("epoch {epoch}: loss {:.6} dev {:?}", record.loss, record.dev_macro_f1);
        epochs.push(record);
        if let (Some(p), Some((_, best_epoch, ..))) = (train_config.patience, &best) {
            if epoch - best_epoch >= p {
                stopped_early = epoch < train_config.epochs;
                break;
            }
        }
    }

    let (params, best_epoch, dev_report) = match best {
        Some((_, e, p, r)) => (p, e, Some(r)),
        None => (params, epochs.len(), None),
    };
    Ok(TrainedFold {
        model: Model::new(model_config.clone(), labels.clone(), params)?,
        record: FoldRecord {
            epochs,
            best_epoch,
            stopped_early,
            dev_report,
        },
    })
}

/// Labels `seqs` with a trained model (convenience over [`Model::predict`]).
pub fn predict(model: &Model, seqs: &[LabeledSequence], resources: &Resources) -> Result<Vec<LabeledSequence>, TrainError> {
    let bare: Vec<LabeledSequence> = seqs.iter().map(LabeledSequence::unlabeled).collect();
    let inputs = prepare(&bare, resources, &model.labels, &model.config)?;
    Ok(relabel(seqs, decode_inputs(&model.params, &model.config, &inputs)?, &model.labels))
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub model: Model,
    pub record: FoldRecord,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldOutcome>,
    pub mean: MetricsReport,
}

/// k-fold cross-validation: fold `k` is both the model-selection dev set
/// and the evaluation set of the model trained on the other folds. Folds
/// train in parallel.
pub fn cross_validate(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    labels: &LabelSet,
    corpus: &[LabeledSequence],
    resources: &Resources,
    meta: &ReportMeta,
) -> Result<CrossValidation, TrainError> {
    train_config.validate()?;
    let assignment = assign_folds(corpus, train_config.folds, train_config.seed)?;
    let folds: Vec<FoldOutcome> = (0..train_config.folds)
        .into_par_iter()
        .map(|k| {
            let (train, held): (Vec<&LabeledSequence>, Vec<&LabeledSequence>) = assignment.split(corpus, k);
            let train: Vec<LabeledSequence> = train.into_iter().cloned().collect();
            let held: Vec<LabeledSequence> = held.into_iter().cloned().collect();
            let trained = train_fold(model_config, train_config, labels, &train, Some(&held), resources)?;
            let predicted = predict(&trained.model, &held, resources)?;
            let report = evaluate_with(
                &held,
                &predicted,
                ReportMeta {
                    fold: Some(k.to_string()),
                    ..meta.clone()
                },
            )?;
            Ok(FoldOutcome {
                model: trained.model,
                record: trained.record,
                report,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let mean = MetricsReport::mean(
        &reports,
        ReportMeta {
            fold: Some("mean".into()),
            ..meta.clone()
        },
    )?;
    Ok(CrossValidation { assignment, folds, mean })
}

/// SHA-256 of the canonical CoNLL rendering of a corpus.
pub fn corpus_digest(seqs: &[LabeledSequence]) -> String {
    hex(&Sha256::digest(to_conll_string(seqs).as_bytes()))
}

/// Everything needed to rerun an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Snapshot of the effective configuration (spec plus CLI overrides).
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry_digest: Option<String>,
    pub corpus_digests: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_assignment: Option<FoldAssignment>,
    #[serde(default)]
    pub folds: Vec<FoldRecord>,
    #[serde(default)]
    pub metrics: Vec<MetricsReport>,
    /// Extra command-specific facts (mixture manifests, outputs, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            ..RunManifest::default()
        }
    }

    pub fn finish(&mut self, started: Instant) {
        self.wall_clock_secs = started.elapsed().as_secs_f64();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifests always serialize")
    }
}

/// Mean per-sequence loss of `seqs` under the model (no update).
pub fn mean_loss(
    model: &Model,
    seqs: &[LabeledSequence],
    resources: &Resources,
) -> Result<f64, TrainError> {
    let inputs = prepare(seqs, resources, &model.labels, &model.config)?;
    let items: Vec<&ModelInput> = inputs.iter().collect();
    let (loss, _) = batch_gradient(&model.params, &model.config, &items, 0)?;
    Ok(loss / seqs.len().max(1) as f64)
}
