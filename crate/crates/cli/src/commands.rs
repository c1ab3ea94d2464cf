//! Subcommand implementations. Each writes its artifacts plus a
//! `manifest.json` into the output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use dictag::checkpoint::{self, Checkpoint};
use dictag::corpus::{repair_bio, write_conll, LabelSet};
use dictag::evaluation::{evaluate_with, render_grid, render_table, MacroMetrics, MetricsReport, ReportMeta};
use dictag::gazetteer::{DictBit, DictKind, Dictionary, Registry};
use dictag::network::{Resources, Variant};
use dictag::training::{corpus_digest, cross_validate, predict, train_fold, RunManifest};
use dictag::weaklabel::{build_mixture, filter_has_symptom, run_weak_label, weak_label, DictionaryMixture, Fraction};

use crate::spec::{
    load_corpus, load_registry, load_resources, load_symptom_dict, DictionarySpec, ExperimentSpec, LabelScheme,
    MixtureDictSpec, ResourcesSpec,
};

/// Marks an error as caused by the invocation rather than the run.
#[derive(Debug)]
pub struct UsageError;

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("usage error")
    }
}

pub trait UsageExt<T> {
    fn usage(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for std::result::Result<T, E> {
    fn usage(self) -> Result<T> {
        self.map_err(|e| e.into().context(UsageError))
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(anyhow!("input file {} does not exist", path.display()).context(UsageError))
    }
}

/// Loads, overrides and checks a spec; every failure is a usage error.
pub fn prepare_spec(path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<(ExperimentSpec, PathBuf)> {
    let mut spec = ExperimentSpec::load(path).usage()?;
    if let Some(seed) = seed {
        spec.override_seed(seed);
    }
    if let Some(out) = output_dir {
        spec.output_dir = Some(crate::spec::absolute(&out).usage()?);
    }
    spec.validate().usage()?;
    for f in spec.input_files() {
        require_file(f)?;
    }
    let out = spec
        .output_dir
        .clone()
        .ok_or_else(|| anyhow!("no output directory: pass --output-dir or set output_dir in the spec").context(UsageError))?;
    Ok((spec, out))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_manifest(dir: &Path, mut manifest: RunManifest, started: Instant) -> Result<()> {
    manifest.finish(started);
    write_text(&dir.join("manifest.json"), &(manifest.to_json() + "\n"))
}

/// The effective spec, also written as `spec.toml` so the run can be
/// repeated with `--spec <dir>/spec.toml`.
fn snapshot_spec(dir: &Path, spec: &ExperimentSpec) -> Result<Value> {
    let text = toml::to_string(spec).context("serializing the effective spec")?;
    write_text(&dir.join("spec.toml"), &text)?;
    Ok(serde_json::to_value(spec)?)
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn labels_of(spec: &ExperimentSpec) -> LabelSet {
    spec.model.labels.label_set()
}

/// What a checkpoint needs to rebuild its inputs at tagging time.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct CheckpointMeta {
    resources: ResourcesSpec,
    dictionaries: Vec<DictionarySpec>,
    registry_digest: String,
}

fn checkpoint_with_meta(model: dictag::network::Model, spec_resources: &ResourcesSpec, dicts: &[DictionarySpec], registry: &Registry) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(model);
    ck.meta = serde_json::to_value(CheckpointMeta {
        resources: spec_resources.clone(),
        dictionaries: dicts.to_vec(),
        registry_digest: registry.digest(),
    })?;
    Ok(ck)
}

fn require_corpus(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| anyhow!("the spec must set corpora.{key}").context(UsageError))
}

pub fn train(spec_path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let (spec, out) = prepare_spec(spec_path, seed, output_dir)?;
    let train_path = require_corpus(&spec.corpora.train, "train")?;
    create_dir(&out)?;
    let config = snapshot_spec(&out, &spec)?;

    let model_cfg = spec.model.model_config();
    let labels = labels_of(&spec);
    let registry = load_registry(&spec.dictionaries)?;
    let resources = load_resources(&spec.resources, registry, &model_cfg)?;
    let train = load_corpus(&train_path)?;
    let dev = spec.corpora.dev.as_deref().map(load_corpus).transpose()?;

    let trained = train_fold(&model_cfg, &spec.train, &labels, &train, dev.as_deref(), &resources)?;
    let ck = checkpoint_with_meta(trained.model, &spec.resources, &spec.dictionaries, &resources.registry)?;
    checkpoint::save(&ck, out.join("model.ckpt"))?;

    let mut manifest = RunManifest::new("train", config);
    manifest.registry_digest = Some(resources.registry.digest());
    manifest.corpus_digests.insert(file_name(&train_path), corpus_digest(&train));
    if let (Some(path), Some(dev)) = (&spec.corpora.dev, &dev) {
        manifest.corpus_digests.insert(file_name(path), corpus_digest(dev));
    }
    if let Some(report) = &trained.record.dev_report {
        let mut report = report.clone();
        report.meta = ReportMeta {
            model: model_name(&spec),
            corpus: spec.corpora.dev.as_deref().map(file_name).unwrap_or_default(),
            fold: None,
        };
        write_text(&out.join("dev_report.json"), &(report.to_json() + "\n"))?;
        println!("{}", render_table(std::slice::from_ref(&report), &[&report.meta.model]).0);
        manifest.metrics.push(report);
    }
    println!(
        "trained {} epochs (kept epoch {}); checkpoint {}",
        trained.record.epochs.len(),
        trained.record.best_epoch,
        out.join("model.ckpt").display()
    );
    manifest.folds.push(trained.record);
    manifest.extra = json!({"checkpoint": "model.ckpt"});
    write_manifest(&out, manifest, started)
}

fn model_name(spec: &ExperimentSpec) -> String {
    let m = &spec.model;
    let base = match m.variant {
        Variant::LstmCrf => "LSTM+CRF",
        Variant::BertLstmCrf => "BERT+LSTM+CRF",
    };
    let dict = match m.dict_mode {
        dictag::network::DictMode::None => "",
        dictag::network::DictMode::Dict1 => "+DICT(1)",
        dictag::network::DictMode::Dict2 => "+DICT(2)",
    };
    let att = match m.attention {
        dictag::network::Attention::None => "",
        dictag::network::Attention::SelfAttention => "+SELF",
        dictag::network::Attention::Cross => "+CROSS",
    };
    format!("{base}{dict}{att}")
}

pub fn cv(spec_path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let (spec, out) = prepare_spec(spec_path, seed, output_dir)?;
    let train_path = require_corpus(&spec.corpora.train, "train")?;
    create_dir(&out)?;
    let config = snapshot_spec(&out, &spec)?;

    let model_cfg = spec.model.model_config();
    let labels = labels_of(&spec);
    let registry = load_registry(&spec.dictionaries)?;
    let resources = load_resources(&spec.resources, registry, &model_cfg)?;
    let corpus = load_corpus(&train_path)?;
    let meta = ReportMeta {
        model: model_name(&spec),
        corpus: file_name(&train_path),
        fold: None,
    };
    let result = cross_validate(&model_cfg, &spec.train, &labels, &corpus, &resources, &meta)?;

    let mut reports = Vec::new();
    let mut columns = Vec::new();
    for (k, fold) in result.folds.iter().enumerate() {
        let dir = out.join(format!("fold-{k}"));
        create_dir(&dir)?;
        write_text(&dir.join("report.json"), &(fold.report.to_json() + "\n"))?;
        let ck = checkpoint_with_meta(fold.model.clone(), &spec.resources, &spec.dictionaries, &resources.registry)?;
        checkpoint::save(&ck, dir.join("model.ckpt"))?;
        reports.push(fold.report.clone());
        columns.push(format!("fold {k}"));
    }
    reports.push(result.mean.clone());
    columns.push("mean".to_string());
    write_text(&out.join("report.json"), &(result.mean.to_json() + "\n"))?;
    let names: Vec<&str> = columns.iter().map(String::as_str).collect();
    let (table, json) = render_table(&reports, &names);
    write_text(&out.join("report.txt"), &table)?;
    write_json(&out.join("table.json"), &json)?;
    println!("{} ({} folds)\n{table}", meta.model, result.folds.len());

    let mut manifest = RunManifest::new("cv", config);
    manifest.registry_digest = Some(resources.registry.digest());
    manifest.corpus_digests.insert(file_name(&train_path), corpus_digest(&corpus));
    manifest.fold_assignment = Some(result.assignment);
    manifest.folds = result.folds.into_iter().map(|f| f.record).collect();
    manifest.metrics = reports;
    write_manifest(&out, manifest, started)
}

pub struct TagArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub contextual: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

pub fn tag(args: TagArgs) -> Result<()> {
    let started = Instant::now();
    require_file(&args.checkpoint)?;
    require_file(&args.input)?;
    for p in args.contextual.iter().chain(&args.vocab) {
        require_file(p)?;
    }
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
        .context("checkpoint metadata does not describe its resources")?;
    if let Some(c) = &args.contextual {
        meta.resources.contextual = Some(c.clone());
    }
    if let Some(v) = &args.vocab {
        meta.resources.vocab = Some(v.clone());
    }
    let registry = load_registry(&meta.dictionaries)?;
    if registry.digest() != meta.registry_digest {
        bail!("dictionaries changed since the checkpoint was written (registry digest mismatch)");
    }
    let resources = load_resources(&meta.resources, registry, &ck.model.config)?;
    let input = load_corpus(&args.input)?;

    let mut tagged = predict(&ck.model, &input, &resources)?;
    for seq in &mut tagged {
        if let Some(labels) = &mut seq.labels {
            repair_bio(labels);
        }
    }
    create_dir(&args.output_dir)?;
    write_conll(&tagged, args.output_dir.join("tagged.conll"))?;
    println!("tagged {} sequences into {}", tagged.len(), args.output_dir.join("tagged.conll").display());

    let mut manifest = RunManifest::new(
        "tag",
        json!({
            "checkpoint": args.checkpoint,
            "input": args.input,
            "resources": meta.resources,
        }),
    );
    manifest.registry_digest = Some(meta.registry_digest);
    manifest.corpus_digests.insert(file_name(&args.input), corpus_digest(&input));
    manifest.corpus_digests.insert("tagged.conll".into(), corpus_digest(&tagged));
    write_manifest(&args.output_dir, manifest, started)
}

/// Mixture arguments shared by `weak-label` and `dict-merge`.
pub struct MixtureArgs {
    pub base: PathBuf,
    pub donor: Option<PathBuf>,
    pub fraction: Fraction,
    pub seed: u64,
    pub prune_base: Option<PathBuf>,
    pub prune_donor: Option<PathBuf>,
}

impl MixtureArgs {
    fn check(&self) -> Result<()> {
        for p in [Some(&self.base), self.donor.as_ref(), self.prune_base.as_ref(), self.prune_donor.as_ref()]
            .into_iter()
            .flatten()
        {
            require_file(p)?;
        }
        Ok(())
    }

    /// Without a donor the base is mixed with an empty donor, so the
    /// result is the base itself.
    fn build(&self) -> Result<DictionaryMixture> {
        let dict = |path: &Path, prune: &Option<PathBuf>| {
            load_symptom_dict(&MixtureDictSpec {
                name: file_stem(path),
                path: path.to_path_buf(),
                prune: prune.clone(),
            })
        };
        let base = dict(&self.base, &self.prune_base)?;
        let donor = match &self.donor {
            Some(d) => dict(d, &self.prune_donor)?,
            None => Dictionary::new("none", base.kind(), Vec::<Vec<String>>::new())?,
        };
        Ok(build_mixture(&base, &donor, self.fraction, self.seed))
    }

    fn snapshot(&self) -> Value {
        json!({
            "base": self.base,
            "donor": self.donor,
            "fraction": self.fraction,
            "seed": self.seed,
            "prune_base": self.prune_base,
            "prune_donor": self.prune_donor,
        })
    }
}

pub fn weak_label_cmd(mix: MixtureArgs, input: PathBuf, filter: bool, output_dir: PathBuf) -> Result<()> {
    let started = Instant::now();
    mix.check()?;
    require_file(&input)?;
    let mixture = mix.build()?;
    let mut corpus = load_corpus(&input)?;
    if filter {
        corpus = filter_has_symptom(&mixture.merged, &corpus);
    }
    let run = run_weak_label(&mixture, &file_name(&input), &corpus)?;

    create_dir(&output_dir)?;
    write_conll(&run.tagged, output_dir.join("tagged.conll"))?;
    write_json(&output_dir.join("mixture.json"), &run.mixture)?;
    println!(
        "{}: {} sequences, {} spans over {} tokens",
        mixture.merged.name(),
        run.stats.sequences,
        run.stats.spans,
        run.stats.covered_tokens
    );

    let mut config = mix.snapshot();
    config["input"] = json!(input);
    config["filter"] = json!(filter);
    let mut manifest = RunManifest::new("weak-label", config);
    manifest.corpus_digests.insert(file_name(&input), corpus_digest(&load_corpus(&input)?));
    manifest.corpus_digests.insert("tagged.conll".into(), corpus_digest(&run.tagged));
    manifest.extra = json!({
        "dictionary_digest": mixture.merged.digest(),
        "mixture": run.mixture,
        "stats": run.stats,
    });
    write_manifest(&output_dir, manifest, started)
}

pub fn dict_merge(mix: MixtureArgs, output_dir: PathBuf) -> Result<()> {
    let started = Instant::now();
    mix.check()?;
    let mixture = mix.build()?;
    create_dir(&output_dir)?;
    write_text(&output_dir.join("dictionary.txt"), &mixture.merged.to_file_string())?;
    let manifest_json = mixture.to_manifest();
    write_json(&output_dir.join("mixture.json"), &manifest_json)?;
    println!(
        "{}: {} base terms + {} donor terms = {} terms",
        mixture.merged.name(),
        mixture.base.len(),
        mixture.manifest.len(),
        mixture.merged.len()
    );

    let mut manifest = RunManifest::new("dict-merge", mix.snapshot());
    manifest.extra = json!({
        "dictionary_digest": mixture.merged.digest(),
        "mixture": manifest_json,
    });
    write_manifest(&output_dir, manifest, started)
}

pub fn eval(gold_path: PathBuf, predicted_path: PathBuf, model: Option<String>, output_dir: PathBuf) -> Result<()> {
    let started = Instant::now();
    require_file(&gold_path)?;
    require_file(&predicted_path)?;
    let gold = load_corpus(&gold_path)?;
    let predicted = load_corpus(&predicted_path)?;
    let meta = ReportMeta {
        model: model.unwrap_or_else(|| file_stem(&predicted_path)),
        corpus: file_name(&gold_path),
        fold: None,
    };
    let report = evaluate_with(&gold, &predicted, meta)?;
    let (table, _) = render_table(std::slice::from_ref(&report), &[&report.meta.model]);
    print!("{table}");

    create_dir(&output_dir)?;
    write_text(&output_dir.join("report.json"), &(report.to_json() + "\n"))?;
    write_text(&output_dir.join("report.txt"), &table)?;
    let mut manifest = RunManifest::new("eval", json!({"gold": gold_path, "predicted": predicted_path}));
    manifest.corpus_digests.insert(format!("gold:{}", file_name(&gold_path)), corpus_digest(&gold));
    manifest.corpus_digests.insert(format!("predicted:{}", file_name(&predicted_path)), corpus_digest(&predicted));
    manifest.metrics.push(report);
    write_manifest(&output_dir, manifest, started)
}

/// The SYM row of a report; a report without SYM rows (no gold and no
/// predicted symptom tokens) scores zero.
fn symptom_cell(report: &MetricsReport) -> MacroMetrics {
    report
        .labels
        .get("SYM")
        .map(|m| MacroMetrics { p: m.p, r: m.r, f1: m.f1 })
        .unwrap_or(MacroMetrics { p: 0.0, r: 0.0, f1: 0.0 })
}

struct SweepCell {
    baseline: usize,
    fraction: Fraction,
    dir: PathBuf,
    mixture: Value,
    reports: Vec<MetricsReport>,
}

/// Both baselines (base then donor as the starting dictionary) at every
/// fraction step: weak-label the training pool with the mixture, train with
/// the mixture on d1, then score the test pool against each dictionary's
/// tagging (and the ground truth when given).
pub fn sweep(spec_path: &Path, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let (spec, out) = prepare_spec(spec_path, seed, output_dir)?;
    let mixture_spec = spec
        .mixture
        .clone()
        .ok_or_else(|| anyhow!("sweep needs a [mixture] section").context(UsageError))?;
    if spec.model.labels != LabelScheme::Symptom {
        return Err(anyhow!("sweep trains symptom-only models: set model.labels = \"symptom\"").context(UsageError));
    }
    let train_path = require_corpus(&spec.corpora.train, "train")?;
    let test_path = require_corpus(&spec.corpora.test, "test")?;
    if spec.dictionaries.iter().any(|d| {
        d.bit.as_deref().map_or_else(|| d.kind.parse::<DictKind>().ok().map(|k| k.default_bit()), |b| b.parse().ok())
            == Some(DictBit::Symptom)
    }) {
        return Err(anyhow!("sweep places the mixture on d1; remove the d1 dictionary from the spec").context(UsageError));
    }
    create_dir(&out)?;
    let config = snapshot_spec(&out, &spec)?;

    let model_cfg = spec.model.model_config();
    let labels = labels_of(&spec);
    let base_registry = load_registry(&spec.dictionaries)?;
    let shared = load_resources(&spec.resources, base_registry.clone(), &model_cfg)?;
    let dicts = [load_symptom_dict(&mixture_spec.base)?, load_symptom_dict(&mixture_spec.donor)?];
    let pool = load_corpus(&train_path)?;
    let test = load_corpus(&test_path)?;
    let ground_truth = spec.corpora.ground_truth.as_deref().map(load_corpus).transpose()?;

    let combined = build_mixture(&dicts[0], &dicts[1], Fraction::STEPS[5], mixture_spec.seed).merged.with_name("combined");
    let mut columns = vec![("combined".to_string(), weak_label(&combined, &test)?)];
    for d in &dicts {
        columns.push((d.name().to_string(), weak_label(d, &test)?));
    }

    let grid: Vec<(usize, Fraction)> = (0..2).flat_map(|b| Fraction::STEPS.map(|f| (b, f))).collect();
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(b, fraction)| -> Result<SweepCell> {
            let (base, donor) = (&dicts[b], &dicts[1 - b]);
            let mixture = build_mixture(base, donor, fraction, mixture_spec.seed);
            let dir = out.join(format!("{}-baseline", base.name())).join(format!("{:03}", fraction.percent()));
            create_dir(&dir)?;
            let dict_path = dir.join("dictionary.txt");
            write_text(&dict_path, &mixture.merged.to_file_string())?;
            let mixture_json = serde_json::to_value(mixture.to_manifest())?;
            write_json(&dir.join("mixture.json"), &mixture_json)?;

            let tagged = weak_label(&mixture.merged, &pool)?;
            write_conll(&tagged, dir.join("train.conll"))?;
            let resources = Resources {
                registry: base_registry.replace(DictBit::Symptom, mixture.merged.clone())?,
                ..shared.clone()
            };
            let trained = train_fold(&model_cfg, &spec.train, &labels, &tagged, None, &resources)?;
            let mut cell_dicts = spec.dictionaries.clone();
            cell_dicts.push(DictionarySpec {
                name: mixture.merged.name().to_string(),
                path: dict_path,
                kind: "SYM".into(),
                bit: Some("d1".into()),
                prune: None,
            });
            let ck = checkpoint_with_meta(trained.model.clone(), &spec.resources, &cell_dicts, &resources.registry)?;
            checkpoint::save(&ck, dir.join("model.ckpt"))?;

            let model = format!("{}@{}", base.name(), fraction);
            let mut reports = Vec::new();
            let predicted = predict(&trained.model, &test, &resources)?;
            for (name, gold) in &columns {
                let meta = ReportMeta { model: model.clone(), corpus: name.clone(), fold: None };
                reports.push(evaluate_with(gold, &predicted, meta)?);
            }
            if let Some(gt) = &ground_truth {
                let predicted = predict(&trained.model, gt, &resources)?;
                let meta = ReportMeta { model: model.clone(), corpus: "ground-truth".into(), fold: None };
                reports.push(evaluate_with(gt, &predicted, meta)?);
            }
            write_json(&dir.join("reports.json"), &reports)?;
            log::info!("sweep cell {model} done");
            Ok(SweepCell { baseline: b, fraction, dir, mixture: mixture_json, reports })
        })
        .collect::<Result<_>>()?;

    let mut column_names: Vec<String> = columns.iter().map(|(n, _)| n.clone()).collect();
    if ground_truth.is_some() {
        column_names.push("ground-truth".into());
    }
    let rows: Vec<String> = Fraction::STEPS.iter().map(|f| f.to_string()).collect();
    let mut text = String::new();
    let mut tables = Vec::new();
    for (b, dict) in dicts.iter().enumerate() {
        let mine: Vec<&SweepCell> = cells.iter().filter(|c| c.baseline == b).collect();
        let grid: Vec<Vec<MacroMetrics>> = mine.iter().map(|c| c.reports.iter().map(symptom_cell).collect()).collect();
        let title = format!("{} baseline + {}", dict.name(), dicts[1 - b].name());
        text.push_str(&render_grid(&title, &rows, &column_names, &grid));
        text.push('\n');
        tables.push(json!({
            "baseline": dict.name(),
            "donor": dicts[1 - b].name(),
            "columns": column_names,
            "rows": mine.iter().zip(&grid).map(|(c, g)| json!({
                "fraction": c.fraction,
                "cells": g,
            })).collect::<Vec<_>>(),
        }));
    }
    write_text(&out.join("sweep.txt"), &text)?;
    write_json(&out.join("sweep.json"), &tables)?;
    print!("{text}");

    let mut manifest = RunManifest::new("sweep", config);
    manifest.registry_digest = Some(base_registry.digest());
    manifest.corpus_digests.insert(file_name(&train_path), corpus_digest(&pool));
    manifest.corpus_digests.insert(file_name(&test_path), corpus_digest(&test));
    if let (Some(path), Some(gt)) = (&spec.corpora.ground_truth, &ground_truth) {
        manifest.corpus_digests.insert(file_name(path), corpus_digest(gt));
    }
    manifest.extra = json!({
        "cells": cells.iter().map(|c| json!({
            "directory": c.dir.strip_prefix(&out).unwrap_or(&c.dir),
            "mixture": c.mixture,
        })).collect::<Vec<_>>(),
        "dictionary_digests": dicts.iter().map(|d| (d.name().to_string(), d.digest())).collect::<BTreeMap<_, _>>(),
    });
    manifest.metrics = cells.into_iter().flat_map(|c| c.reports).collect();
    write_manifest(&out, manifest, started)
}
