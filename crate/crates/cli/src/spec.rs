//! Declarative run files.

use std::collections::HashMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dictag::corpus::{read_conll, Concept, LabelSet, LabeledSequence};
use dictag::embeddings::{load_word2vec_text, store_read, PieceVocab, StaticEmbeddingTable};
use dictag::gazetteer::{load_dictionary, DictBit, DictKind, Dictionary, Registry};
use dictag::network::{Attention, DictMode, ModelConfig, Resources, Variant};
use dictag::training::TrainConfig;
use dictag::weaklabel::{prune_terms, TermPredicate};

/// Environment variable naming the default root for relative spec paths.
pub const DATA_ROOT_ENV: &str = "DICTAG_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Root for relative paths; falls back to the environment, then to the
    /// directory holding the spec file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpora: CorporaSpec,
    #[serde(default)]
    pub resources: ResourcesSpec,
    #[serde(default)]
    pub dictionaries: Vec<DictionarySpec>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorporaSpec {
    /// Labeled training corpus (train, cv) or unlabeled pool (sweep).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// Model-selection corpus for `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    /// Test sequences for the sweep, re-tagged per dictionary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Manually labeled test corpus for the sweep's ground-truth column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourcesSpec {
    /// word2vec text vectors; without them every token gets its seeded
    /// out-of-vocabulary vector.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub oov_seed: u64,
    /// CTXE store with contextual vectors for every sequence id used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contextual: Option<PathBuf>,
    /// Piece vocabulary written alongside the store.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySpec {
    pub name: String,
    pub path: PathBuf,
    /// SYM, SEVERITY, ..., BODY-PART-SEMTYPE or SIGN-SYMPTOM-OR-DISEASE-SEMTYPE.
    pub kind: String,
    /// d1..d7; defaults to the kind's bit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bit: Option<String>,
    /// Drop list applied after loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScheme {
    #[default]
    All,
    Symptom,
}

impl LabelScheme {
    pub fn label_set(self) -> LabelSet {
        match self {
            LabelScheme::All => LabelSet::all(),
            LabelScheme::Symptom => LabelSet::symptom_only(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_dict_mode")]
    pub dict_mode: DictMode,
    #[serde(default = "default_attention")]
    pub attention: Attention,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    /// Must match the embedding file when one is given.
    #[serde(default = "default_static_dim")]
    pub static_dim: usize,
    /// Must match the contextual store for the BERT variant.
    #[serde(default = "default_contextual_dim")]
    pub contextual_dim: usize,
    #[serde(default)]
    pub labels: LabelScheme,
    #[serde(default)]
    pub seed: u64,
}

fn default_variant() -> Variant {
    Variant::LstmCrf
}
fn default_dict_mode() -> DictMode {
    DictMode::Dict2
}
fn default_attention() -> Attention {
    Attention::None
}
fn default_hidden() -> usize {
    100
}
fn default_static_dim() -> usize {
    300
}
fn default_contextual_dim() -> usize {
    768
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: default_variant(),
            dict_mode: default_dict_mode(),
            attention: default_attention(),
            hidden_size: default_hidden(),
            static_dim: default_static_dim(),
            contextual_dim: default_contextual_dim(),
            labels: LabelScheme::default(),
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn model_config(&self) -> ModelConfig {
        let labels = self.labels.label_set();
        let mut cfg = ModelConfig::new(self.variant, self.dict_mode, self.attention, labels.len());
        cfg.hidden_size = self.hidden_size;
        cfg.static_dim = self.static_dim;
        cfg.contextual_dim = match self.variant {
            Variant::BertLstmCrf => self.contextual_dim,
            Variant::LstmCrf => 0,
        };
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub base: MixtureDictSpec,
    pub donor: MixtureDictSpec,
    #[serde(default)]
    pub seed: u64,
}

/// A symptom dictionary taking part in a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDictSpec {
    pub name: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PathBuf>,
}

impl ExperimentSpec {
    /// Parses a spec file and makes its relative paths absolute. Errors here
    /// are usage errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
        let mut spec: ExperimentSpec =
            toml::from_str(&text).with_context(|| format!("parsing spec {}", path.display()))?;
        let spec_dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let root = match &spec.data_root {
            Some(r) => absolute(&spec_dir.join(r))?,
            None => match env::var_os(DATA_ROOT_ENV) {
                Some(r) => absolute(Path::new(&r))?,
                None => absolute(&spec_dir)?,
            },
        };
        spec.resolve(&root, &absolute(&spec_dir)?);
        spec.data_root = Some(root);
        Ok(spec)
    }

    fn resolve(&mut self, root: &Path, spec_dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                fix(p)
            }
        };
        if let Some(out) = &mut self.output_dir {
            if out.is_relative() {
                *out = spec_dir.join(&*out);
            }
        }
        let c = &mut self.corpora;
        for p in [&mut c.train, &mut c.dev, &mut c.test, &mut c.ground_truth] {
            fix_opt(p);
        }
        let r = &mut self.resources;
        for p in [&mut r.embeddings, &mut r.contextual, &mut r.vocab] {
            fix_opt(p);
        }
        for d in &mut self.dictionaries {
            fix(&mut d.path);
            fix_opt(&mut d.prune);
        }
        if let Some(m) = &mut self.mixture {
            for d in [&mut m.base, &mut m.donor] {
                fix(&mut d.path);
                fix_opt(&mut d.prune);
            }
        }
    }

    /// Applies a global `--seed`: model initialization, batch order, fold
    /// assignment and mixture shuffles all follow it.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        if let Some(m) = &mut self.mixture {
            m.seed = seed;
        }
    }

    /// Schema checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let cfg = self.model.model_config();
        cfg.validate()?;
        if self.model.variant == Variant::BertLstmCrf
            && (self.resources.contextual.is_none() || self.resources.vocab.is_none())
        {
            bail!("the bert-lstm-crf variant needs resources.contextual and resources.vocab");
        }
        for d in &self.dictionaries {
            d.kind.parse::<DictKind>()?;
            if let Some(b) = &d.bit {
                b.parse::<DictBit>()?;
            }
        }
        Ok(())
    }

    /// Every input file the spec names, for up-front existence checks.
    pub fn input_files(&self) -> Vec<&Path> {
        let c = &self.corpora;
        let r = &self.resources;
        let mut files: Vec<&Path> = [&c.train, &c.dev, &c.test, &c.ground_truth, &r.embeddings, &r.contextual, &r.vocab]
            .into_iter()
            .flatten()
            .map(PathBuf::as_path)
            .collect();
        for d in &self.dictionaries {
            files.push(&d.path);
            files.extend(d.prune.as_deref());
        }
        if let Some(m) = &self.mixture {
            for d in [&m.base, &m.donor] {
                files.push(&d.path);
                files.extend(d.prune.as_deref());
            }
        }
        files
    }
}

pub fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

pub fn load_corpus(path: &Path) -> Result<Vec<LabeledSequence>> {
    read_conll(path).with_context(|| format!("reading corpus {}", path.display()))
}

pub fn load_drop_list(path: &Path) -> Result<Vec<TermPredicate>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading drop list {}", path.display()))?;
    Ok(text.lines().filter_map(TermPredicate::parse_line).collect())
}

/// Loads a dictionary file and applies its drop list, if any.
pub fn load_pruned(name: &str, path: &Path, kind: DictKind, prune: Option<&Path>) -> Result<Dictionary> {
    let dict = load_dictionary(path, name, kind)?;
    let Some(prune) = prune else {
        return Ok(dict);
    };
    let pruned = prune_terms(&dict, &load_drop_list(prune)?);
    if pruned.is_empty() {
        bail!("drop list {} removes every term of `{name}`", prune.display());
    }
    Ok(pruned)
}

pub fn load_symptom_dict(spec: &MixtureDictSpec) -> Result<Dictionary> {
    load_pruned(&spec.name, &spec.path, DictKind::Concept(Concept::Sym), spec.prune.as_deref())
}

pub fn load_registry(dicts: &[DictionarySpec]) -> Result<Registry> {
    let mut entries = Vec::with_capacity(dicts.len());
    for d in dicts {
        let kind: DictKind = d.kind.parse()?;
        let bit = match &d.bit {
            Some(b) => b.parse()?,
            None => kind.default_bit(),
        };
        entries.push((bit, load_pruned(&d.name, &d.path, kind, d.prune.as_deref())?));
    }
    Ok(Registry::new(entries)?)
}

/// Loads embeddings, the optional contextual store and vocabulary, and the
/// registry, checking widths against the model configuration.
pub fn load_resources(resources: &ResourcesSpec, registry: Registry, model: &ModelConfig) -> Result<Resources> {
    let table = match &resources.embeddings {
        Some(p) => load_word2vec_text(p, resources.oov_seed)?,
        None => StaticEmbeddingTable::new(model.static_dim, HashMap::new(), resources.oov_seed),
    };
    if table.dim() != model.static_dim {
        bail!(
            "embedding dimension {} does not match model.static_dim {}",
            table.dim(),
            model.static_dim
        );
    }
    let (store, vocab) = match model.variant {
        Variant::LstmCrf => (None, None),
        Variant::BertLstmCrf => {
            let (Some(s), Some(v)) = (&resources.contextual, &resources.vocab) else {
                bail!("the bert-lstm-crf variant needs a contextual store and a piece vocabulary");
            };
            let store = store_read(s)?;
            if store.dim() != model.contextual_dim {
                bail!(
                    "contextual store dimension {} does not match model.contextual_dim {}",
                    store.dim(),
                    model.contextual_dim
                );
            }
            (Some(Arc::new(store)), Some(Arc::new(PieceVocab::load(v)?)))
        }
    };
    Ok(Resources {
        table: Arc::new(table),
        store,
        vocab,
        registry,
    })
}
