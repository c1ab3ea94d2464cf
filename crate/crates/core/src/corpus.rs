//! Corpus data model: tokens, BIO labels, labeled sequences, CoNLL-style I/O
//! and cross-validation fold assignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("sequence `{id}`, position {position}: {message}")]
    Invalid {
        id: String,
        position: usize,
        message: String,
    },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Concept classes annotated in the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Concept {
    #[serde(rename = "SYM")]
    Sym,
    #[serde(rename = "SEVERITY")]
    Severity,
    #[serde(rename = "BPOC")]
    Bpoc,
    #[serde(rename = "INTENSIFIER")]
    Intensifier,
    #[serde(rename = "DURATION")]
    Duration,
    #[serde(rename = "NEGATION")]
    Negation,
}

impl Concept {
    /// All concepts in report order.
    pub const ALL: [Concept; 6] = [
        Concept::Sym,
        Concept::Severity,
        Concept::Bpoc,
        Concept::Intensifier,
        Concept::Duration,
        Concept::Negation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Concept::Sym => "SYM",
            Concept::Severity => "SEVERITY",
            Concept::Bpoc => "BPOC",
            Concept::Intensifier => "INTENSIFIER",
            Concept::Duration => "DURATION",
            Concept::Negation => "NEGATION",
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Concept {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Concept::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownLabel(s.to_string()))
    }
}

/// A BIO tag. `O` carries no concept, `B` and `I` always do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelTag {
    B(Concept),
    I(Concept),
    O,
}

impl LabelTag {
    pub fn concept(self) -> Option<Concept> {
        match self {
            LabelTag::B(c) | LabelTag::I(c) => Some(c),
            LabelTag::O => None,
        }
    }

    /// Whether this tag may follow `prev` (`None` = sequence start).
    pub fn may_follow(self, prev: Option<LabelTag>) -> bool {
        match self {
            LabelTag::I(c) => matches!(prev, Some(LabelTag::B(p)) | Some(LabelTag::I(p)) if p == c),
            _ => true,
        }
    }
}

impl fmt::Display for LabelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelTag::B(c) => write!(f, "B-{c}"),
            LabelTag::I(c) => write!(f, "I-{c}"),
            LabelTag::O => f.write_str("O"),
        }
    }
}

impl FromStr for LabelTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(LabelTag::O);
        }
        match s.split_once('-') {
            Some(("B", c)) => Ok(LabelTag::B(c.parse()?)),
            Some(("I", c)) => Ok(LabelTag::I(c.parse()?)),
            _ => Err(CorpusError::UnknownLabel(s.to_string())),
        }
    }
}

/// Rewrites an `I-X` that does not continue an `X` span into `B-X`.
///
/// Decoded paths are not constrained to legal BIO, this turns them into a
/// sequence that passes corpus validation. Token-level scores are unchanged
/// since evaluation collapses prefixes.
pub fn repair_bio(labels: &mut [LabelTag]) {
    let mut prev = None;
    for tag in labels.iter_mut() {
        if !tag.may_follow(prev) {
            if let LabelTag::I(c) = *tag {
                *tag = LabelTag::B(c);
            }
        }
        prev = Some(*tag);
    }
}

/// Index mapping for the tags a model predicts: `O` first, then `B-`/`I-`
/// for each concept in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Concept>", into = "Vec<Concept>")]
pub struct LabelSet {
    concepts: Vec<Concept>,
    tags: Vec<LabelTag>,
}

impl LabelSet {
    pub fn new(concepts: &[Concept]) -> Result<Self, CorpusError> {
        let unique: BTreeSet<_> = concepts.iter().collect();
        if unique.len() != concepts.len() || concepts.is_empty() {
            return Err(CorpusError::Config(format!("bad concept list {concepts:?}")));
        }
        let mut tags = vec![LabelTag::O];
        for &c in concepts {
            tags.push(LabelTag::B(c));
            tags.push(LabelTag::I(c));
        }
        Ok(LabelSet {
            concepts: concepts.to_vec(),
            tags,
        })
    }

    /// The full forum label set.
    pub fn all() -> Self {
        LabelSet::new(&Concept::ALL).expect("static concept list")
    }

    /// `O`, `B-SYM`, `I-SYM`.
    pub fn symptom_only() -> Self {
        LabelSet::new(&[Concept::Sym]).expect("static concept list")
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn tag(&self, index: usize) -> LabelTag {
        self.tags[index]
    }

    pub fn index_of(&self, tag: LabelTag) -> Result<usize, CorpusError> {
        self.tags
            .iter()
            .position(|&t| t == tag)
            .ok_or_else(|| CorpusError::UnknownLabel(format!("{tag} is not in the model's label set")))
    }
}

impl TryFrom<Vec<Concept>> for LabelSet {
    type Error = CorpusError;

    fn try_from(concepts: Vec<Concept>) -> Result<Self, Self::Error> {
        LabelSet::new(&concepts)
    }
}

impl From<LabelSet> for Vec<Concept> {
    fn from(set: LabelSet) -> Self {
        set.concepts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    #[default]
    ForumSentence,
    Tweet,
}

impl Source {
    pub fn max_len(self) -> usize {
        match self {
            Source::ForumSentence => 512,
            Source::Tweet => 130,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Source::ForumSentence => "forum-sentence",
            Source::Tweet => "tweet",
        }
    }
}

impl FromStr for Source {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forum-sentence" | "forum" => Ok(Source::ForumSentence),
            "tweet" => Ok(Source::Tweet),
            other => Err(CorpusError::Config(format!("unknown source `{other}`"))),
        }
    }
}

/// A lowercased token with character offsets into its source text.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Word,
    Digit,
    Punct,
}

fn char_class(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_alphabetic() {
        CharClass::Word
    } else {
        CharClass::Punct
    }
}

/// Rule-based tokenizer: lowercases, splits on whitespace and emits every
/// maximal run of letters, of digits, or of punctuation as one token.
///
/// Offsets count characters of `text`. Output longer than the source's
/// maximum sequence length is truncated with a warning.
pub fn tokenize(text: &str, source: Source) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<(CharClass, usize, String)> = None;

    for (pos, c) in text.chars().enumerate() {
        let class = char_class(c);
        match &mut current {
            Some((cls, _, buf)) if *cls == class => buf.push(c),
            _ => {
                if let Some((_, start, buf)) = current.take() {
                    tokens.push(finish_token(start, pos, &buf));
                }
                if class != CharClass::Space {
                    current = Some((class, pos, c.to_string()));
                }
            }
        }
    }
    if let Some((_, start, buf)) = current {
        let end = start + buf.chars().count();
        tokens.push(finish_token(start, end, &buf));
    }

    let max = source.max_len();
    if tokens.len() > max {
        log::warn!(
            "truncating {} tokens to the {} maximum of {max}",
            tokens.len(),
            source.as_str()
        );
        tokens.truncate(max);
    }
    tokens
}

fn finish_token(start: usize, end: usize, raw: &str) -> Token {
    Token {
        surface: raw.to_lowercase(),
        start,
        end,
    }
}

/// One sentence or tweet with optional per-token labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub id: String,
    pub tokens: Vec<Token>,
    pub labels: Option<Vec<LabelTag>>,
    pub source: Source,
}

impl LabeledSequence {
    /// Builds a sequence from pre-split surfaces, assigning offsets as if the
    /// surfaces were joined by single spaces.
    pub fn from_surfaces<S: AsRef<str>>(
        id: impl Into<String>,
        surfaces: &[S],
        labels: Option<Vec<LabelTag>>,
        source: Source,
    ) -> Self {
        let mut offset = 0;
        let tokens = surfaces
            .iter()
            .map(|s| {
                let surface = s.as_ref().to_lowercase();
                let len = s.as_ref().chars().count();
                let token = Token {
                    surface,
                    start: offset,
                    end: offset + len,
                };
                offset += len + 1;
                token
            })
            .collect();
        LabeledSequence {
            id: id.into(),
            tokens,
            labels,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// A copy without labels.
    pub fn unlabeled(&self) -> LabeledSequence {
        LabeledSequence {
            labels: None,
            ..self.clone()
        }
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    /// Checks length bounds, token shape and the BIO transition rule.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |position, message: String| CorpusError::Invalid {
            id: self.id.clone(),
            position,
            message,
        };
        if self.tokens.is_empty() {
            return Err(invalid(0, "empty sequence".into()));
        }
        if self.tokens.len() > self.source.max_len() {
            return Err(invalid(
                self.source.max_len(),
                format!("longer than {} tokens", self.source.max_len()),
            ));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.surface.is_empty() || tok.surface.chars().any(char::is_whitespace) {
                return Err(invalid(i, format!("bad token surface {:?}", tok.surface)));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.tokens.len() {
                return Err(invalid(
                    labels.len().min(self.tokens.len()),
                    format!("{} labels for {} tokens", labels.len(), self.tokens.len()),
                ));
            }
            let mut prev = None;
            for (i, &tag) in labels.iter().enumerate() {
                if !tag.may_follow(prev) {
                    let after = prev.map_or("sequence start".to_string(), |p| p.to_string());
                    return Err(invalid(i, format!("{tag} cannot follow {after}")));
                }
                prev = Some(tag);
            }
        }
        Ok(())
    }
}

/// Reads a CoNLL-style file: `surface<TAB>tag` (tag column optional but
/// all-or-nothing), blank lines between sequences, `#id <id>` and
/// `#source <source>` comment lines before a sequence.
pub fn read_conll(path: impl AsRef<Path>) -> Result<Vec<LabeledSequence>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_conll(&text, path)
}

struct Pending {
    id: Option<String>,
    source: Source,
    surfaces: Vec<String>,
    tags: Vec<LabelTag>,
    first_line: usize,
}

impl Pending {
    fn new() -> Self {
        Pending {
            id: None,
            source: Source::default(),
            surfaces: Vec::new(),
            tags: Vec::new(),
            first_line: 0,
        }
    }

    fn is_blank(&self) -> bool {
        self.id.is_none() && self.surfaces.is_empty()
    }
}

pub(crate) fn parse_conll(text: &str, path: &Path) -> Result<Vec<LabeledSequence>, CorpusError> {
    let parse_err = |line: usize, message: String| CorpusError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut out = Vec::new();
    let mut labeled: Option<bool> = None;
    let mut pending = Pending::new();

    let flush = |pending: &mut Pending, out: &mut Vec<LabeledSequence>, labeled: Option<bool>, line: usize| {
        if pending.is_blank() {
            return Ok(());
        }
        let p = std::mem::replace(pending, Pending::new());
        if p.surfaces.is_empty() {
            return Err(parse_err(line, "header without tokens".into()));
        }
        let id = p.id.unwrap_or_else(|| format!("seq-{}", out.len()));
        let labels = if labeled == Some(true) { Some(p.tags) } else { None };
        let mut seq = LabeledSequence::from_surfaces(id, &p.surfaces, labels, p.source);
        let max = seq.source.max_len();
        if seq.tokens.len() > max {
            log::warn!("sequence `{}` (line {}) truncated to {max} tokens", seq.id, p.first_line);
            seq.tokens.truncate(max);
            if let Some(l) = seq.labels.as_mut() {
                l.truncate(max);
            }
        }
        seq.validate()?;
        out.push(seq);
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut pending, &mut out, labeled, lineno)?;
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if !pending.surfaces.is_empty() {
                flush(&mut pending, &mut out, labeled, lineno)?;
            }
            if let Some(id) = rest.strip_prefix("id ") {
                pending.id = Some(id.trim().to_string());
            } else if let Some(src) = rest.strip_prefix("source ") {
                pending.source = src.trim().parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
            }
            if pending.first_line == 0 {
                pending.first_line = lineno;
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let has_tag = match cols.as_slice() {
            [s] if !s.is_empty() => false,
            [s, t] if !s.is_empty() && !t.is_empty() => true,
            _ => {
                return Err(parse_err(
                    lineno,
                    format!("expected `surface` or `surface<TAB>tag`, got {} columns", cols.len()),
                ))
            }
        };
        match labeled {
            None => labeled = Some(has_tag),
            Some(l) if l != has_tag => {
                return Err(parse_err(lineno, "tag column must be present on all lines or none".into()))
            }
            _ => {}
        }
        if cols[0].chars().any(char::is_whitespace) {
            return Err(parse_err(lineno, "token surface contains whitespace".into()));
        }
        if pending.surfaces.is_empty() && pending.first_line == 0 {
            pending.first_line = lineno;
        }
        pending.surfaces.push(cols[0].to_string());
        if has_tag {
            let tag = cols[1].parse().map_err(|e| parse_err(lineno, format!("{e}")))?;
            pending.tags.push(tag);
        }
    }
    let last = text.lines().count() + 1;
    flush(&mut pending, &mut out, labeled, last)?;
    Ok(out)
}

/// Writes sequences in the format accepted by [`read_conll`].
pub fn write_conll(sequences: &[LabeledSequence], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(to_conll_string(sequences).as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn to_conll_string(sequences: &[LabeledSequence]) -> String {
    let mut s = String::new();
    for seq in sequences {
        s.push_str("#id ");
        s.push_str(&seq.id);
        s.push('\n');
        if seq.source != Source::default() {
            s.push_str("#source ");
            s.push_str(seq.source.as_str());
            s.push('\n');
        }
        for (i, tok) in seq.tokens.iter().enumerate() {
            s.push_str(&tok.surface);
            if let Some(labels) = &seq.labels {
                s.push('\t');
                s.push_str(&labels[i].to_string());
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

/// Deterministic assignment of sequence ids to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub num_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Splits `sequences` into (train, held-out) for fold `k`.
    pub fn split<'a>(
        &self,
        sequences: &'a [LabeledSequence],
        k: usize,
    ) -> (Vec<&'a LabeledSequence>, Vec<&'a LabeledSequence>) {
        sequences
            .iter()
            .partition(|s| self.fold_of(&s.id) != Some(k))
    }
}

/// Sorts ids, shuffles them with a seeded generator and deals them
/// round-robin into `num_folds` folds.
pub fn assign_folds(
    sequences: &[LabeledSequence],
    num_folds: usize,
    seed: u64,
) -> Result<FoldAssignment, CorpusError> {
    let ids: BTreeSet<&str> = sequences.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != sequences.len() {
        return Err(CorpusError::Config("sequence ids must be unique for fold assignment".into()));
    }
    if num_folds < 2 || num_folds > ids.len() {
        return Err(CorpusError::Config(format!(
            "cannot split {} sequences into {num_folds} folds",
            ids.len()
        )));
    }
    let mut ids: Vec<&str> = ids.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % num_folds))
        .collect();
    Ok(FoldAssignment {
        num_folds,
        seed,
        assignment,
    })
}
