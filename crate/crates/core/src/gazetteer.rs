//! Dictionaries, full-match scanning and the per-token 7-bit dictionary vector.
//!
//! Matching is over whole lowercase tokens. A scan walks the token sequence
//! left to right and at each position takes the longest dictionary term that
//! starts there, then resumes after it. Matches from different dictionaries
//! are independent and may overlap.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{tokenize, Concept, Source, Token};

#[derive(Debug, Error)]
pub enum GazetteerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Semantic-type flags standing in for an external concept mapper.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SemFlag {
    #[serde(rename = "BODY-PART-SEMTYPE")]
    BodyPart,
    #[serde(rename = "SIGN-SYMPTOM-OR-DISEASE-SEMTYPE")]
    SignSymptomOrDisease,
}

/// What a dictionary's terms denote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DictKind {
    Concept(Concept),
    SemFlag(SemFlag),
}

impl DictKind {
    /// Bit the dictionary occupies when no explicit mapping is given.
    pub fn default_bit(self) -> DictBit {
        match self {
            DictKind::Concept(Concept::Sym) => DictBit::Symptom,
            DictKind::Concept(Concept::Severity) => DictBit::Severity,
            DictKind::Concept(Concept::Duration) => DictBit::Duration,
            DictKind::Concept(Concept::Intensifier) => DictBit::Intensifier,
            DictKind::Concept(Concept::Negation) => DictBit::Negation,
            DictKind::Concept(Concept::Bpoc) => DictBit::BodyPart,
            DictKind::SemFlag(_) => DictBit::Semantic,
        }
    }
}

impl fmt::Display for DictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DictKind::Concept(c) => write!(f, "{c}"),
            DictKind::SemFlag(SemFlag::BodyPart) => f.write_str("BODY-PART-SEMTYPE"),
            DictKind::SemFlag(SemFlag::SignSymptomOrDisease) => {
                f.write_str("SIGN-SYMPTOM-OR-DISEASE-SEMTYPE")
            }
        }
    }
}

impl FromStr for DictKind {
    type Err = GazetteerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "BODY-PART-SEMTYPE" => Ok(DictKind::SemFlag(SemFlag::BodyPart)),
            "SIGN-SYMPTOM-OR-DISEASE-SEMTYPE" => Ok(DictKind::SemFlag(SemFlag::SignSymptomOrDisease)),
            other => other
                .parse::<Concept>()
                .map(DictKind::Concept)
                .map_err(|_| GazetteerError::Config(format!("unknown dictionary kind `{other}`"))),
        }
    }
}

/// A multi-token term.
pub type Term = Vec<String>;

pub fn term_text(term: &[String]) -> String {
    term.join(" ")
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: HashMap<String, usize>,
    terminal: bool,
}

/// Token-level trie used by [`scan`].
#[derive(Debug, Clone)]
struct TermTrie {
    nodes: Vec<TrieNode>,
}

impl TermTrie {
    fn build<'a>(terms: impl IntoIterator<Item = &'a Term>) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for term in terms {
            let mut at = 0;
            for tok in term {
                at = match nodes[at].children.get(tok) {
                    Some(&next) => next,
                    None => {
                        nodes.push(TrieNode::default());
                        let next = nodes.len() - 1;
                        nodes[at].children.insert(tok.clone(), next);
                        next
                    }
                };
            }
            nodes[at].terminal = true;
        }
        TermTrie { nodes }
    }

    /// Length of the longest term that is a prefix of `tokens`.
    fn longest_prefix<'a>(&self, tokens: impl Iterator<Item = &'a str>) -> Option<usize> {
        let mut at = 0;
        let mut best = None;
        for (depth, tok) in tokens.enumerate() {
            match self.nodes[at].children.get(tok) {
                Some(&next) => at = next,
                None => break,
            }
            if self.nodes[at].terminal {
                best = Some(depth + 1);
            }
        }
        best
    }
}

/// A named set of lowercase multi-token terms.
#[derive(Debug, Clone)]
pub struct Dictionary {
    name: String,
    kind: DictKind,
    terms: BTreeSet<Term>,
    trie: TermTrie,
}

impl PartialEq for Dictionary {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.kind == other.kind && self.terms == other.terms
    }
}

impl Dictionary {
    /// Builds a dictionary; terms are lowercased and deduplicated. Empty
    /// terms or term tokens containing whitespace are rejected.
    pub fn new<I>(name: impl Into<String>, kind: DictKind, terms: I) -> Result<Self, GazetteerError>
    where
        I: IntoIterator<Item = Term>,
    {
        let name = name.into();
        let mut set = BTreeSet::new();
        for term in terms {
            if term.is_empty() {
                return Err(GazetteerError::Config(format!("dictionary `{name}` has an empty term")));
            }
            if term.iter().any(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
                return Err(GazetteerError::Config(format!(
                    "dictionary `{name}`: malformed term {term:?}"
                )));
            }
            set.insert(term.into_iter().map(|t| t.to_lowercase()).collect());
        }
        let trie = TermTrie::build(&set);
        Ok(Dictionary {
            name,
            kind,
            terms: set,
            trie,
        })
    }

    /// Builds a dictionary by tokenizing each phrase.
    pub fn from_phrases<'a>(
        name: impl Into<String>,
        kind: DictKind,
        phrases: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, GazetteerError> {
        let terms = phrases
            .into_iter()
            .map(phrase_to_term)
            .filter(|t| !t.is_empty());
        Dictionary::new(name, kind, terms)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> DictKind {
        self.kind
    }

    pub fn terms(&self) -> &BTreeSet<Term> {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn contains(&self, term: &[String]) -> bool {
        self.terms.contains(term)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// One term per line, sorted, tokens joined by single spaces.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for term in &self.terms {
            s.push_str(&term_text(term));
            s.push('\n');
        }
        s
    }

    /// SHA-256 over kind and sorted terms, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.to_string().as_bytes());
        h.update(b"\n");
        h.update(self.to_file_string().as_bytes());
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn phrase_to_term(phrase: &str) -> Term {
    tokenize(phrase, Source::ForumSentence)
        .into_iter()
        .map(|t| t.surface)
        .collect()
}

/// Loads a dictionary file: UTF-8, one term per line, `#` comments and blank
/// lines ignored. Each line is tokenized with the corpus tokenizer.
pub fn load_dictionary(
    path: impl AsRef<Path>,
    name: &str,
    kind: DictKind,
) -> Result<Dictionary, GazetteerError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GazetteerError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let phrases = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let dict = Dictionary::from_phrases(name, kind, phrases)?;
    if dict.is_empty() {
        return Err(GazetteerError::Config(format!(
            "dictionary `{name}` loaded from {} has no terms",
            path.display()
        )));
    }
    log::info!("loaded dictionary `{name}` ({kind}): {} terms", dict.len());
    Ok(dict)
}

/// A full match of one dictionary term over tokens `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSpan {
    pub dictionary: String,
    pub start: usize,
    pub end: usize,
    pub term: Term,
}

/// Leftmost-longest, non-overlapping full-token matching.
pub fn scan(dict: &Dictionary, tokens: &[Token]) -> Vec<MatchSpan> {
    let surfaces: Vec<&str> = tokens.iter().map(|t| t.surface.as_str()).collect();
    scan_surfaces(dict, &surfaces)
}

pub fn scan_surfaces(dict: &Dictionary, surfaces: &[&str]) -> Vec<MatchSpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < surfaces.len() {
        match dict.trie.longest_prefix(surfaces[i..].iter().copied()) {
            Some(len) => {
                spans.push(MatchSpan {
                    dictionary: dict.name.clone(),
                    start: i,
                    end: i + len,
                    term: surfaces[i..i + len].iter().map(|s| s.to_string()).collect(),
                });
                i += len;
            }
            None => i += 1,
        }
    }
    spans
}

/// Positions of the dictionary vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DictBit {
    #[serde(rename = "d1")]
    Symptom = 0,
    #[serde(rename = "d2")]
    Severity = 1,
    #[serde(rename = "d3")]
    Duration = 2,
    #[serde(rename = "d4")]
    Intensifier = 3,
    #[serde(rename = "d5")]
    Negation = 4,
    #[serde(rename = "d6")]
    BodyPart = 5,
    #[serde(rename = "d7")]
    Semantic = 6,
}

impl DictBit {
    pub const ALL: [DictBit; 7] = [
        DictBit::Symptom,
        DictBit::Severity,
        DictBit::Duration,
        DictBit::Intensifier,
        DictBit::Negation,
        DictBit::BodyPart,
        DictBit::Semantic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for DictBit {
    type Err = GazetteerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let idx = s
            .strip_prefix('d')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| (1..=7).contains(n))
            .ok_or_else(|| GazetteerError::Config(format!("unknown dictionary bit `{s}`")))?;
        Ok(DictBit::ALL[idx - 1])
    }
}

pub const DICT_DIM: usize = 7;

/// Per-token membership bits d1..d7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DictVector(pub [bool; DICT_DIM]);

impl DictVector {
    pub fn get(&self, bit: DictBit) -> bool {
        self.0[bit.index()]
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> [f64; DICT_DIM] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Dictionaries assigned to dictionary-vector bits.
///
/// Each bit holds at most one dictionary, except d7 which may hold one
/// lexicon of each semantic flag; their matches are unioned.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: Vec<(DictBit, Dictionary)>,
}

impl Registry {
    pub fn new(entries: Vec<(DictBit, Dictionary)>) -> Result<Self, GazetteerError> {
        let mut names = BTreeSet::new();
        for (i, (bit, dict)) in entries.iter().enumerate() {
            if !names.insert(dict.name()) {
                return Err(GazetteerError::Config(format!(
                    "duplicate dictionary name `{}`",
                    dict.name()
                )));
            }
            for (other_bit, other) in &entries[..i] {
                if other_bit != bit {
                    continue;
                }
                let both_semflags = *bit == DictBit::Semantic
                    && matches!(
                        (dict.kind(), other.kind()),
                        (DictKind::SemFlag(a), DictKind::SemFlag(b)) if a != b
                    );
                if !both_semflags {
                    return Err(GazetteerError::Config(format!(
                        "dictionaries `{}` and `{}` both claim bit {:?}",
                        other.name(),
                        dict.name(),
                        bit
                    )));
                }
            }
        }
        Ok(Registry { entries })
    }

    /// Assigns each dictionary to the default bit of its kind.
    pub fn from_dictionaries(dicts: Vec<Dictionary>) -> Result<Self, GazetteerError> {
        Registry::new(dicts.into_iter().map(|d| (d.kind().default_bit(), d)).collect())
    }

    pub fn entries(&self) -> &[(DictBit, Dictionary)] {
        &self.entries
    }

    pub fn get(&self, bit: DictBit) -> impl Iterator<Item = &Dictionary> {
        self.entries.iter().filter(move |(b, _)| *b == bit).map(|(_, d)| d)
    }

    /// Returns a registry with `dict` on `bit`, replacing whatever held it.
    pub fn replace(&self, bit: DictBit, dict: Dictionary) -> Result<Self, GazetteerError> {
        let mut entries: Vec<_> = self.entries.iter().filter(|(b, _)| *b != bit).cloned().collect();
        entries.push((bit, dict));
        entries.sort_by_key(|(b, _)| *b);
        Registry::new(entries)
    }

    /// SHA-256 over bit assignments and dictionary digests.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (bit, dict) in &self.entries {
            h.update(format!("{:?}\t{}\t{}\n", bit, dict.name(), dict.digest()).as_bytes());
        }
        hex(&h.finalize())
    }
}

/// One [`DictVector`] per token.
pub fn dict_vectors(registry: &Registry, tokens: &[Token]) -> Vec<DictVector> {
    let surfaces: Vec<&str> = tokens.iter().map(|t| t.surface.as_str()).collect();
    let mut out = vec![DictVector::default(); tokens.len()];
    for (bit, dict) in registry.entries() {
        for span in scan_surfaces(dict, &surfaces) {
            for v in &mut out[span.start..span.end] {
                v.0[bit.index()] = true;
            }
        }
    }
    out
}
