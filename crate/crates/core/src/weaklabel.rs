//! Weak supervision with a symptom dictionary.
//!
//! Unlabeled corpora are tagged by dictionary matching, and dictionaries are
//! merged in 20% steps: the donor terms missing from the base are sorted,
//! shuffled once with a seed and taken as a growing prefix, so every mixture
//! for a given (base, donor, seed) contains the smaller ones.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Concept, LabelTag, LabeledSequence};
use crate::gazetteer::{scan, term_text, DictKind, Dictionary, GazetteerError, Term};

/// Share of the donor dictionary to merge, in 20% steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Fraction(u32);

impl Fraction {
    pub const STEPS: [Fraction; 6] = [
        Fraction(0),
        Fraction(20),
        Fraction(40),
        Fraction(60),
        Fraction(80),
        Fraction(100),
    ];

    pub fn from_percent(pct: u32) -> Result<Self, GazetteerError> {
        if pct <= 100 && pct % 20 == 0 {
            Ok(Fraction(pct))
        } else {
            Err(GazetteerError::Config(format!(
                "fraction must be one of 0, 20, 40, 60, 80, 100 percent, got {pct}"
            )))
        }
    }

    /// Accepts `0.2`-style ratios or `20`-style percentages.
    pub fn parse(s: &str) -> Result<Self, GazetteerError> {
        let bad = || GazetteerError::Config(format!("bad fraction `{s}`"));
        let s = s.trim().trim_end_matches('%');
        let v: f64 = s.parse().map_err(|_| bad())?;
        // values up to 1 are ratios; 1% is not a legal step anyway
        let pct = if v <= 1.0 { v * 100.0 } else { v };
        let rounded = pct.round();
        if (pct - rounded).abs() > 1e-9 || rounded < 0.0 {
            return Err(bad());
        }
        Fraction::from_percent(rounded as u32)
    }

    pub fn percent(self) -> u32 {
        self.0
    }

    /// Number of items out of `count` included at this fraction, rounded up.
    pub fn take_of(self, count: usize) -> usize {
        (self.0 as usize * count).div_ceil(100)
    }
}

impl TryFrom<u32> for Fraction {
    type Error = GazetteerError;

    fn try_from(pct: u32) -> Result<Self, Self::Error> {
        Fraction::from_percent(pct)
    }
}

impl From<Fraction> for u32 {
    fn from(f: Fraction) -> u32 {
        f.0
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.0)
    }
}

/// A base dictionary plus a seeded prefix of the donor's extra terms.
#[derive(Debug, Clone)]
pub struct DictionaryMixture {
    pub base: Dictionary,
    pub donor: Dictionary,
    pub fraction: Fraction,
    pub seed: u64,
    /// Donor terms included, in shuffle order.
    pub manifest: Vec<Term>,
    pub merged: Dictionary,
}

/// JSON sidecar describing a mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub base: String,
    pub donor: String,
    pub fraction: Fraction,
    pub seed: u64,
    pub included_terms: Vec<String>,
}

impl DictionaryMixture {
    pub fn to_manifest(&self) -> MixtureManifest {
        MixtureManifest {
            base: self.base.name().to_string(),
            donor: self.donor.name().to_string(),
            fraction: self.fraction,
            seed: self.seed,
            included_terms: self.manifest.iter().map(|t| term_text(t)).collect(),
        }
    }
}

/// Merges `fraction` of the donor terms not already in `base` into `base`.
pub fn build_mixture(
    base: &Dictionary,
    donor: &Dictionary,
    fraction: Fraction,
    seed: u64,
) -> DictionaryMixture {
    let mut candidates: Vec<&Term> = donor.terms().iter().filter(|t| !base.contains(t)).collect();
    candidates.sort_by_cached_key(|t| term_text(t));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let manifest: Vec<Term> = candidates[..fraction.take_of(candidates.len())]
        .iter()
        .map(|t| (*t).clone())
        .collect();
    let name = format!("{}+{}@{}", base.name(), donor.name(), fraction.percent());
    let merged = Dictionary::new(
        name,
        base.kind(),
        base.terms().iter().cloned().chain(manifest.iter().cloned()),
    )
    .expect("terms of valid dictionaries are valid");

    DictionaryMixture {
        base: base.clone(),
        donor: donor.clone(),
        fraction,
        seed,
        manifest,
        merged,
    }
}

fn require_symptom(dict: &Dictionary) -> Result<(), GazetteerError> {
    if dict.kind() == DictKind::Concept(Concept::Sym) {
        Ok(())
    } else {
        Err(GazetteerError::Config(format!(
            "weak labeling needs a SYM dictionary, `{}` is {}",
            dict.name(),
            dict.kind()
        )))
    }
}

fn tag_sequence(dict: &Dictionary, seq: &LabeledSequence) -> LabeledSequence {
    let mut labels = vec![LabelTag::O; seq.len()];
    for span in scan(dict, &seq.tokens) {
        labels[span.start] = LabelTag::B(Concept::Sym);
        for l in &mut labels[span.start + 1..span.end] {
            *l = LabelTag::I(Concept::Sym);
        }
    }
    LabeledSequence {
        labels: Some(labels),
        ..seq.clone()
    }
}

/// Replaces labels with B-SYM/I-SYM over dictionary matches and O elsewhere.
pub fn weak_label(
    dict: &Dictionary,
    sequences: &[LabeledSequence],
) -> Result<Vec<LabeledSequence>, GazetteerError> {
    require_symptom(dict)?;
    Ok(sequences.iter().map(|s| tag_sequence(dict, s)).collect())
}

/// Keeps sequences with at least one dictionary match, in order.
pub fn filter_has_symptom(dict: &Dictionary, sequences: &[LabeledSequence]) -> Vec<LabeledSequence> {
    sequences
        .iter()
        .filter(|s| !scan(dict, &s.tokens).is_empty())
        .cloned()
        .collect()
}

/// Drops dictionary terms by exact text or by prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TermPredicate {
    Exact(String),
    Prefix(String),
}

impl TermPredicate {
    /// Parses one drop-list line; a trailing `*` makes it a prefix rule.
    pub fn parse_line(line: &str) -> Option<Self> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let normalize = |s: &str| {
            crate::corpus::tokenize(s, crate::corpus::Source::ForumSentence)
                .into_iter()
                .map(|t| t.surface)
                .collect::<Vec<_>>()
                .join(" ")
        };
        Some(match line.strip_suffix('*') {
            Some(prefix) => TermPredicate::Prefix(normalize(prefix)),
            None => TermPredicate::Exact(normalize(line)),
        })
    }

    pub fn matches(&self, term: &[String]) -> bool {
        let text = term_text(term);
        match self {
            TermPredicate::Exact(t) => text == *t,
            TermPredicate::Prefix(p) => text.starts_with(p.as_str()),
        }
    }
}

pub fn prune_terms(dict: &Dictionary, drop: &[TermPredicate]) -> Dictionary {
    let (removed, kept): (Vec<&Term>, Vec<&Term>) = dict
        .terms()
        .iter()
        .partition(|t| drop.iter().any(|p| p.matches(t)));
    for t in &removed {
        log::info!("pruned `{}` from `{}`", term_text(t), dict.name());
    }
    Dictionary::new(dict.name(), dict.kind(), kept.into_iter().cloned())
        .expect("subset of a valid dictionary is valid")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabelStats {
    pub sequences: usize,
    pub sequences_with_match: usize,
    pub spans: usize,
    pub covered_tokens: usize,
}

/// A corpus tagged with one mixture.
#[derive(Debug, Clone)]
pub struct WeakLabelRun {
    pub mixture: MixtureManifest,
    pub corpus_id: String,
    pub tagged: Vec<LabeledSequence>,
    pub stats: WeakLabelStats,
}

pub fn run_weak_label(
    mixture: &DictionaryMixture,
    corpus_id: &str,
    sequences: &[LabeledSequence],
) -> Result<WeakLabelRun, GazetteerError> {
    let tagged = weak_label(&mixture.merged, sequences)?;
    Ok(WeakLabelRun {
        mixture: mixture.to_manifest(),
        corpus_id: corpus_id.to_string(),
        stats: label_stats(&tagged),
        tagged,
    })
}

pub fn label_stats(tagged: &[LabeledSequence]) -> WeakLabelStats {
    let mut stats = WeakLabelStats {
        sequences: tagged.len(),
        ..Default::default()
    };
    for seq in tagged {
        let labels = seq.labels.as_deref().unwrap_or(&[]);
        let spans = labels.iter().filter(|l| matches!(l, LabelTag::B(_))).count();
        stats.spans += spans;
        stats.covered_tokens += labels.iter().filter(|l| **l != LabelTag::O).count();
        if spans > 0 {
            stats.sequences_with_match += 1;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Source};

    fn sym(name: &str, phrases: &[&str]) -> Dictionary {
        Dictionary::from_phrases(name, DictKind::Concept(Concept::Sym), phrases.iter().copied()).unwrap()
    }

    fn seq(id: &str, text: &str) -> LabeledSequence {
        LabeledSequence {
            id: id.into(),
            tokens: tokenize(text, Source::Tweet),
            labels: None,
            source: Source::Tweet,
        }
    }

    fn labels(s: &LabeledSequence) -> Vec<String> {
        s.labels.as_ref().unwrap().iter().map(|l| l.to_string()).collect()
    }

    #[test]
    fn weak_label_examples() {
        let out = weak_label(&sym("d", &["fever"]), &[seq("a", "no fever though")]).unwrap();
        assert_eq!(labels(&out[0]), ["O", "B-SYM", "O"]);

        let out = weak_label(&sym("d", &["sore throat"]), &[seq("a", "sore throat!!")]).unwrap();
        assert_eq!(labels(&out[0]), ["B-SYM", "I-SYM", "O"]);

        let empty = Dictionary::new("e", DictKind::Concept(Concept::Sym), Vec::new()).unwrap();
        let out = weak_label(&empty, &[seq("a", "sore throat")]).unwrap();
        assert_eq!(labels(&out[0]), ["O", "O"]);
    }

    #[test]
    fn weak_label_overwrites_and_needs_sym() {
        let mut s = seq("a", "fever");
        s.labels = Some(vec![LabelTag::B(Concept::Severity)]);
        let out = weak_label(&sym("d", &["fever"]), &[s]).unwrap();
        assert_eq!(labels(&out[0]), ["B-SYM"]);

        let neg = Dictionary::from_phrases("n", DictKind::Concept(Concept::Negation), ["no"]).unwrap();
        assert!(weak_label(&neg, &[seq("a", "no")]).is_err());
    }

    #[test]
    fn filter_examples() {
        let seqs = vec![seq("a", "hello"), seq("b", "high fever"), seq("c", "bye")];
        let kept = filter_has_symptom(&sym("d", &["fever"]), &seqs);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "b");

        let empty = Dictionary::new("e", DictKind::Concept(Concept::Sym), Vec::new()).unwrap();
        assert!(filter_has_symptom(&empty, &seqs).is_empty());
        assert_eq!(filter_has_symptom(&sym("d", &["hello", "fever", "bye"]), &seqs), seqs);
    }

    fn numbered(name: &str, prefix: &str, n: usize) -> Dictionary {
        let phrases: Vec<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
        Dictionary::from_phrases(name, DictKind::Concept(Concept::Sym), phrases.iter().map(String::as_str))
            .unwrap()
    }

    #[test]
    fn mixture_sizes() {
        let base = numbered("base", "a", 10);
        let donor = numbered("donor", "b", 10);
        assert_eq!(build_mixture(&base, &donor, Fraction(0), 1).merged.terms(), base.terms());
        assert_eq!(build_mixture(&base, &donor, Fraction(20), 1).merged.len(), 12);
        assert_eq!(build_mixture(&base, &donor, Fraction(100), 1).merged.len(), 20);

        // ceil: 20% of 7 candidates is 2
        let donor = numbered("donor", "b", 7);
        assert_eq!(build_mixture(&base, &donor, Fraction(20), 1).manifest.len(), 2);
    }

    #[test]
    fn mixture_skips_shared_terms() {
        let base = sym("base", &["fever", "cough"]);
        let donor = sym("donor", &["fever", "chills", "aches"]);
        let m = build_mixture(&base, &donor, Fraction(100), 3);
        assert_eq!(m.manifest.len(), 2);
        assert!(!m.manifest.contains(&vec!["fever".to_string()]));
    }

    #[test]
    fn mixtures_nested() {
        let base = numbered("base", "a", 5);
        let donor = numbered("donor", "b", 23);
        let manifests: Vec<_> = Fraction::STEPS
            .iter()
            .map(|&f| build_mixture(&base, &donor, f, 99).manifest)
            .collect();
        for w in manifests.windows(2) {
            assert!(w[1].starts_with(&w[0]));
        }
    }

    #[test]
    fn full_mixture_symmetric() {
        let forum_base = sym("forum-base", &["fever", "smell", "blood oxygen levels"]);
        let tweet_base = sym("tweet-base", &["fever", "loss of taste and smell", "chills"]);
        let a = build_mixture(&forum_base, &tweet_base, Fraction(100), 5);
        let b = build_mixture(&tweet_base, &forum_base, Fraction(100), 11);
        assert_eq!(a.merged.terms(), b.merged.terms());
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(Fraction::parse("0.2").unwrap(), Fraction(20));
        assert_eq!(Fraction::parse("20").unwrap(), Fraction(20));
        assert_eq!(Fraction::parse("40%").unwrap(), Fraction(40));
        assert_eq!(Fraction::parse("1.0").unwrap(), Fraction(100));
        assert_eq!(Fraction::parse("1").unwrap(), Fraction(100));
        assert_eq!(Fraction::parse("100").unwrap(), Fraction(100));
        assert_eq!(Fraction::parse("0").unwrap(), Fraction(0));
        assert!(Fraction::parse("0.3").is_err());
        assert!(Fraction::parse("30").is_err());
        assert!(Fraction::parse("abc").is_err());
    }

    #[test]
    fn prune_examples() {
        let d = sym("tweet-base", &["102 fever", "103+ fevers", "anxiety attack", "anxiety", "cough"]);
        let drop: Vec<_> = ["102 fever", "anxiety*"]
            .iter()
            .filter_map(|l| TermPredicate::parse_line(l))
            .collect();
        let pruned = prune_terms(&d, &drop);
        let texts: Vec<String> = pruned.terms().iter().map(|t| term_text(t)).collect();
        assert_eq!(texts, ["103 + fevers", "cough"]);
        assert_eq!(prune_terms(&d, &[]), d);

        let all = prune_terms(&d, &[TermPredicate::Prefix(String::new())]);
        assert!(all.is_empty());
    }

    #[test]
    fn stats_count_spans() {
        let out = weak_label(&sym("d", &["sore throat", "fever"]), &[seq("a", "sore throat and fever"), seq("b", "ok")])
            .unwrap();
        let s = label_stats(&out);
        assert_eq!(
            s,
            WeakLabelStats {
                sequences: 2,
                sequences_with_match: 1,
                spans: 2,
                covered_tokens: 3
            }
        );
    }
}
