#![allow(dead_code)]

pub mod tables;

use std::sync::Arc;

use dictag::corpus::{Concept, LabelTag, LabeledSequence, Source};
use dictag::embeddings::StaticEmbeddingTable;
use dictag::gazetteer::{DictBit, DictKind, Dictionary, Registry};
use dictag::network::Resources;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A corpus whose symptom spans can only be recognised through dictionary
/// membership: every vocabulary item is a made-up word with a random vector.
pub struct SyntheticTask {
    pub train: Vec<LabeledSequence>,
    pub heldout: Vec<LabeledSequence>,
    pub resources: Resources,
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn terms(prefix: &str, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    (0..n)
        .map(|i| {
            let len = rng.gen_range(1..=2);
            (0..len).map(|j| format!("{prefix}{i}x{j}")).collect()
        })
        .collect()
}

fn sequences(
    id_prefix: &str,
    count: usize,
    fillers: &[String],
    symptoms: &[Vec<String>],
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledSequence> {
    (0..count)
        .map(|n| {
            let mut surfaces = Vec::new();
            let mut labels = Vec::new();
            let spans = rng.gen_range(1..=2);
            for _ in 0..spans {
                for _ in 0..rng.gen_range(1..=3) {
                    surfaces.push(fillers.choose(rng).unwrap().clone());
                    labels.push(LabelTag::O);
                }
                let term = symptoms.choose(rng).unwrap();
                for (k, w) in term.iter().enumerate() {
                    surfaces.push(w.clone());
                    labels.push(if k == 0 {
                        LabelTag::B(Concept::Sym)
                    } else {
                        LabelTag::I(Concept::Sym)
                    });
                }
            }
            surfaces.push(fillers.choose(rng).unwrap().clone());
            labels.push(LabelTag::O);
            LabeledSequence::from_surfaces(format!("{id_prefix}{n:02}"), &surfaces, Some(labels), Source::Tweet)
        })
        .collect()
}

/// 20 training and 20 held-out sequences with disjoint vocabularies; the
/// symptom dictionary covers the spans of both.
pub fn synthetic_task(seed: u64, dim: usize) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_fill = words("tf", 12);
    let held_fill = words("hf", 12);
    let train_sym = terms("ts", 8, &mut rng);
    let held_sym = terms("hs", 8, &mut rng);
    let train = sequences("train-", 20, &train_fill, &train_sym, &mut rng);
    let heldout = sequences("held-", 20, &held_fill, &held_sym, &mut rng);
    let dict = Dictionary::new(
        "symptoms",
        DictKind::Concept(Concept::Sym),
        train_sym.iter().chain(&held_sym).cloned(),
    )
    .unwrap();
    let registry = Registry::new(vec![(DictBit::Symptom, dict)]).unwrap();
    SyntheticTask {
        train,
        heldout,
        resources: Resources {
            table: Arc::new(StaticEmbeddingTable::random(dim, seed ^ 0x5eed)),
            store: None,
            vocab: None,
            registry,
        },
    }
}
