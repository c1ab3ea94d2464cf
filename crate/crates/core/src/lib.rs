//! Dictionary-augmented BiLSTM-CRF concept extraction with weak supervision.
//!
//! The pipeline: tokenize and read corpora ([`corpus`]), match dictionaries
//! into per-token bit vectors ([`gazetteer`]), optionally build weak labels
//! from dictionary mixtures ([`weaklabel`]), look up word and contextual
//! vectors ([`embeddings`]), encode with a two-layer BiLSTM ([`network`]),
//! decode with a linear-chain CRF ([`crf`]), train ([`training`]) and score
//! ([`evaluation`]).

pub mod checkpoint;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod evaluation;
pub mod gazetteer;
pub mod network;
pub mod training;
pub mod weaklabel;
