//! Two-layer BiLSTM encoder with dictionary-vector injection, optional
//! attention, log-softmax emissions and hand-written backpropagation.
//!
//! Layer 1 reads static word vectors (plus contextual vectors for the BERT
//! variant, plus the dictionary bits under DICT1). Under DICT2 the dictionary
//! bits are appended to the layer-1 outputs before layer 2. Attention, when
//! enabled, produces a context vector per position that is concatenated to
//! the layer-2 output before the emission projection.
//!
//! Each direction uses the standard cell with gates ordered input, forget,
//! candidate, output:
//!
//! ```text
//! z = W x_t + U h_prev + b
//! c_t = sigmoid(z_f) * c_prev + sigmoid(z_i) * tanh(z_g)
//! h_t = sigmoid(z_o) * tanh(c_t)
//! ```

use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, LabelSet, LabeledSequence};
use crate::crf::{self, CrfError, CrfParams};
use crate::embeddings::{collapse_to_tokens, expand_to_pieces, wordpiece, ContextualStore, EmbeddingError, PieceAlignment, PieceVocab, StaticEmbeddingTable};
use crate::gazetteer::{dict_vectors, Registry, DICT_DIM};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input width {actual} does not match the configured {expected}")]
    Width { expected: usize, actual: usize },
    #[error("non-finite activation or loss in batch {batch}")]
    Numeric { batch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Crf(#[from] CrfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    LstmCrf,
    BertLstmCrf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictMode {
    None,
    Dict1,
    Dict2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Attention {
    None,
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dict_mode: DictMode,
    pub attention: Attention,
    pub hidden_size: usize,
    pub static_dim: usize,
    #[serde(default)]
    pub contextual_dim: usize,
    pub dict_dim: usize,
    pub label_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, dict_mode: DictMode, attention: Attention, label_count: usize) -> Self {
        ModelConfig {
            variant,
            dict_mode,
            attention,
            hidden_size: 100,
            static_dim: 300,
            contextual_dim: if variant == Variant::BertLstmCrf { 768 } else { 0 },
            dict_dim: DICT_DIM,
            label_count,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let fail = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.attention != Attention::None && self.variant == Variant::BertLstmCrf {
            return fail("attention is only available for the lstm-crf variant");
        }
        if self.dict_dim != DICT_DIM {
            return fail("dict_dim must be 7");
        }
        if self.hidden_size == 0 || self.static_dim == 0 || self.label_count == 0 {
            return fail("hidden_size, static_dim and label_count must be positive");
        }
        if self.variant == Variant::BertLstmCrf && self.contextual_dim == 0 {
            return fail("bert-lstm-crf needs a positive contextual_dim");
        }
        if self.variant == Variant::LstmCrf && self.contextual_dim != 0 {
            return fail("lstm-crf takes no contextual vectors; set contextual_dim = 0");
        }
        Ok(())
    }

    pub fn layer1_width(&self) -> usize {
        let mut w = self.static_dim;
        if self.variant == Variant::BertLstmCrf {
            w += self.contextual_dim;
        }
        if self.dict_mode == DictMode::Dict1 {
            w += self.dict_dim;
        }
        w
    }

    pub fn layer2_width(&self) -> usize {
        2 * self.hidden_size + if self.dict_mode == DictMode::Dict2 { self.dict_dim } else { 0 }
    }

    /// Width of the vectors fed to the emission projection.
    pub fn encoder_width(&self) -> usize {
        match self.attention {
            Attention::None => 2 * self.hidden_size,
            _ => 4 * self.hidden_size,
        }
    }

    /// Every configuration allowed by [`ModelConfig::validate`] for the
    /// given shapes.
    pub fn legal_combinations(base: &ModelConfig) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for variant in [Variant::LstmCrf, Variant::BertLstmCrf] {
            for dict_mode in [DictMode::None, DictMode::Dict1, DictMode::Dict2] {
                for attention in [Attention::None, Attention::SelfAttention, Attention::Cross] {
                    let cfg = ModelConfig {
                        variant,
                        dict_mode,
                        attention,
                        contextual_dim: match variant {
                            Variant::LstmCrf => 0,
                            Variant::BertLstmCrf => base.contextual_dim.max(1),
                        },
                        ..base.clone()
                    };
                    if cfg.validate().is_ok() {
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

/// One LSTM direction: `w_ih` is `4H x I`, `w_hh` is `4H x H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    pub w_ih: Array2<f64>,
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmLayer {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

/// Query/key/value projections, each `2H x 2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// All trainable tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer1: BiLstmLayer,
    pub layer2: BiLstmLayer,
    pub attention: Option<AttentionParams>,
    pub emit_w: Array2<f64>,
    pub emit_b: Array1<f64>,
    pub crf: CrfParams,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..=bound))
}

impl LstmDirection {
    fn zeros(input: usize, hidden: usize) -> Self {
        LstmDirection {
            w_ih: Array2::zeros((4 * hidden, input)),
            w_hh: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmDirection {
            w_ih: uniform(rng, (4 * hidden, input), bound),
            w_hh: uniform(rng, (4 * hidden, hidden), bound),
            bias,
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }
}

impl BiLstmLayer {
    fn zeros(input: usize, hidden: usize) -> Self {
        BiLstmLayer {
            fwd: LstmDirection::zeros(input, hidden),
            bwd: LstmDirection::zeros(input, hidden),
        }
    }

    fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        BiLstmLayer {
            fwd: LstmDirection::init(rng, input, hidden),
            bwd: LstmDirection::init(rng, input, hidden),
        }
    }
}

impl ModelParams {
    /// All-zero parameters (fixed CRF entries stay at negative infinity).
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_size;
        ModelParams {
            layer1: BiLstmLayer::zeros(config.layer1_width(), h),
            layer2: BiLstmLayer::zeros(config.layer2_width(), h),
            attention: (config.attention != Attention::None).then(|| AttentionParams {
                wq: Array2::zeros((2 * h, 2 * h)),
                wk: Array2::zeros((2 * h, 2 * h)),
                wv: Array2::zeros((2 * h, 2 * h)),
            }),
            emit_w: Array2::zeros((config.label_count, config.encoder_width())),
            emit_b: Array1::zeros(config.label_count),
            crf: CrfParams::zeros(config.label_count),
        }
    }

    /// Seeded initialization: LSTM weights uniform in `±1/sqrt(H)` with
    /// forget bias 1, projections uniform in `±1/sqrt(fan_in)`, zero CRF.
    pub fn init(config: &ModelConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let h = config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layer1 = BiLstmLayer::init(&mut rng, config.layer1_width(), h);
        let layer2 = BiLstmLayer::init(&mut rng, config.layer2_width(), h);
        let attention = (config.attention != Attention::None).then(|| {
            let b = 1.0 / ((2 * h) as f64).sqrt();
            AttentionParams {
                wq: uniform(&mut rng, (2 * h, 2 * h), b),
                wk: uniform(&mut rng, (2 * h, 2 * h), b),
                wv: uniform(&mut rng, (2 * h, 2 * h), b),
            }
        });
        let emit_w = uniform(
            &mut rng,
            (config.label_count, config.encoder_width()),
            1.0 / (config.encoder_width() as f64).sqrt(),
        );
        Ok(ModelParams {
            layer1,
            layer2,
            attention,
            emit_w,
            emit_b: Array1::zeros(config.label_count),
            crf: CrfParams::zeros(config.label_count),
        })
    }

    /// A zeroed copy with the same shapes, for accumulating gradients.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, _, values) in g.tensors_mut() {
            values.fill(0.0);
        }
        g
    }

    /// Named tensors in a fixed order: name, shape, row-major values.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (lname, layer) in [("l1", &self.layer1), ("l2", &self.layer2)] {
            for (dname, dir) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                out.push((format!("{lname}.{dname}.w_ih"), dir.w_ih.shape().to_vec(), slice(&dir.w_ih)));
                out.push((format!("{lname}.{dname}.w_hh"), dir.w_hh.shape().to_vec(), slice(&dir.w_hh)));
                out.push((format!("{lname}.{dname}.bias"), dir.bias.shape().to_vec(), slice1(&dir.bias)));
            }
        }
        if let Some(a) = &self.attention {
            out.push(("attn.wq".into(), a.wq.shape().to_vec(), slice(&a.wq)));
            out.push(("attn.wk".into(), a.wk.shape().to_vec(), slice(&a.wk)));
            out.push(("attn.wv".into(), a.wv.shape().to_vec(), slice(&a.wv)));
        }
        out.push(("emit.w".into(), self.emit_w.shape().to_vec(), slice(&self.emit_w)));
        out.push(("emit.b".into(), self.emit_b.shape().to_vec(), slice1(&self.emit_b)));
        out.push(("crf.transitions".into(), self.crf.transitions.shape().to_vec(), slice(&self.crf.transitions)));
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let mut out = Vec::new();
        for (lname, layer) in [("l1", &mut self.layer1), ("l2", &mut self.layer2)] {
            for (dname, dir) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                let sh = dir.w_ih.shape().to_vec();
                out.push((format!("{lname}.{dname}.w_ih"), sh, slice_mut(&mut dir.w_ih)));
                let sh = dir.w_hh.shape().to_vec();
                out.push((format!("{lname}.{dname}.w_hh"), sh, slice_mut(&mut dir.w_hh)));
                let sh = dir.bias.shape().to_vec();
                out.push((format!("{lname}.{dname}.bias"), sh, slice1_mut(&mut dir.bias)));
            }
        }
        if let Some(a) = &mut self.attention {
            let sh = a.wq.shape().to_vec();
            out.push(("attn.wq".into(), sh.clone(), slice_mut(&mut a.wq)));
            out.push(("attn.wk".into(), sh.clone(), slice_mut(&mut a.wk)));
            out.push(("attn.wv".into(), sh, slice_mut(&mut a.wv)));
        }
        let sh = self.emit_w.shape().to_vec();
        out.push(("emit.w".into(), sh, slice_mut(&mut self.emit_w)));
        let sh = self.emit_b.shape().to_vec();
        out.push(("emit.b".into(), sh, slice1_mut(&mut self.emit_b)));
        let sh = self.crf.transitions.shape().to_vec();
        out.push(("crf.transitions".into(), sh, slice_mut(&mut self.crf.transitions)));
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// `self += scale * other` over every finite entry.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                if x.is_finite() {
                    *x += scale * y;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        // the fixed CRF entries are the only legitimate infinities
        self.tensors()
            .iter()
            .filter(|(name, _, _)| name != "crf.transitions")
            .all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
            && self.crf.transitions.iter().all(|x| !x.is_nan() && *x != f64::INFINITY)
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Embedding table, optional contextual store and piece vocabulary, and the
/// dictionary registry used to build model inputs. The large read-only parts
/// are shared so runs differing only in dictionaries can clone cheaply.
#[derive(Debug, Clone)]
pub struct Resources {
    pub table: Arc<StaticEmbeddingTable>,
    pub store: Option<Arc<ContextualStore>>,
    pub vocab: Option<Arc<PieceVocab>>,
    pub registry: Registry,
}

/// Position-level inputs of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Layer-1 input rows.
    pub layer1: Array2<f64>,
    /// Dictionary bits per position (always present, used by DICT1/DICT2).
    pub dicts: Array2<f64>,
    /// Piece alignment for the BERT variant, `None` for token-level input.
    pub alignment: Option<PieceAlignment>,
    /// Gold label indices per position, when the sequence is labeled.
    pub labels: Option<Vec<usize>>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.layer1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.layer1.nrows() == 0
    }
}

/// Builds `concat(v_t [, b_t] [, d_t under DICT1])` rows. For the BERT
/// variant the word vectors, dictionary bits and labels are repeated once
/// per word piece and the contextual rows come from the store.
pub fn build_inputs(
    seq: &LabeledSequence,
    resources: &Resources,
    labels: &LabelSet,
    config: &ModelConfig,
) -> Result<ModelInput, NetworkError> {
    if resources.table.dim() != config.static_dim {
        return Err(NetworkError::Width {
            expected: config.static_dim,
            actual: resources.table.dim(),
        });
    }
    let words: Vec<Vec<f64>> = seq.tokens.iter().map(|t| resources.table.lookup(&t.surface)).collect();
    let dicts: Vec<[f64; DICT_DIM]> = dict_vectors(&resources.registry, &seq.tokens)
        .iter()
        .map(|d| d.to_f64())
        .collect();
    let gold: Option<Vec<usize>> = seq
        .labels
        .as_ref()
        .map(|ls| ls.iter().map(|&l| labels.index_of(l)).collect::<Result<_, _>>())
        .transpose()?;

    let (words, dicts, gold, context, alignment) = match config.variant {
        Variant::LstmCrf => (words, dicts, gold, None, None),
        Variant::BertLstmCrf => {
            let vocab = resources
                .vocab
                .as_ref()
                .ok_or_else(|| NetworkError::Config("bert-lstm-crf needs a piece vocabulary".into()))?;
            let store = resources
                .store
                .as_ref()
                .ok_or_else(|| NetworkError::Config("bert-lstm-crf needs a contextual store".into()))?;
            if store.dim() != config.contextual_dim {
                return Err(NetworkError::Width {
                    expected: config.contextual_dim,
                    actual: store.dim(),
                });
            }
            let alignment = wordpiece(&seq.tokens, vocab);
            let ctx = store.get(&seq.id)?;
            if ctx.rows != alignment.piece_count() {
                return Err(NetworkError::Shape(format!(
                    "sequence `{}` has {} pieces but {} contextual rows",
                    seq.id,
                    alignment.piece_count(),
                    ctx.rows
                )));
            }
            let words = expand_to_pieces(&alignment, &words)?;
            let dicts = expand_to_pieces(&alignment, &dicts)?;
            let gold = gold.map(|g| expand_to_pieces(&alignment, &g)).transpose()?;
            (words, dicts, gold, Some(ctx), Some(alignment))
        }
    };

    let len = words.len();
    let width = config.layer1_width();
    let mut layer1 = Array2::zeros((len, width));
    for (t, mut row) in layer1.outer_iter_mut().enumerate() {
        let mut col = 0;
        for &v in &words[t] {
            row[col] = v;
            col += 1;
        }
        if let Some(ctx) = context {
            for &v in ctx.row(t) {
                row[col] = f64::from(v);
                col += 1;
            }
        }
        if config.dict_mode == DictMode::Dict1 {
            for &v in &dicts[t] {
                row[col] = v;
                col += 1;
            }
        }
        debug_assert_eq!(col, width);
    }
    let dicts = Array2::from_shape_fn((len, DICT_DIM), |(t, j)| dicts[t][j]);
    Ok(ModelInput {
        layer1,
        dicts,
        alignment,
        labels: gold,
    })
}

/// Up to batch-size inputs padded to a common length.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub id: usize,
    pub layer1: Vec<Array2<f64>>,
    pub dicts: Vec<Array2<f64>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Option<Vec<usize>>>,
}

impl SequenceBatch {
    pub fn from_inputs<'a>(id: usize, inputs: impl IntoIterator<Item = &'a ModelInput>) -> Self {
        let inputs: Vec<&ModelInput> = inputs.into_iter().collect();
        let max_len = inputs.iter().map(|i| i.len()).max().unwrap_or(0);
        let pad = |m: &Array2<f64>| {
            let mut p = Array2::zeros((max_len, m.ncols()));
            p.slice_mut(s![..m.nrows(), ..]).assign(m);
            p
        };
        SequenceBatch {
            id,
            layer1: inputs.iter().map(|i| pad(&i.layer1)).collect(),
            dicts: inputs.iter().map(|i| pad(&i.dicts)).collect(),
            lengths: inputs.iter().map(|i| i.len()).collect(),
            labels: inputs.iter().map(|i| i.labels.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.layer1.first().map_or(0, |m| m.nrows())
    }

    /// True for real (unpadded) positions.
    pub fn mask(&self, item: usize, t: usize) -> bool {
        t < self.lengths[item]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one direction over a sequence, indexed by position.
#[derive(Debug, Clone)]
struct DirState {
    /// Post-activation gates `[i, f, g, o]`, `T x 4H`.
    gates: Array2<f64>,
    cell: Array2<f64>,
    hidden: Array2<f64>,
}

impl LstmDirection {
    fn forward(&self, x: ArrayView2<f64>, reverse: bool) -> DirState {
        let len = x.nrows();
        let h = self.hidden();
        let pre = x.dot(&self.w_ih.t()) + &self.bias;
        let mut gates = Array2::zeros((len, 4 * h));
        let mut cell = Array2::zeros((len, h));
        let mut hidden = Array2::zeros((len, h));
        let mut h_prev = Array1::zeros(h);
        let mut c_prev = Array1::zeros(h);
        for step in 0..len {
            let t = if reverse { len - 1 - step } else { step };
            let z = &pre.row(t) + &self.w_hh.dot(&h_prev);
            let mut g = gates.row_mut(t);
            for k in 0..h {
                g[k] = sigmoid(z[k]);
                g[h + k] = sigmoid(z[h + k]);
                g[2 * h + k] = z[2 * h + k].tanh();
                g[3 * h + k] = sigmoid(z[3 * h + k]);
            }
            for k in 0..h {
                let c: f64 = g[h + k] * c_prev[k] + g[k] * g[2 * h + k];
                cell[[t, k]] = c;
                hidden[[t, k]] = g[3 * h + k] * c.tanh();
            }
            h_prev = hidden.row(t).to_owned();
            c_prev = cell.row(t).to_owned();
        }
        DirState { gates, cell, hidden }
    }

    /// Accumulates parameter gradients into `grad` and returns `d x`.
    fn backward(
        &self,
        x: ArrayView2<f64>,
        state: &DirState,
        d_hidden: ArrayView2<f64>,
        reverse: bool,
        grad: &mut LstmDirection,
    ) -> Array2<f64> {
        let len = x.nrows();
        let h = self.hidden();
        let mut dz = Array2::zeros((len, 4 * h));
        let mut h_prev_all = Array2::zeros((len, h));
        let mut dh_next = Array1::<f64>::zeros(h);
        let mut dc_next = Array1::<f64>::zeros(h);
        let zero = Array1::<f64>::zeros(h);

        for step in (0..len).rev() {
            let t = if reverse { len - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else if reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let c_prev = prev.map_or(zero.view(), |p| state.cell.row(p));
            if let Some(p) = prev {
                h_prev_all.row_mut(t).assign(&state.hidden.row(p));
            }
            let g = state.gates.row(t);
            let mut dzt = dz.row_mut(t);
            let mut dc = Array1::zeros(h);
            for k in 0..h {
                let (ig, fg, cg, og) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tanh_c = state.cell[[t, k]].tanh();
                let dh = d_hidden[[t, k]] + dh_next[k];
                let dck = dc_next[k] + dh * og * (1.0 - tanh_c * tanh_c);
                dc[k] = dck;
                dzt[k] = dck * cg * ig * (1.0 - ig);
                dzt[h + k] = dck * c_prev[k] * fg * (1.0 - fg);
                dzt[2 * h + k] = dck * ig * (1.0 - cg * cg);
                dzt[3 * h + k] = dh * tanh_c * og * (1.0 - og);
            }
            dh_next = self.w_hh.t().dot(&dzt);
            dc_next = &dc * &g.slice(s![h..2 * h]);
        }

        grad.w_ih += &dz.t().dot(&x);
        grad.w_hh += &dz.t().dot(&h_prev_all);
        grad.bias += &dz.sum_axis(Axis(0));
        dz.dot(&self.w_ih)
    }
}

#[derive(Debug, Clone)]
struct BiState {
    fwd: DirState,
    bwd: DirState,
}

impl BiLstmLayer {
    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, BiState) {
        let fwd = self.fwd.forward(x, false);
        let bwd = self.bwd.forward(x, true);
        let out = concatenate(Axis(1), &[fwd.hidden.view(), bwd.hidden.view()]).expect("same row count");
        (out, BiState { fwd, bwd })
    }

    fn backward(&self, x: ArrayView2<f64>, state: &BiState, d_out: ArrayView2<f64>, grad: &mut BiLstmLayer) -> Array2<f64> {
        let h = self.fwd.hidden();
        let dx_f = self.fwd.backward(x, &state.fwd, d_out.slice(s![.., ..h]), false, &mut grad.fwd);
        let dx_b = self.bwd.backward(x, &state.bwd, d_out.slice(s![.., h..]), true, &mut grad.bwd);
        dx_f + dx_b
    }
}

fn softmax_in_place(mut v: ndarray::ArrayViewMut1<f64>) {
    let max = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    v.mapv_inplace(|x| (x - max).exp());
    let sum = v.sum();
    v.mapv_inplace(|x| x / sum);
}

#[derive(Debug, Clone)]
enum AttnState {
    SelfAttn {
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        weights: Array2<f64>,
    },
    Cross {
        query_in: Array1<f64>,
        q: Array1<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        weights: Array1<f64>,
    },
}

/// Final state of a BiLSTM: forward-last concatenated with backward-first.
fn final_state(h2: ArrayView2<f64>, hidden: usize) -> Array1<f64> {
    let last = h2.nrows() - 1;
    concatenate(Axis(0), &[h2.slice(s![last, ..hidden]), h2.slice(s![0, hidden..])]).expect("1-d concat")
}

impl AttentionParams {
    fn forward(&self, kind: Attention, h2: ArrayView2<f64>) -> (Array2<f64>, AttnState) {
        let scale = 1.0 / (self.wq.nrows() as f64).sqrt();
        let k = h2.dot(&self.wk.t());
        let v = h2.dot(&self.wv.t());
        match kind {
            Attention::SelfAttention => {
                let q = h2.dot(&self.wq.t());
                let mut weights = q.dot(&k.t()) * scale;
                for row in weights.outer_iter_mut() {
                    softmax_in_place(row);
                }
                let context = weights.dot(&v);
                (context, AttnState::SelfAttn { q, k, v, weights })
            }
            Attention::Cross => {
                let query_in = final_state(h2, h2.ncols() / 2);
                let q = self.wq.dot(&query_in);
                let mut weights = k.dot(&q) * scale;
                softmax_in_place(weights.view_mut());
                let c = v.t().dot(&weights);
                let context = Array2::from_shape_fn((h2.nrows(), c.len()), |(_, j)| c[j]);
                (context, AttnState::Cross { query_in, q, k, v, weights })
            }
            Attention::None => unreachable!("no attention parameters without attention"),
        }
    }

    /// Accumulates into `grad` and returns the gradient w.r.t. `h2` coming
    /// through the attention path.
    fn backward(&self, h2: ArrayView2<f64>, state: &AttnState, d_context: ArrayView2<f64>, grad: &mut AttentionParams) -> Array2<f64> {
        let scale = 1.0 / (self.wq.nrows() as f64).sqrt();
        let mut dh2 = Array2::zeros(h2.raw_dim());
        match state {
            AttnState::SelfAttn { q, k, v, weights } => {
                let dp = d_context.dot(&v.t());
                let dv = weights.t().dot(&d_context);
                let mut ds = Array2::zeros(weights.raw_dim());
                for (i, mut row) in ds.outer_iter_mut().enumerate() {
                    let p = weights.row(i);
                    let dpi = dp.row(i);
                    let dot = p.dot(&dpi);
                    for j in 0..row.len() {
                        row[j] = p[j] * (dpi[j] - dot) * scale;
                    }
                }
                let dq = ds.dot(k);
                let dk = ds.t().dot(q);
                grad.wq += &dq.t().dot(&h2);
                grad.wk += &dk.t().dot(&h2);
                grad.wv += &dv.t().dot(&h2);
                dh2 += &dq.dot(&self.wq);
                dh2 += &dk.dot(&self.wk);
                dh2 += &dv.dot(&self.wv);
            }
            AttnState::Cross { query_in, q, k, v, weights } => {
                let dc = d_context.sum_axis(Axis(0));
                let dp = v.dot(&dc);
                let dot = weights.dot(&dp);
                let ds = Array1::from_shape_fn(weights.len(), |t| weights[t] * (dp[t] - dot) * scale);
                let dv = outer(weights.view(), dc.view());
                let dq = k.t().dot(&ds);
                let dk = outer(ds.view(), q.view());
                grad.wq += &outer(dq.view(), query_in.view());
                grad.wk += &dk.t().dot(&h2);
                grad.wv += &dv.t().dot(&h2);
                dh2 += &dk.dot(&self.wk);
                dh2 += &dv.dot(&self.wv);
                let dquery = self.wq.t().dot(&dq);
                let hidden = h2.ncols() / 2;
                let last = h2.nrows() - 1;
                let mut tail = dh2.slice_mut(s![last, ..hidden]);
                tail += &dquery.slice(s![..hidden]);
                let mut head = dh2.slice_mut(s![0, hidden..]);
                head += &dquery.slice(s![hidden..]);
            }
        }
        dh2
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Per-sequence workspace kept for the backward pass.
#[derive(Debug, Clone)]
struct ItemCache {
    x1: Array2<f64>,
    l1: BiState,
    x2: Array2<f64>,
    l2: BiState,
    h2: Array2<f64>,
    attn: Option<AttnState>,
    encoded: Array2<f64>,
    log_probs: Array2<f64>,
}

/// Forward workspace for a batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch_id: usize,
    max_len: usize,
    items: Vec<ItemCache>,
}

impl ForwardCache {
    /// Attention weights per item: one row per query (a single row for
    /// cross attention).
    pub fn attention_weights(&self) -> Vec<Option<Array2<f64>>> {
        self.items
            .iter()
            .map(|it| match &it.attn {
                Some(AttnState::SelfAttn { weights, .. }) => Some(weights.clone()),
                Some(AttnState::Cross { weights, .. }) => Some(weights.clone().insert_axis(Axis(0))),
                None => None,
            })
            .collect()
    }

    /// Log-softmax emission rows per item, padded to the batch length with
    /// zero rows.
    pub fn emissions(&self) -> Vec<Array2<f64>> {
        self.items.iter().map(|it| pad_rows(&it.log_probs, self.max_len)).collect()
    }

    /// Unpadded emission rows of one item.
    pub fn item_emissions(&self, item: usize) -> ArrayView2<'_, f64> {
        self.items[item].log_probs.view()
    }
}

fn pad_rows(m: &Array2<f64>, rows: usize) -> Array2<f64> {
    let mut p = Array2::zeros((rows, m.ncols()));
    p.slice_mut(s![..m.nrows(), ..]).assign(m);
    p
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let lse = crf::log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Affine projection followed by a row-wise log-softmax.
pub fn emissions(params: &ModelParams, encoded: ArrayView2<f64>) -> Array2<f64> {
    log_softmax_rows(&(encoded.dot(&params.emit_w.t()) + &params.emit_b))
}

fn check_finite(m: &Array2<f64>, batch: usize) -> Result<(), NetworkError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetworkError::Numeric { batch })
    }
}

/// Runs the encoder and emission layer over every item of a batch. Returns
/// the encoder outputs (layer-2 states, with attention context appended when
/// enabled), padded with zero rows, and the backward workspace.
pub fn forward(
    params: &ModelParams,
    batch: &SequenceBatch,
    config: &ModelConfig,
) -> Result<(Vec<Array2<f64>>, ForwardCache), NetworkError> {
    let max_len = batch.max_len();
    let mut items = Vec::with_capacity(batch.len());
    let mut outputs = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let len = batch.lengths[b];
        if len == 0 {
            return Err(NetworkError::Shape(format!("empty item {b} in batch {}", batch.id)));
        }
        let x1 = batch.layer1[b].slice(s![..len, ..]).to_owned();
        if x1.ncols() != config.layer1_width() {
            return Err(NetworkError::Width {
                expected: config.layer1_width(),
                actual: x1.ncols(),
            });
        }
        let (h1, l1) = params.layer1.forward(x1.view());
        let x2 = match config.dict_mode {
            DictMode::Dict2 => concatenate(Axis(1), &[h1.view(), batch.dicts[b].slice(s![..len, ..])])
                .expect("same row count"),
            _ => h1,
        };
        let (h2, l2) = params.layer2.forward(x2.view());
        let (encoded, attn) = match (&params.attention, config.attention) {
            (Some(a), kind) if kind != Attention::None => {
                let (ctx, state) = a.forward(kind, h2.view());
                let enc = concatenate(Axis(1), &[h2.view(), ctx.view()]).expect("same row count");
                (enc, Some(state))
            }
            _ => (h2.clone(), None),
        };
        check_finite(&encoded, batch.id)?;
        let log_probs = emissions(params, encoded.view());
        check_finite(&log_probs, batch.id)?;
        outputs.push(pad_rows(&encoded, max_len));
        items.push(ItemCache {
            x1,
            l1,
            x2,
            l2,
            h2,
            attn,
            encoded,
            log_probs,
        });
    }
    Ok((
        outputs,
        ForwardCache {
            batch_id: batch.id,
            max_len,
            items,
        },
    ))
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: ModelParams,
    /// `d loss / d layer-1 input`, per item, padded.
    pub inputs: Vec<Array2<f64>>,
    /// `d loss / d dictionary bits`, per item, padded. The bits are not
    /// trainable; these are reported for inspection and checking.
    pub dicts: Vec<Array2<f64>>,
}

/// Backpropagates `upstream` (gradients w.r.t. the log-softmax emissions,
/// one padded matrix per item). Rows at padded positions are ignored.
/// CRF transition gradients are not produced here.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    upstream: &[Array2<f64>],
    config: &ModelConfig,
) -> Result<Gradients, NetworkError> {
    if upstream.len() != cache.items.len() {
        return Err(NetworkError::Shape(format!(
            "{} upstream gradients for {} items",
            upstream.len(),
            cache.items.len()
        )));
    }
    let mut grad = params.zeros_like();
    let mut d_inputs = Vec::new();
    let mut d_dicts = Vec::new();
    let two_h = 2 * config.hidden_size;

    for (it, up) in cache.items.iter().zip(upstream) {
        let len = it.log_probs.nrows();
        if up.nrows() < len || up.ncols() != config.label_count {
            return Err(NetworkError::Shape(format!(
                "upstream gradient {:?} does not cover {len} x {}",
                up.dim(),
                config.label_count
            )));
        }
        let d_lp = up.slice(s![..len, ..]);

        // log-softmax: d logits = d lp - softmax * sum(d lp)
        let mut d_logits = d_lp.to_owned();
        for (t, mut row) in d_logits.outer_iter_mut().enumerate() {
            let total = d_lp.row(t).sum();
            for (j, v) in row.iter_mut().enumerate() {
                *v -= it.log_probs[[t, j]].exp() * total;
            }
        }
        grad.emit_w += &d_logits.t().dot(&it.encoded);
        grad.emit_b += &d_logits.sum_axis(Axis(0));
        let d_encoded = d_logits.dot(&params.emit_w);

        let mut d_h2 = d_encoded.slice(s![.., ..two_h]).to_owned();
        if let (Some(a), Some(state)) = (&params.attention, &it.attn) {
            let g = grad.attention.as_mut().expect("attention gradients");
            d_h2 += &a.backward(it.h2.view(), state, d_encoded.slice(s![.., two_h..]), g);
        }

        let d_x2 = params.layer2.backward(it.x2.view(), &it.l2, d_h2.view(), &mut grad.layer2);
        let d_h1 = d_x2.slice(s![.., ..two_h]);
        let d_x1 = params.layer1.backward(it.x1.view(), &it.l1, d_h1, &mut grad.layer1);

        let d_dict = match config.dict_mode {
            DictMode::Dict2 => d_x2.slice(s![.., two_h..]).to_owned(),
            DictMode::Dict1 => d_x1.slice(s![.., config.layer1_width() - DICT_DIM..]).to_owned(),
            DictMode::None => Array2::zeros((len, DICT_DIM)),
        };
        d_inputs.push(pad_rows(&d_x1, cache.max_len));
        d_dicts.push(pad_rows(&d_dict, cache.max_len));
    }
    if !grad.is_finite() {
        return Err(NetworkError::Numeric { batch: cache.batch_id });
    }
    Ok(Gradients {
        params: grad,
        inputs: d_inputs,
        dicts: d_dicts,
    })
}

/// Batch loss: the sum of per-item CRF negative log-likelihoods.
#[derive(Debug, Clone)]
pub struct LossAndGrad {
    pub loss: f64,
    pub per_item: Vec<f64>,
    pub grads: Gradients,
}

/// Forward, CRF likelihood and backward for a labeled batch. Loss and
/// gradients are summed over items; callers divide for a mean.
pub fn loss_and_grad(params: &ModelParams, batch: &SequenceBatch, config: &ModelConfig) -> Result<LossAndGrad, NetworkError> {
    let (_, cache) = forward(params, batch, config)?;
    let mut upstream = Vec::with_capacity(batch.len());
    let mut per_item = Vec::with_capacity(batch.len());
    let mut d_trans = Array2::zeros(params.crf.transitions.raw_dim());
    for b in 0..batch.len() {
        let gold = batch.labels[b]
            .as_ref()
            .ok_or_else(|| NetworkError::Shape(format!("item {b} of batch {} is unlabeled", batch.id)))?;
        let nll = crf::nll_and_grad(cache.item_emissions(b), &params.crf.transitions, gold).map_err(|e| match e {
            CrfError::Numeric => NetworkError::Numeric { batch: batch.id },
            other => other.into(),
        })?;
        per_item.push(nll.loss);
        d_trans += &nll.d_transitions;
        upstream.push(nll.d_emissions);
    }
    let mut grads = backward(params, &cache, &upstream, config)?;
    grads.params.crf.transitions = d_trans;
    let loss = per_item.iter().sum();
    Ok(LossAndGrad { loss, per_item, grads })
}

/// Viterbi decoding of every item; returns position-level label indices.
pub fn decode(params: &ModelParams, batch: &SequenceBatch, config: &ModelConfig) -> Result<Vec<Vec<usize>>, NetworkError> {
    let (_, cache) = forward(params, batch, config)?;
    (0..batch.len())
        .map(|b| Ok(crf::viterbi(cache.item_emissions(b), &params.crf.transitions)?.labels))
        .collect()
}

/// A trained model: configuration, label inventory and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub labels: LabelSet,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, labels: LabelSet, params: ModelParams) -> Result<Self, NetworkError> {
        config.validate()?;
        if labels.len() != config.label_count {
            return Err(NetworkError::Config(format!(
                "label set has {} tags but label_count is {}",
                labels.len(),
                config.label_count
            )));
        }
        Ok(Model { config, labels, params })
    }

    /// Token-level label indices for one sequence. Piece-level decisions of
    /// the BERT variant are mapped back through the first piece of each
    /// token.
    pub fn predict_indices(&self, seq: &LabeledSequence, resources: &Resources) -> Result<Vec<usize>, NetworkError> {
        let mut input = build_inputs(&seq.unlabeled(), resources, &self.labels, &self.config)?;
        input.labels = None;
        let batch = SequenceBatch::from_inputs(0, [&input]);
        let path = decode(&self.params, &batch, &self.config)?.remove(0);
        Ok(match &input.alignment {
            Some(a) => collapse_to_tokens(a, &path)?,
            None => path,
        })
    }

    /// Labels every sequence (in parallel); ids, tokens and order are kept.
    pub fn predict(&self, seqs: &[LabeledSequence], resources: &Resources) -> Result<Vec<LabeledSequence>, NetworkError> {
        seqs.par_iter()
            .map(|seq| {
                let idx = self.predict_indices(seq, resources)?;
                let mut out = seq.clone();
                out.labels = Some(idx.into_iter().map(|i| self.labels.tag(i)).collect());
                Ok(out)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(variant: Variant, dict_mode: DictMode, attention: Attention) -> ModelConfig {
        ModelConfig {
            variant,
            dict_mode,
            attention,
            hidden_size: 3,
            static_dim: 4,
            contextual_dim: if variant == Variant::BertLstmCrf { 2 } else { 0 },
            dict_dim: 7,
            label_count: 3,
            seed: 17,
        }
    }

    fn random_batch(config: &ModelConfig, lengths: &[usize], seed: u64) -> SequenceBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ModelInput> = lengths
            .iter()
            .map(|&len| ModelInput {
                layer1: Array2::from_shape_fn((len, config.layer1_width()), |_| rng.gen_range(-1.0..1.0)),
                dicts: Array2::from_shape_fn((len, 7), |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }),
                alignment: None,
                labels: Some((0..len).map(|_| rng.gen_range(0..config.label_count)).collect()),
            })
            .collect();
        SequenceBatch::from_inputs(0, &inputs)
    }

    #[test]
    fn widths_follow_config() {
        let mut c = ModelConfig::new(Variant::LstmCrf, DictMode::None, Attention::None, 13);
        assert_eq!(c.layer1_width(), 300);
        c.dict_mode = DictMode::Dict1;
        assert_eq!(c.layer1_width(), 307);
        let c = ModelConfig::new(Variant::BertLstmCrf, DictMode::Dict2, Attention::None, 13);
        assert_eq!(c.layer1_width(), 1068);
        assert_eq!(c.layer2_width(), 207);
    }

    #[test]
    fn config_rules() {
        assert!(tiny(Variant::BertLstmCrf, DictMode::None, Attention::Cross).validate().is_err());
        let mut c = tiny(Variant::LstmCrf, DictMode::None, Attention::None);
        c.dict_dim = 6;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::legal_combinations(&tiny(Variant::LstmCrf, DictMode::None, Attention::None)).len(), 12);
    }

    #[test]
    fn param_shapes_for_every_config() {
        for cfg in ModelConfig::legal_combinations(&tiny(Variant::LstmCrf, DictMode::None, Attention::None)) {
            let p = ModelParams::init(&cfg).unwrap();
            let h = cfg.hidden_size;
            assert_eq!(p.layer1.fwd.w_ih.dim(), (4 * h, cfg.layer1_width()));
            assert_eq!(p.layer2.bwd.w_ih.dim(), (4 * h, cfg.layer2_width()));
            assert_eq!(p.layer2.bwd.w_hh.dim(), (4 * h, h));
            assert_eq!(p.emit_w.dim(), (cfg.label_count, cfg.encoder_width()));
            assert_eq!(p.attention.is_some(), cfg.attention != Attention::None);
            assert_eq!(p.crf.transitions.dim(), (5, 5));
            assert_eq!(p, ModelParams::init(&cfg).unwrap());
        }
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let p = ModelParams::init(&tiny(Variant::LstmCrf, DictMode::None, Attention::None)).unwrap();
        assert_eq!(p.layer1.fwd.bias.to_vec(), [0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn zero_params_give_zero_hidden() {
        let cfg = tiny(Variant::LstmCrf, DictMode::Dict2, Attention::Cross);
        let p = ModelParams::zeros(&cfg);
        let batch = random_batch(&cfg, &[4, 2], 1);
        let (hidden, cache) = forward(&p, &batch, &cfg).unwrap();
        assert!(hidden.iter().all(|h| h.iter().all(|&v| v == 0.0)));
        let uniform = (1.0f64 / 3.0).ln();
        for e in cache.emissions() {
            for (t, row) in e.outer_iter().enumerate() {
                if t < 2 {
                    assert!(row.iter().all(|&v| (v - uniform).abs() < 1e-15));
                }
            }
        }
    }

    #[test]
    fn single_step_cell_matches_scalar_evaluation() {
        // 1-d input, 1-d hidden, one step from zero state:
        // c = i * g, h = o * tanh(c)
        let dir = LstmDirection {
            w_ih: array![[0.5], [-0.3], [0.8], [0.2]],
            w_hh: array![[0.1], [0.1], [0.1], [0.1]],
            bias: array![0.1, 1.0, -0.2, 0.05],
        };
        let x = 1.5;
        let i = 1.0 / (1.0 + (-(0.5 * x + 0.1f64)).exp());
        let g = (0.8 * x - 0.2f64).tanh();
        let o = 1.0 / (1.0 + (-(0.2 * x + 0.05f64)).exp());
        let c = i * g;
        let h = o * c.tanh();
        let state = dir.forward(array![[x]].view(), false);
        assert!((state.cell[[0, 0]] - c).abs() < 1e-15);
        assert!((state.hidden[[0, 0]] - h).abs() < 1e-15);
        // hand values: i=0.70057, g=0.76159, o=0.58662, c=0.53355
        assert!((h - 0.28632).abs() < 1e-4, "{h}");
    }

    #[test]
    fn length_one_sequences() {
        let cfg = tiny(Variant::LstmCrf, DictMode::None, Attention::SelfAttention);
        let p = ModelParams::init(&cfg).unwrap();
        let (hidden, _) = forward(&p, &random_batch(&cfg, &[1], 2), &cfg).unwrap();
        assert_eq!(hidden[0].dim(), (1, 4 * cfg.hidden_size));
    }

    #[test]
    fn log_softmax_rows_normalized_and_shift_invariant() {
        let cfg = tiny(Variant::LstmCrf, DictMode::Dict1, Attention::None);
        let mut p = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        p.emit_b.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        let enc = Array2::from_shape_fn((5, cfg.encoder_width()), |_| rng.gen_range(-1.0..1.0));
        let e = emissions(&p, enc.view());
        for row in e.outer_iter() {
            assert!(crf::log_sum_exp(row.iter().copied()).abs() < 1e-9);
        }
        p.emit_b += 3.5;
        let shifted = emissions(&p, enc.view());
        assert!((&shifted - &e).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn attention_weights_sum_to_one_over_real_positions() {
        for att in [Attention::SelfAttention, Attention::Cross] {
            let cfg = tiny(Variant::LstmCrf, DictMode::None, att);
            let p = ModelParams::init(&cfg).unwrap();
            let batch = random_batch(&cfg, &[5, 2, 3], 9);
            let (_, cache) = forward(&p, &batch, &cfg).unwrap();
            for (b, w) in cache.attention_weights().into_iter().enumerate() {
                let w = w.unwrap();
                assert_eq!(w.ncols(), batch.lengths[b]);
                for row in w.outer_iter() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny(Variant::LstmCrf, DictMode::Dict2, Attention::Cross);
        let p = ModelParams::init(&cfg).unwrap();
        let batch = random_batch(&cfg, &[4, 3], 5);
        let (_, cache) = forward(&p, &batch, &cfg).unwrap();
        let up = vec![Array2::zeros((4, 3)); 2];
        let g = backward(&p, &cache, &up, &cfg).unwrap();
        assert!(g.params.tensors().iter().all(|(_, _, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn padded_positions_get_no_gradient() {
        let cfg = tiny(Variant::LstmCrf, DictMode::Dict1, Attention::SelfAttention);
        let p = ModelParams::init(&cfg).unwrap();
        let batch = random_batch(&cfg, &[4, 2], 6);
        let (_, cache) = forward(&p, &batch, &cfg).unwrap();
        let up = vec![Array2::ones((4, 3)), Array2::ones((4, 3))];
        let g = backward(&p, &cache, &up, &cfg).unwrap();
        assert!(g.inputs[1].slice(s![2.., ..]).iter().all(|&v| v == 0.0));
        assert!(g.dicts[1].slice(s![2.., ..]).iter().all(|&v| v == 0.0));
        assert!(g.inputs[1].slice(s![..2, ..]).iter().any(|&v| v != 0.0));

        // padding content must not leak into real positions
        let mut noisy = batch.clone();
        noisy.layer1[1].slice_mut(s![2.., ..]).fill(9.0);
        let (h_a, _) = forward(&p, &batch, &cfg).unwrap();
        let (h_b, _) = forward(&p, &noisy, &cfg).unwrap();
        assert_eq!(h_a, h_b);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = tiny(Variant::LstmCrf, DictMode::Dict2, Attention::Cross);
        let p = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs: Vec<ModelInput> = [3usize, 5, 1]
            .iter()
            .map(|&len| ModelInput {
                layer1: Array2::from_shape_fn((len, cfg.layer1_width()), |_| rng.gen_range(-1.0..1.0)),
                dicts: Array2::zeros((len, 7)),
                alignment: None,
                labels: Some(vec![0; len]),
            })
            .collect();
        let a = SequenceBatch::from_inputs(0, [&inputs[0], &inputs[1], &inputs[2]]);
        let b = SequenceBatch::from_inputs(0, [&inputs[2], &inputs[0], &inputs[1]]);
        let la = loss_and_grad(&p, &a, &cfg).unwrap();
        let lb = loss_and_grad(&p, &b, &cfg).unwrap();
        assert_eq!(la.per_item[0], lb.per_item[1]);
        assert_eq!(la.per_item[1], lb.per_item[2]);
        assert_eq!(la.per_item[2], lb.per_item[0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(Variant::BertLstmCrf, DictMode::Dict2, Attention::None);
        let batch = random_batch(&cfg, &[4, 4], 3);
        let run = || {
            let p = ModelParams::init(&cfg).unwrap();
            forward(&p, &batch, &cfg).unwrap().0
        };
        assert_eq!(run(), run());
    }

    fn loss_at(p: &ModelParams, batch: &SequenceBatch, cfg: &ModelConfig) -> f64 {
        loss_and_grad(p, batch, cfg).unwrap().loss
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let h = 1e-5;
        for cfg in ModelConfig::legal_combinations(&tiny(Variant::LstmCrf, DictMode::None, Attention::None)) {
            let mut p = ModelParams::init(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            for i in 0..p.crf.transitions.nrows() {
                for j in 0..p.crf.transitions.ncols() {
                    if !crf::is_fixed(3, i, j) {
                        p.crf.transitions[[i, j]] = rng.gen_range(-0.5..0.5);
                    }
                }
            }
            let batch = random_batch(&cfg, &[4, 2], 8);
            let analytic = loss_and_grad(&p, &batch, &cfg).unwrap().grads.params;
            let names: Vec<String> = p.tensors().into_iter().map(|(n, _, _)| n).collect();
            for (ti, name) in names.iter().enumerate() {
                let len = p.tensors()[ti].2.len();
                for k in 0..len {
                    let orig = p.tensors()[ti].2[k];
                    if !orig.is_finite() {
                        continue;
                    }
                    p.tensors_mut()[ti].2[k] = orig + h;
                    let up = loss_at(&p, &batch, &cfg);
                    p.tensors_mut()[ti].2[k] = orig - h;
                    let down = loss_at(&p, &batch, &cfg);
                    p.tensors_mut()[ti].2[k] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic.tensors()[ti].2[k];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                    assert!(
                        rel <= 1e-4,
                        "{:?}/{:?}/{:?} {name}[{k}]: analytic {a} numeric {numeric}",
                        cfg.variant,
                        cfg.dict_mode,
                        cfg.attention
                    );
                }
            }
        }
    }

    #[test]
    fn nan_input_is_reported_with_batch_id() {
        let cfg = tiny(Variant::LstmCrf, DictMode::None, Attention::None);
        let p = ModelParams::init(&cfg).unwrap();
        let mut batch = random_batch(&cfg, &[3], 1);
        batch.id = 42;
        batch.layer1[0][[1, 1]] = f64::NAN;
        assert!(matches!(forward(&p, &batch, &cfg), Err(NetworkError::Numeric { batch: 42 })));
    }
}
