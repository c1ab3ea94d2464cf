//! Linear-chain CRF over per-position emission scores.
//!
//! Transitions form a `(L + 2) x (L + 2)` matrix indexed `[from, to]`, where
//! `L` labels are followed by a virtual START (`L`) and STOP (`L + 1`) state.
//! Moves into START and out of STOP are fixed at negative infinity.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    pub transitions: Array2<f64>,
}

impl CrfParams {
    pub fn zeros(labels: usize) -> Self {
        let mut transitions = Array2::zeros((labels + 2, labels + 2));
        mask_fixed(&mut transitions);
        CrfParams { transitions }
    }

    pub fn random<R: Rng>(labels: usize, scale: f64, rng: &mut R) -> Self {
        let n = labels + 2;
        let mut transitions = Array2::from_shape_fn((n, n), |_| rng.gen_range(-scale..=scale));
        mask_fixed(&mut transitions);
        CrfParams { transitions }
    }

    pub fn labels(&self) -> usize {
        self.transitions.nrows() - 2
    }
}

pub fn start(labels: usize) -> usize {
    labels
}

pub fn stop(labels: usize) -> usize {
    labels + 1
}

/// Whether `[from, to]` is one of the fixed, untrainable entries.
pub fn is_fixed(labels: usize, from: usize, to: usize) -> bool {
    to == start(labels) || from == stop(labels)
}

pub fn mask_fixed(transitions: &mut Array2<f64>) {
    let labels = transitions.nrows() - 2;
    transitions.column_mut(start(labels)).fill(f64::NEG_INFINITY);
    transitions.row_mut(stop(labels)).fill(f64::NEG_INFINITY);
}

/// A decoded label sequence and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct TagPath {
    pub labels: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CrfError {
    #[error("non-finite value in CRF computation")]
    Numeric,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

fn check_shapes(emissions: ArrayView2<f64>, transitions: &Array2<f64>) -> Result<usize, CrfError> {
    let labels = emissions.ncols();
    if transitions.dim() != (labels + 2, labels + 2) {
        return Err(CrfError::Shape(format!(
            "{labels} labels need a {n}x{n} transition matrix, got {:?}",
            transitions.dim(),
            n = labels + 2
        )));
    }
    if emissions.nrows() == 0 {
        return Err(CrfError::Shape("empty sequence".into()));
    }
    Ok(labels)
}

/// Sum of emissions along `path` plus START, inner and STOP transitions.
pub fn path_score(emissions: ArrayView2<f64>, transitions: &Array2<f64>, path: &[usize]) -> f64 {
    let labels = emissions.ncols();
    debug_assert_eq!(path.len(), emissions.nrows());
    let mut score = transitions[[start(labels), path[0]]] + transitions[[path[path.len() - 1], stop(labels)]];
    for (t, &y) in path.iter().enumerate() {
        score += emissions[[t, y]];
        if t > 0 {
            score += transitions[[path[t - 1], y]];
        }
    }
    score
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Forward log-scores: `alpha[t][j]` is the log-sum over prefixes ending in
/// label `j` at position `t`, including the START transition.
fn forward_table(emissions: ArrayView2<f64>, transitions: &Array2<f64>) -> Array2<f64> {
    let (len, labels) = emissions.dim();
    let mut alpha = Array2::zeros((len, labels));
    for j in 0..labels {
        alpha[[0, j]] = transitions[[start(labels), j]] + emissions[[0, j]];
    }
    for t in 1..len {
        for j in 0..labels {
            let prev = alpha.row(t - 1);
            alpha[[t, j]] = log_sum_exp((0..labels).map(|i| prev[i] + transitions[[i, j]])) + emissions[[t, j]];
        }
    }
    alpha
}

/// Backward log-scores: `beta[t][i]` is the log-sum over suffixes after
/// position `t` given label `i` there, including the STOP transition.
fn backward_table(emissions: ArrayView2<f64>, transitions: &Array2<f64>) -> Array2<f64> {
    let (len, labels) = emissions.dim();
    let mut beta = Array2::zeros((len, labels));
    for i in 0..labels {
        beta[[len - 1, i]] = transitions[[i, stop(labels)]];
    }
    for t in (0..len - 1).rev() {
        for i in 0..labels {
            beta[[t, i]] = log_sum_exp(
                (0..labels).map(|j| transitions[[i, j]] + emissions[[t + 1, j]] + beta[[t + 1, j]]),
            );
        }
    }
    beta
}

/// Log of the sum of `exp(path_score)` over every label path.
pub fn log_partition(emissions: ArrayView2<f64>, transitions: &Array2<f64>) -> Result<f64, CrfError> {
    let labels = check_shapes(emissions, transitions)?;
    let alpha = forward_table(emissions, transitions);
    let last = alpha.row(alpha.nrows() - 1);
    let z = log_sum_exp((0..labels).map(|j| last[j] + transitions[[j, stop(labels)]]));
    if z.is_nan() || z == f64::INFINITY {
        return Err(CrfError::Numeric);
    }
    Ok(z)
}

/// Negative log-likelihood of `gold` and its gradients.
#[derive(Debug, Clone)]
pub struct NllGrad {
    pub loss: f64,
    pub d_emissions: Array2<f64>,
    pub d_transitions: Array2<f64>,
}

/// `log Z - score(gold)`; gradients are posterior expected counts minus gold
/// counts. Fixed transition entries get zero gradient.
pub fn nll_and_grad(
    emissions: ArrayView2<f64>,
    transitions: &Array2<f64>,
    gold: &[usize],
) -> Result<NllGrad, CrfError> {
    let labels = check_shapes(emissions, transitions)?;
    let len = emissions.nrows();
    if gold.len() != len || gold.iter().any(|&y| y >= labels) {
        return Err(CrfError::Shape("gold path does not fit emissions".into()));
    }
    let alpha = forward_table(emissions, transitions);
    let beta = backward_table(emissions, transitions);
    let log_z = log_sum_exp((0..labels).map(|j| alpha[[len - 1, j]] + transitions[[j, stop(labels)]]));
    if !log_z.is_finite() {
        return Err(CrfError::Numeric);
    }

    // unary marginals
    let mut d_emissions = &alpha + &beta;
    d_emissions.mapv_inplace(|v| (v - log_z).exp());

    let mut d_transitions = Array2::zeros(transitions.dim());
    for j in 0..labels {
        d_transitions[[start(labels), j]] = d_emissions[[0, j]];
        d_transitions[[j, stop(labels)]] = d_emissions[[len - 1, j]];
    }
    for t in 1..len {
        for i in 0..labels {
            for j in 0..labels {
                let lp = alpha[[t - 1, i]] + transitions[[i, j]] + emissions[[t, j]] + beta[[t, j]] - log_z;
                d_transitions[[i, j]] += lp.exp();
            }
        }
    }

    for (t, &y) in gold.iter().enumerate() {
        d_emissions[[t, y]] -= 1.0;
        if t > 0 {
            d_transitions[[gold[t - 1], y]] -= 1.0;
        }
    }
    d_transitions[[start(labels), gold[0]]] -= 1.0;
    d_transitions[[gold[len - 1], stop(labels)]] -= 1.0;

    let loss = log_z - path_score(emissions, transitions, gold);
    if !loss.is_finite() || d_emissions.iter().any(|v| !v.is_finite()) {
        return Err(CrfError::Numeric);
    }
    Ok(NllGrad {
        loss: loss.max(0.0),
        d_emissions,
        d_transitions,
    })
}

/// Per-position posterior label marginals.
pub fn marginals(emissions: ArrayView2<f64>, transitions: &Array2<f64>) -> Result<Array2<f64>, CrfError> {
    let log_z = log_partition(emissions, transitions)?;
    let mut m = &forward_table(emissions, transitions) + &backward_table(emissions, transitions);
    m.mapv_inplace(|v| (v - log_z).exp());
    Ok(m)
}

/// Highest-scoring path. Ties go to the smallest label index.
pub fn viterbi(emissions: ArrayView2<f64>, transitions: &Array2<f64>) -> Result<TagPath, CrfError> {
    let labels = check_shapes(emissions, transitions)?;
    let len = emissions.nrows();
    let mut score: Array1<f64> =
        Array1::from_shape_fn(labels, |j| transitions[[start(labels), j]] + emissions[[0, j]]);
    let mut back = Array2::<usize>::zeros((len, labels));

    for t in 1..len {
        let mut next = Array1::zeros(labels);
        for j in 0..labels {
            let (best_i, best) = argmax((0..labels).map(|i| score[i] + transitions[[i, j]]));
            back[[t, j]] = best_i;
            next[j] = best + emissions[[t, j]];
        }
        score = next;
    }
    let (mut y, best) = argmax((0..labels).map(|j| score[j] + transitions[[j, stop(labels)]]));
    if best.is_nan() {
        return Err(CrfError::Numeric);
    }
    let mut path = vec![0; len];
    for t in (0..len).rev() {
        path[t] = y;
        y = back[[t, y]];
    }
    Ok(TagPath { labels: path, score: best })
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 || (i == 0 && v.is_nan()) {
            best = (i, v);
        }
    }
    best
}
