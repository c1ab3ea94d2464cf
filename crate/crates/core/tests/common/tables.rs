//! Published results, transcribed for arithmetic checks.

/// (model, per-label rows `[P, R, F1]` in SYM..NEGATION, O order, macro row).
pub type LabelTable = [(&'static str, [[f64; 3]; 7], [f64; 3]); 3];

pub const FORUM_LSTM: LabelTable = [
    (
        "LSTM+CRF",
        [
            [0.84, 0.77, 0.80],
            [0.67, 0.51, 0.58],
            [0.82, 0.89, 0.85],
            [0.82, 0.90, 0.86],
            [0.79, 0.79, 0.79],
            [0.81, 0.88, 0.84],
            [0.96, 0.97, 0.97],
        ],
        [0.82, 0.82, 0.81],
    ),
    (
        "+DICT(1)",
        [
            [0.92, 0.94, 0.93],
            [0.74, 0.77, 0.75],
            [0.91, 0.88, 0.89],
            [0.87, 0.94, 0.91],
            [0.81, 0.91, 0.86],
            [0.83, 0.83, 0.83],
            [0.98, 0.98, 0.98],
        ],
        [0.87, 0.89, 0.88],
    ),
    (
        "+DICT(2)",
        [
            [0.93, 0.95, 0.94],
            [0.75, 0.80, 0.77],
            [0.90, 0.90, 0.90],
            [0.88, 0.94, 0.91],
            [0.85, 0.89, 0.87],
            [0.81, 0.87, 0.84],
            [0.99, 0.98, 0.98],
        ],
        [0.87, 0.90, 0.89],
    ),
];

pub const FORUM_BERT: LabelTable = [
    (
        "BERT+LSTM+CRF",
        [
            [0.79, 0.86, 0.82],
            [0.70, 0.38, 0.49],
            [0.91, 0.77, 0.83],
            [0.82, 0.80, 0.81],
            [0.78, 0.82, 0.80],
            [0.83, 0.90, 0.86],
            [0.96, 0.96, 0.96],
        ],
        [0.83, 0.78, 0.80],
    ),
    (
        "+DICT(1)",
        [
            [0.92, 0.92, 0.92],
            [0.75, 0.66, 0.69],
            [0.87, 0.92, 0.89],
            [0.84, 0.95, 0.89],
            [0.83, 0.87, 0.84],
            [0.84, 0.89, 0.86],
            [0.98, 0.97, 0.98],
        ],
        [0.86, 0.88, 0.87],
    ),
    (
        "+DICT(2)",
        [
            [0.93, 0.97, 0.95],
            [0.75, 0.85, 0.80],
            [0.93, 0.90, 0.91],
            [0.87, 0.94, 0.90],
            [0.84, 0.91, 0.87],
            [0.83, 0.93, 0.88],
            [0.99, 0.97, 0.98],
        ],
        [0.88, 0.92, 0.90],
    ),
];

/// Sweep tables: six fraction rows (0..100 %), each a list of `[P, R, F1]`
/// cells (three test sets, or two model columns for the ground-truth ones).
pub type SweepTable = [&'static [[f64; 3]]; 6];

pub const SWEEP_LSTM_FORUM_BASE: SweepTable = [
    &[[1.00, 0.83, 0.90], [1.00, 1.00, 1.00], [0.63, 0.72, 0.67]],
    &[[1.00, 0.93, 0.96], [0.94, 1.00, 0.97], [0.67, 0.88, 0.76]],
    &[[1.00, 0.96, 0.98], [0.92, 1.00, 0.96], [0.68, 0.94, 0.79]],
    &[[1.00, 0.98, 0.99], [0.91, 1.00, 0.95], [0.69, 0.96, 0.80]],
    &[[1.00, 1.00, 1.00], [0.89, 1.00, 0.94], [0.70, 1.00, 0.82]],
    &[[1.00, 1.00, 1.00], [0.89, 1.00, 0.94], [0.70, 1.00, 0.82]],
];

pub const SWEEP_LSTM_TWEET_BASE: SweepTable = [
    &[[1.00, 0.59, 0.74], [0.81, 0.51, 0.63], [1.00, 1.00, 1.00]],
    &[[1.00, 0.88, 0.94], [0.88, 0.86, 0.87], [0.77, 1.00, 0.87]],
    &[[1.00, 0.92, 0.96], [0.88, 0.90, 0.89], [0.74, 1.00, 0.85]],
    &[[1.00, 0.92, 0.96], [0.88, 0.89, 0.89], [0.73, 0.97, 0.84]],
    &[[1.00, 0.98, 0.99], [0.89, 0.98, 0.93], [0.71, 1.00, 0.83]],
    &[[1.00, 1.00, 1.00], [0.89, 1.00, 0.94], [0.70, 1.00, 0.82]],
];

pub const SWEEP_BERT_FORUM_BASE: SweepTable = [
    &[[1.00, 0.82, 0.90], [1.00, 1.00, 1.00], [0.63, 0.72, 0.67]],
    &[[1.00, 0.92, 0.96], [0.94, 1.00, 0.97], [0.67, 0.87, 0.76]],
    &[[1.00, 0.96, 0.98], [0.91, 1.00, 0.96], [0.69, 0.94, 0.79]],
    &[[1.00, 0.98, 0.99], [0.91, 1.00, 0.95], [0.69, 0.96, 0.81]],
    &[[1.00, 1.00, 1.00], [0.89, 1.00, 0.94], [0.70, 1.00, 0.82]],
    &[[1.00, 1.00, 1.00], [0.89, 1.00, 0.94], [0.70, 1.00, 0.82]],
];

pub const SWEEP_BERT_TWEET_BASE: SweepTable = [
    &[[1.00, 0.60, 0.75], [0.81, 0.52, 0.63], [1.00, 1.00, 1.00]],
    &[[1.00, 0.88, 0.94], [0.87, 0.86, 0.86], [0.77, 1.00, 0.87]],
    &[[1.00, 0.92, 0.96], [0.88, 0.90, 0.89], [0.75, 1.00, 0.85]],
    &[[1.00, 0.93, 0.96], [0.88, 0.92, 0.90], [0.74, 1.00, 0.85]],
    &[[1.00, 0.98, 0.99], [0.89, 0.98, 0.93], [0.71, 1.00, 0.83]],
    &[[1.00, 1.00, 1.00], [0.89, 1.00, 0.94], [0.70, 1.00, 0.82]],
];

pub const GROUND_TRUTH_FORUM_BASE: SweepTable = [
    &[[0.80, 0.56, 0.66], [0.82, 0.57, 0.68]],
    &[[0.82, 0.65, 0.72], [0.83, 0.65, 0.73]],
    &[[0.83, 0.72, 0.77], [0.84, 0.70, 0.77]],
    &[[0.82, 0.74, 0.78], [0.84, 0.73, 0.78]],
    &[[0.83, 0.78, 0.80], [0.84, 0.76, 0.80]],
    &[[0.83, 0.78, 0.81], [0.84, 0.76, 0.80]],
];

pub const GROUND_TRUTH_TWEET_BASE: SweepTable = [
    &[[0.92, 0.60, 0.72], [0.92, 0.57, 0.70]],
    &[[0.87, 0.74, 0.80], [0.88, 0.72, 0.79]],
    &[[0.86, 0.75, 0.80], [0.87, 0.73, 0.80]],
    &[[0.85, 0.75, 0.80], [0.87, 0.74, 0.80]],
    &[[0.84, 0.78, 0.81], [0.85, 0.76, 0.80]],
    &[[0.83, 0.78, 0.81], [0.84, 0.76, 0.80]],
];

pub fn sweep_tables() -> [(&'static str, SweepTable); 6] {
    [
        ("lstm/forum-base", SWEEP_LSTM_FORUM_BASE),
        ("lstm/tweet-base", SWEEP_LSTM_TWEET_BASE),
        ("bert/forum-base", SWEEP_BERT_FORUM_BASE),
        ("bert/tweet-base", SWEEP_BERT_TWEET_BASE),
        ("ground-truth/forum-base", GROUND_TRUTH_FORUM_BASE),
        ("ground-truth/tweet-base", GROUND_TRUTH_TWEET_BASE),
    ]
}
