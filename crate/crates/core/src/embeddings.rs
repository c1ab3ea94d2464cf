//! Static word vectors, word-piece segmentation, token/piece alignment and
//! the binary store of precomputed contextual vectors.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Token;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad contextual store: {0}")]
    Format(String),
    #[error("no contextual vectors for sequence `{0}`")]
    UnknownSequence(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// Range of the uniform distribution used for out-of-vocabulary vectors.
pub const OOV_RANGE: f64 = 0.25;

/// Pretrained word vectors with seeded random vectors for unknown words.
///
/// An unknown surface always maps to the same vector: it is drawn from a
/// generator seeded by `oov_seed` and a hash of the surface.
#[derive(Debug, Clone)]
pub struct StaticEmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    oov_seed: u64,
}

impl StaticEmbeddingTable {
    pub fn new(dim: usize, vectors: HashMap<String, Vec<f64>>, oov_seed: u64) -> Self {
        assert!(vectors.values().all(|v| v.len() == dim), "vector width mismatch");
        StaticEmbeddingTable { dim, vectors, oov_seed }
    }

    /// A table with no stored vectors: every lookup is a seeded random vector.
    pub fn random(dim: usize, oov_seed: u64) -> Self {
        StaticEmbeddingTable::new(dim, HashMap::new(), oov_seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn oov_seed(&self) -> u64 {
        self.oov_seed
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.vectors.contains_key(surface)
    }

    pub fn lookup(&self, surface: &str) -> Vec<f64> {
        match self.vectors.get(surface) {
            Some(v) => v.clone(),
            None => self.oov_vector(surface),
        }
    }

    fn oov_vector(&self, surface: &str) -> Vec<f64> {
        let digest = Sha256::digest(surface.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(self.oov_seed ^ u64::from_le_bytes(word));
        (0..self.dim).map(|_| rng.gen_range(-OOV_RANGE..=OOV_RANGE)).collect()
    }
}

/// Reads the word2vec text format: a `count dim` header, then one
/// `token v1 .. vdim` line per vector.
pub fn load_word2vec_text(path: impl AsRef<Path>, oov_seed: u64) -> Result<StaticEmbeddingTable, EmbeddingError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_word2vec_text(BufReader::new(file), path, oov_seed)
}

pub(crate) fn read_word2vec_text<R: BufRead>(
    reader: R,
    path: &Path,
    oov_seed: u64,
) -> Result<StaticEmbeddingTable, EmbeddingError> {
    let err = |line: usize, message: String| EmbeddingError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, l)) => l.map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?,
        None => return Err(err(1, "missing header".into())),
    };
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| err(1, format!("bad header {header:?}")))?;
    let [count, dim] = nums[..] else {
        return Err(err(1, format!("header must be `count dim`, got {header:?}")));
    };

    let mut vectors = HashMap::with_capacity(count);
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if vectors.len() == count {
            return Err(err(lineno, format!("more than the {count} vectors declared")));
        }
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-blank line").to_string();
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(lineno, format!("bad value: {e}")))?;
        if values.len() != dim {
            return Err(err(lineno, format!("expected {dim} values, found {}", values.len())));
        }
        if vectors.insert(word.clone(), values).is_some() {
            return Err(err(lineno, format!("duplicate entry `{word}`")));
        }
    }
    if vectors.len() != count {
        return Err(err(0, format!("header declares {count} vectors, found {}", vectors.len())));
    }
    Ok(StaticEmbeddingTable::new(dim, vectors, oov_seed))
}

pub const CONTINUATION: &str = "##";
pub const DEFAULT_UNK: &str = "[UNK]";
const MAX_CHARS_PER_WORD: usize = 100;

/// Word-piece vocabulary; continuation pieces carry a `##` prefix.
#[derive(Debug, Clone)]
pub struct PieceVocab {
    pieces: HashSet<String>,
    unk: String,
}

impl PieceVocab {
    pub fn new(pieces: impl IntoIterator<Item = String>) -> Self {
        PieceVocab {
            pieces: pieces.into_iter().collect(),
            unk: DEFAULT_UNK.to_string(),
        }
    }

    pub fn with_unk(mut self, unk: impl Into<String>) -> Self {
        self.unk = unk.into();
        self
    }

    /// Reads one piece per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(PieceVocab::new(
            text.lines().map(str::trim_end).filter(|l| !l.is_empty()).map(String::from),
        ))
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.pieces.contains(piece)
    }

    pub fn unk(&self) -> &str {
        &self.unk
    }

    /// Greedy longest-prefix segmentation of one word; `None` if some
    /// remainder has no matching piece.
    fn segment(&self, word: &str) -> Option<Vec<String>> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            return None;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, CONTINUATION);
                }
                if self.pieces.contains(&piece) {
                    found = Some(piece);
                    break;
                }
                end -= 1;
            }
            pieces.push(found?);
            start = end;
        }
        Some(pieces)
    }
}

/// Word pieces of a sequence and the token each came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PieceAlignment {
    pub pieces: Vec<String>,
    pub parent: Vec<usize>,
}

impl PieceAlignment {
    pub fn identity(len: usize) -> Self {
        PieceAlignment {
            pieces: Vec::new(),
            parent: (0..len).collect(),
        }
    }

    pub fn piece_count(&self) -> usize {
        self.parent.len()
    }

    pub fn token_count(&self) -> usize {
        self.parent.last().map_or(0, |&p| p + 1)
    }

    /// Index of the first piece of every token.
    pub fn first_pieces(&self) -> Vec<usize> {
        let mut firsts = Vec::with_capacity(self.token_count());
        for (i, &p) in self.parent.iter().enumerate() {
            if i == 0 || self.parent[i - 1] != p {
                firsts.push(i);
            }
        }
        firsts
    }
}

/// Segments every token; a token that cannot be fully covered becomes a
/// single unknown piece.
pub fn wordpiece(tokens: &[Token], vocab: &PieceVocab) -> PieceAlignment {
    let mut pieces = Vec::new();
    let mut parent = Vec::new();
    for (i, tok) in tokens.iter().enumerate() {
        match vocab.segment(&tok.surface) {
            Some(ps) => {
                parent.extend(std::iter::repeat_n(i, ps.len()));
                pieces.extend(ps);
            }
            None => {
                pieces.push(vocab.unk.clone());
                parent.push(i);
            }
        }
    }
    PieceAlignment { pieces, parent }
}

/// Repeats token-level item `i` once per piece of token `i`.
pub fn expand_to_pieces<T: Clone>(alignment: &PieceAlignment, items: &[T]) -> Result<Vec<T>, EmbeddingError> {
    if items.len() != alignment.token_count() {
        return Err(EmbeddingError::LengthMismatch {
            expected: alignment.token_count(),
            actual: items.len(),
        });
    }
    Ok(alignment.parent.iter().map(|&p| items[p].clone()).collect())
}

/// Keeps the first piece's item for every token.
pub fn collapse_to_tokens<T: Clone>(alignment: &PieceAlignment, items: &[T]) -> Result<Vec<T>, EmbeddingError> {
    if items.len() != alignment.piece_count() {
        return Err(EmbeddingError::LengthMismatch {
            expected: alignment.piece_count(),
            actual: items.len(),
        });
    }
    Ok(alignment.first_pieces().into_iter().map(|i| items[i].clone()).collect())
}

pub const STORE_MAGIC: &[u8; 4] = b"CTXE";
pub const STORE_VERSION: u16 = 1;

/// Row-major `rows x dim` block of contextual vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMatrix {
    pub rows: usize,
    pub data: Vec<f32>,
}

impl ContextMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        let dim = self.data.len() / self.rows.max(1);
        &self.data[i * dim..(i + 1) * dim]
    }
}

/// Precomputed per-piece contextual vectors keyed by sequence id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextualStore {
    dim: usize,
    entries: BTreeMap<String, ContextMatrix>,
}

impl ContextualStore {
    pub fn new(dim: usize) -> Self {
        ContextualStore {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, rows: usize, data: Vec<f32>) -> Result<(), EmbeddingError> {
        if data.len() != rows * self.dim {
            return Err(EmbeddingError::LengthMismatch {
                expected: rows * self.dim,
                actual: data.len(),
            });
        }
        self.entries.insert(id.into(), ContextMatrix { rows, data });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&ContextMatrix, EmbeddingError> {
        self.entries
            .get(id)
            .ok_or_else(|| EmbeddingError::UnknownSequence(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Serializes to the CTXE layout. All integers and floats little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for (id, m) in &self.entries {
            let id_bytes = id.as_bytes();
            let id_len = u16::try_from(id_bytes.len())
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "sequence id longer than 65535 bytes"))?;
            w.write_all(&id_len.to_le_bytes())?;
            w.write_all(id_bytes)?;
            w.write_all(&(m.rows as u32).to_le_bytes())?;
            for v in &m.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, EmbeddingError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != STORE_MAGIC {
            return Err(EmbeddingError::Format(format!("magic {magic:?} is not CTXE")));
        }
        let version = u16::from_le_bytes(read_array(&mut r, "version")?);
        if version != STORE_VERSION {
            return Err(EmbeddingError::Format(format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(read_array(&mut r, "dimension")?) as usize;
        if dim == 0 {
            return Err(EmbeddingError::Format("dimension 0".into()));
        }
        let mut store = ContextualStore::new(dim);
        loop {
            let mut len = [0u8; 2];
            match r.read(&mut len[..1]) {
                Ok(0) => break,
                Ok(_) => read_exact(&mut r, &mut len[1..], "id length")?,
                Err(e) => return Err(EmbeddingError::Format(e.to_string())),
            }
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(&mut r, &mut id, "id")?;
            let id = String::from_utf8(id).map_err(|_| EmbeddingError::Format("id is not UTF-8".into()))?;
            let rows = u32::from_le_bytes(read_array(&mut r, "piece count")?) as usize;
            let mut raw = vec![0u8; rows * dim * 4];
            read_exact(&mut r, &mut raw, "vector data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.entries.insert(id.clone(), ContextMatrix { rows, data }).is_some() {
                return Err(EmbeddingError::Format(format!("duplicate entry `{id}`")));
            }
        }
        Ok(store)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => EmbeddingError::Format(format!("truncated while reading {what}")),
        _ => EmbeddingError::Format(e.to_string()),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N], EmbeddingError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

pub fn store_read(path: impl AsRef<Path>) -> Result<ContextualStore, EmbeddingError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ContextualStore::read_from(BufReader::new(file))
}

pub fn store_write(store: &ContextualStore, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    let io_err = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    store.write_to(BufWriter::new(file)).map_err(io_err)
}
