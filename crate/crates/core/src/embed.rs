//! Sentence embeddings.
//!
//! Two embedders are built in:
//!
//! * signed feature hashing of unigrams and adjacent bigrams (default);
//! * averaging of pretrained word vectors read from the textual
//!   `"<vocab_size> <dim>"` + `"<token> v1 ... vd"` format.
//!
//! Both return L2-normalized vectors, or the zero vector when nothing
//! contributes (empty token list, all tokens out of vocabulary).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::ReviewCorpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Normalizes `values` in place; a zero vector stays zero and unflagged.
    fn from_raw(mut values: Vec<f64>) -> Self {
        let n = l2_norm(&values);
        if n > 0.0 {
            values.iter_mut().for_each(|v| *v /= n);
        }
        Embedding {
            values,
            normalized: n > 0.0,
        }
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// An embedding tagged with its place in the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    pub review_id: String,
    pub position: usize,
    pub embedding: Embedding,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// NFC-normalize, lowercase, split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // splitmix64 finalizer; FNV alone leaves the high bits poorly mixed
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Signed feature hashing of unigrams and adjacent bigrams.
///
/// Each feature is hashed with seeded FNV-1a (splitmix64-finalized) to
/// `h`; it adds `+1` or `-1` (top bit of `h`) to coordinate `h mod dim`.
pub fn hash_embed<S: AsRef<str>>(tokens: &[S], dim: usize, seed: u64) -> Result<Embedding> {
    if dim < 2 {
        return Err(Error::Config(format!(
            "hashing dimension must be at least 2, got {dim}"
        )));
    }
    let mut values = vec![0.0; dim];
    let mut add = |feature: &str| {
        let h = fnv1a(seed, feature.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[(h % dim as u64) as usize] += sign;
    };
    for t in tokens {
        add(t.as_ref());
    }
    let mut buf = String::new();
    for pair in tokens.windows(2) {
        buf.clear();
        let _ = write!(buf, "{} {}", pair[0].as_ref(), pair[1].as_ref());
        add(&buf);
    }
    Ok(Embedding::from_raw(values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl WordVectorTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("word-vector table is empty".into()));
        }
        let mut tokens = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        let mut index = HashMap::with_capacity(entries.len());
        for (token, v) in entries {
            if v.len() != dim {
                return Err(Error::Validation(format!(
                    "token `{token}` has {} values, expected {dim}",
                    v.len()
                )));
            }
            if index.insert(token.clone(), tokens.len()).is_some() {
                return Err(Error::Validation(format!("duplicate token `{token}`")));
            }
            tokens.push(token);
            vectors.push(v);
        }
        Ok(WordVectorTable {
            dim,
            tokens,
            vectors,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors[i].as_slice())
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<writer>", e);
        writeln!(w, "{} {}", self.tokens.len(), self.dim).map_err(io)?;
        for (t, v) in self.tokens.iter().zip(&self.vectors) {
            let mut line = t.clone();
            for x in v {
                let _ = write!(line, " {x}");
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical text serialization.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

pub fn load_word_vectors(path: &Path) -> Result<WordVectorTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(BufReader::new(file), path)
}

pub fn parse_word_vectors<R: BufRead>(reader: R, path: &Path) -> Result<WordVectorTable> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(perr(1, "empty word-vector file".into())),
            Some((_, l)) => {
                let l = l.map_err(|e| Error::io(path, e))?;
                if !l.trim().is_empty() {
                    break l;
                }
            }
        }
    };
    let mut fields = header.split_whitespace().map(str::parse::<usize>);
    let (vocab, dim) = match (fields.next(), fields.next(), fields.next()) {
        (Some(Ok(v)), Some(Ok(d)), None) if d > 0 => (v, d),
        _ => {
            return Err(perr(
                1,
                format!("expected header `<vocab_size> <dim>`, got `{header}`"),
            ))
        }
    };
    let mut entries = Vec::with_capacity(vocab);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap_or_default().to_string();
        let values = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| perr(idx + 1, format!("token `{token}`: {e}")))?;
        if values.len() != dim {
            return Err(perr(
                idx + 1,
                format!(
                    "token `{token}` has {} values, header says {dim}",
                    values.len()
                ),
            ));
        }
        entries.push((token, values));
    }
    if entries.len() != vocab {
        return Err(perr(
            1,
            format!("header declares {vocab} tokens, file has {}", entries.len()),
        ));
    }
    WordVectorTable::new(dim, entries).map_err(|e| perr(1, e.to_string()))
}

/// Mean of in-vocabulary token vectors, L2-normalized.
pub fn average_embed<S: AsRef<str>>(tokens: &[S], table: &WordVectorTable) -> Embedding {
    let mut sum = vec![0.0; table.dim()];
    let mut hits = 0usize;
    for t in tokens {
        if let Some(v) = table.get(t.as_ref()) {
            sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
            hits += 1;
        }
    }
    if hits > 0 {
        sum.iter_mut().for_each(|s| *s /= hits as f64);
    }
    Embedding::from_raw(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hashing,
    Average,
}

#[derive(Debug, Clone)]
pub enum Embedder {
    Hashing { dim: usize, seed: u64 },
    Average(Arc<WordVectorTable>),
}

impl Embedder {
    pub fn hashing(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!(
                "hashing dimension must be at least 2, got {dim}"
            )));
        }
        Ok(Embedder::Hashing { dim, seed })
    }

    pub fn dim(&self) -> usize {
        match self {
            Embedder::Hashing { dim, .. } => *dim,
            Embedder::Average(t) => t.dim(),
        }
    }

    pub fn embed_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Embedding> {
        match self {
            Embedder::Hashing { dim, seed } => hash_embed(tokens, *dim, *seed),
            Embedder::Average(t) => Ok(average_embed(tokens, t)),
        }
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding> {
        self.embed_tokens(&tokenize(text))
    }

    /// Identifies the embedding function; stored with trained models.
    pub fn fingerprint(&self) -> String {
        match self {
            Embedder::Hashing { dim, seed } => format!("hashing-fnv1a64-v1:dim={dim}:seed={seed}"),
            Embedder::Average(t) => {
                format!("average-v1:dim={}:sha256={}", t.dim(), &t.digest()[..16])
            }
        }
    }
}

/// One embedding per sentence, in review order then sentence order.
pub fn embed_corpus(corpus: &ReviewCorpus, embedder: &Embedder) -> Result<Vec<SentenceEmbedding>> {
    if !corpus.is_split() {
        return Err(Error::Validation("corpus sentences have not been split".into()));
    }
    let refs: Vec<(&str, usize, &str)> = corpus
        .reviews
        .iter()
        .flat_map(|r| {
            r.sentences
                .iter()
                .enumerate()
                .map(move |(i, s)| (r.review_id.as_str(), i, s.as_str()))
        })
        .collect();
    refs.par_iter()
        .map(|&(id, pos, s)| {
            Ok(SentenceEmbedding {
                review_id: id.to_string(),
                position: pos,
                embedding: embedder.embed_text(s).map_err(|e| e.in_review(id))?,
            })
        })
        .collect()
}
