//! Text embedding and exact top-k retrieval over dataset cards.
//!
//! The default embedder is a signed hashed term-frequency vector: tokens are
//! lowercased alphanumeric runs of length >= 2, each weighted by
//! `1 + ln(tf)` (times an IDF factor when a vocabulary is attached) and
//! added with a hash-derived sign into one of `dimension` buckets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::adapter::{Adapter, AdapterError};
use crate::catalog::DatasetCard;
use crate::util;

pub const DEFAULT_DIMENSION: usize = 4096;
pub const MIN_DIMENSION: usize = 64;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("query dimension {query} does not match index dimension {index}")]
    DimensionMismatch { query: usize, index: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("duplicate card id `{0}` in index")]
    DuplicateId(String),
    #[error("embedder `{found}` cannot be mixed into index built by `{expected}`")]
    EmbedderMismatch { expected: String, found: String },
    #[error("embedding failed: {0}")]
    Embed(#[from] AdapterError),
    #[error("index file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Lowercased alphanumeric runs of at least two characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }

    /// Cosine similarity; 0 when either vector is zero.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.norm == 0.0 || other.norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        (dot / (self.norm * other.norm)).clamp(-1.0, 1.0)
    }
}

/// Document frequencies over a corpus of texts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    documents: usize,
    doc_freq: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut vocab = Vocabulary::default();
        for text in texts {
            vocab.documents += 1;
            let unique: BTreeSet<String> = tokenize(text).into_iter().collect();
            for token in unique {
                *vocab.doc_freq.entry(token).or_default() += 1;
            }
        }
        vocab
    }

    /// Smoothed inverse document frequency: `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(token).copied().unwrap_or(0);
        ((1.0 + self.documents as f64) / (1.0 + df as f64)).ln() + 1.0
    }

    fn fingerprint(&self) -> u64 {
        let mut s = format!("{}", self.documents);
        for (t, df) in &self.doc_freq {
            let _ = write!(s, "|{t}:{df}");
        }
        util::stable_hash(s.as_bytes())
    }
}

/// Raw hashed-TF embedding (no IDF).
pub fn embed_text(text: &str, dimension: usize) -> EmbeddingVector {
    embed_text_with_vocabulary(text, dimension, None)
}

pub fn embed_text_with_vocabulary(
    text: &str,
    dimension: usize,
    vocabulary: Option<&Vocabulary>,
) -> EmbeddingVector {
    assert!(
        dimension >= MIN_DIMENSION,
        "embedding dimension must be at least {MIN_DIMENSION}"
    );
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for token in tokenize(text) {
        *tf.entry(token).or_default() += 1;
    }
    let mut values = vec![0.0; dimension];
    for (token, count) in &tf {
        let h = util::stable_hash(token.as_bytes());
        let bucket = (h % dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        let mut weight = 1.0 + (*count as f64).ln();
        if let Some(v) = vocabulary {
            weight *= v.idf(token);
        }
        values[bucket] += sign * weight;
    }
    EmbeddingVector::new(values)
}

/// Text used to embed a card: name, description, feature names, feature
/// descriptions and class labels, space-separated. The id is excluded.
pub fn card_text(card: &DatasetCard) -> String {
    let mut parts: Vec<&str> = vec![&card.name, &card.description];
    parts.extend(card.feature_names.iter().map(String::as_str));
    parts.extend(
        card.feature_names
            .iter()
            .filter_map(|f| card.feature_descriptions.get(f))
            .map(String::as_str),
    );
    parts.extend(card.class_labels.iter().map(String::as_str));
    parts.retain(|p| !p.is_empty());
    parts.join(" ")
}

/// Builds the retrieval query for a target card through the adapter.
pub fn build_query(card: &DatasetCard, adapter: &dyn Adapter) -> Result<String, AdapterError> {
    adapter.generate_query(card)
}

pub trait Embedder: Send + Sync {
    /// Identifies the embedder; indexes refuse vectors with a different tag.
    fn tag(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashedTfEmbedder {
    dimension: usize,
    vocabulary: Option<Vocabulary>,
}

impl HashedTfEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension >= MIN_DIMENSION);
        Self {
            dimension,
            vocabulary: None,
        }
    }

    pub fn with_vocabulary(mut self, vocabulary: Vocabulary) -> Self {
        self.vocabulary = Some(vocabulary);
        self
    }

    pub fn vocabulary(&self) -> Option<&Vocabulary> {
        self.vocabulary.as_ref()
    }
}

impl Embedder for HashedTfEmbedder {
    fn tag(&self) -> String {
        match &self.vocabulary {
            None => format!("hashed-tf/d{}", self.dimension),
            Some(v) => format!("hashed-tfidf/d{}/v{:016x}", self.dimension, v.fingerprint()),
        }
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        Ok(embed_text_with_vocabulary(
            text,
            self.dimension,
            self.vocabulary.as_ref(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalResult {
    pub ranked: Vec<Ranked>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.id.as_str()).collect()
    }
}

/// Immutable library of card embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CardIndex {
    dimension: usize,
    embedder_tag: String,
    entries: Vec<IndexEntry>,
    vocabulary: Option<Vocabulary>,
}

impl CardIndex {
    pub fn build<'a, I>(cards: I, embedder: &dyn Embedder) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = &'a DatasetCard>,
    {
        let mut entries: Vec<IndexEntry> = Vec::new();
        let mut seen = BTreeSet::new();
        for card in cards {
            if !seen.insert(card.id.clone()) {
                return Err(RetrievalError::DuplicateId(card.id.clone()));
            }
            let vector = embedder.embed(&card_text(card))?;
            if vector.dimension() != embedder.dimension() {
                return Err(RetrievalError::DimensionMismatch {
                    query: vector.dimension(),
                    index: embedder.dimension(),
                });
            }
            entries.push(IndexEntry {
                id: card.id.clone(),
                vector,
            });
        }
        Ok(Self {
            dimension: embedder.dimension(),
            embedder_tag: embedder.tag(),
            entries,
            vocabulary: None,
        })
    }

    /// Builds an index with the hashed embedder, optionally with IDF weights
    /// learned from the indexed card texts. Returns the embedder to use for
    /// queries against it.
    pub fn build_hashed<'a, I>(cards: I, dimension: usize, idf: bool) -> Result<(Self, HashedTfEmbedder), RetrievalError>
    where
        I: IntoIterator<Item = &'a DatasetCard> + Clone,
    {
        let mut embedder = HashedTfEmbedder::new(dimension);
        if idf {
            let texts: Vec<String> = cards.clone().into_iter().map(card_text).collect();
            embedder = embedder.with_vocabulary(Vocabulary::from_texts(texts.iter().map(String::as_str)));
        }
        let mut index = Self::build(cards, &embedder)?;
        index.vocabulary = embedder.vocabulary.clone();
        Ok((index, embedder))
    }

    /// Hashed embedder matching this index, when it was built by one.
    pub fn hashed_embedder(&self) -> Option<HashedTfEmbedder> {
        let mut e = HashedTfEmbedder::new(self.dimension);
        if let Some(v) = &self.vocabulary {
            e = e.with_vocabulary(v.clone());
        }
        (e.tag() == self.embedder_tag).then_some(e)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn embedder_tag(&self) -> &str {
        &self.embedder_tag
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy of the index without the given card ids.
    pub fn without(&self, ids: &[&str]) -> Self {
        let mut out = self.clone();
        out.entries.retain(|e| !ids.contains(&e.id.as_str()));
        out
    }

    /// Exact cosine scan. Ties are broken by ascending card id.
    pub fn query_topk(&self, query: &EmbeddingVector, k: usize) -> Result<RetrievalResult, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.dimension() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                query: query.dimension(),
                index: self.dimension,
            });
        }
        let mut ranked: Vec<Ranked> = self
            .entries
            .iter()
            .map(|e| Ranked {
                id: e.id.clone(),
                score: query.cosine(&e.vector),
            })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        ranked.truncate(k);
        Ok(RetrievalResult { ranked })
    }

    /// Text dump: header lines, optional vocabulary, then one sparse vector per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dimension\t{}", self.dimension);
        let _ = writeln!(out, "embedder\t{}", self.embedder_tag);
        if let Some(v) = &self.vocabulary {
            let _ = writeln!(out, "documents\t{}", v.documents);
            for (token, df) in &v.doc_freq {
                let _ = writeln!(out, "df\t{token}\t{df}");
            }
        }
        for e in &self.entries {
            let _ = write!(out, "entry\t{}\t", e.id);
            let mut first = true;
            for (i, v) in e.vector.values().iter().enumerate() {
                if *v != 0.0 {
                    if !first {
                        out.push(',');
                    }
                    let _ = write!(out, "{i}:{v}");
                    first = false;
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RetrievalError> {
        let fail = |line: usize, reason: &str| RetrievalError::Format {
            line,
            reason: reason.to_string(),
        };
        let mut dimension = None;
        let mut tag = None;
        let mut vocab: Option<Vocabulary> = None;
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let ln = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["dimension", d] => {
                    dimension = Some(d.parse::<usize>().map_err(|_| fail(ln, "bad dimension"))?)
                }
                ["embedder", t] => tag = Some(t.to_string()),
                ["documents", n] => {
                    vocab.get_or_insert_with(Vocabulary::default).documents =
                        n.parse().map_err(|_| fail(ln, "bad document count"))?
                }
                ["df", token, df] => {
                    vocab
                        .get_or_insert_with(Vocabulary::default)
                        .doc_freq
                        .insert(token.to_string(), df.parse().map_err(|_| fail(ln, "bad df"))?);
                }
                ["entry", id, sparse] => {
                    let dim = dimension.ok_or_else(|| fail(ln, "entry before dimension"))?;
                    let mut values = vec![0.0; dim];
                    for pair in sparse.split(',').filter(|s| !s.is_empty()) {
                        let (i, v) = pair.split_once(':').ok_or_else(|| fail(ln, "bad component"))?;
                        let i: usize = i.parse().map_err(|_| fail(ln, "bad component index"))?;
                        if i >= dim {
                            return Err(fail(ln, "component index out of range"));
                        }
                        values[i] = v.parse().map_err(|_| fail(ln, "bad component value"))?;
                    }
                    entries.push(IndexEntry {
                        id: id.to_string(),
                        vector: EmbeddingVector::new(values),
                    });
                }
                _ => return Err(fail(ln, "unrecognised line")),
            }
        }
        let dimension = dimension.ok_or_else(|| fail(0, "missing dimension"))?;
        let embedder_tag = tag.ok_or_else(|| fail(0, "missing embedder"))?;
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id.clone()) {
                return Err(RetrievalError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self {
            dimension,
            embedder_tag,
            entries,
            vocabulary: vocab,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
