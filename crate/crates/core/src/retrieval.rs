//! Structure-free semantic index over node texts with exact top-K cosine retrieval.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{NodeId, TextAttributedGraph};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("embedding service returned HTTP {0}")]
    HttpStatus(u16),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding is empty")]
    EmptyVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding node {node} failed: {source}")]
    EmbedderFailure {
        node: NodeId,
        #[source]
        source: EmbedError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index file: {0}")]
    MalformedSidecar(String),
}

/// Dense embedding with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, RetrievalError> {
        if values.is_empty() {
            return Err(RetrievalError::EmptyVector);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self, RetrievalError> {
        Self::new(values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn norm(&self) -> T {
        l2_norm(&self.values)
    }

    pub fn scaled(&self, factor: T) -> Result<Self, RetrievalError> {
        Self::new(self.values.iter().map(|&v| v * factor).collect())
    }
}

fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

fn similarity<T: Scalar>(a: &[T], a_norm: T, b: &[T], b_norm: T) -> T {
    let dot = a
        .iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    (dot / (a_norm * b_norm)).max(-T::one()).min(T::one())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(
    a: &EmbeddingVector<T>,
    b: &EmbeddingVector<T>,
) -> Result<T, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (an, bn) = (a.norm(), b.norm());
    if an == T::zero() || bn == T::zero() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(similarity(&a.values, an, &b.values, bn))
}

/// Source of text embeddings.
pub trait EmbeddingProvider<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>, EmbedError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector<T>, EmbedError> {
        self.embed(&[text])?
            .pop()
            .ok_or_else(|| EmbedError::Malformed("empty embedding batch".into()))
    }
}

/// Deterministic feature-hashing embedder for tests and offline runs.
///
/// Each lowercase alphanumeric token adds ±1 to a bucket chosen by SHA-256 of
/// `(seed, token)`, so texts sharing vocabulary point in similar directions.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    fn bucket(&self, token: &str) -> (usize, bool) {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut idx = [0u8; 8];
        idx.copy_from_slice(&digest[..8]);
        let bucket = (u64::from_le_bytes(idx) % self.dim as u64) as usize;
        (bucket, digest[8] & 1 == 1)
    }

    pub fn embed_text<T: Scalar>(&self, text: &str) -> EmbeddingVector<T> {
        let mut v = vec![T::zero(); self.dim];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let (b, negative) = self.bucket(token);
            v[b] = if negative { v[b] - T::one() } else { v[b] + T::one() };
        }
        if v.iter().all(|x| *x == T::zero()) {
            let (b, _) = self.bucket(text);
            v[b] = T::one();
        }
        EmbeddingVector { values: v }
    }
}

impl<T: Scalar> EmbeddingProvider<T> for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Client for an embeddings endpoint speaking `{"input": [...], "model": ...}`.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    url: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: &'a [&'a str],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
    index: usize,
}

pub const EMBEDDING_API_KEY_ENV: &str = "REAGAN_EMBEDDING_API_KEY";

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: url.into(),
            model: model.into(),
            dim,
            api_key: std::env::var(EMBEDDING_API_KEY_ENV).ok(),
        }
    }
}

impl<T: Scalar> EmbeddingProvider<T> for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector<T>>, EmbedError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(EmbedRequest {
                input: texts,
                model: &self.model,
            })
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(EmbedError::HttpStatus(status));
        }
        let mut body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Malformed(e.to_string()))?;
        if body.data.len() != texts.len() {
            return Err(EmbedError::Malformed(format!(
                "{} embeddings for {} inputs",
                body.data.len(),
                texts.len()
            )));
        }
        body.data.sort_by_key(|d| d.index);
        body.data
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                if d.index != i {
                    return Err(EmbedError::Malformed(format!("missing index {i}")));
                }
                EmbeddingVector::from_f64(&d.embedding).map_err(|e| EmbedError::Malformed(e.to_string()))
            })
            .collect()
    }
}

/// Embeds every node's original text, `batch_size` texts per call and at most
/// `max_in_flight` calls at once. Output is in node id order.
pub fn embed_graph<T: Scalar>(
    graph: &TextAttributedGraph,
    embedder: &dyn EmbeddingProvider<T>,
    batch_size: usize,
    max_in_flight: usize,
) -> Result<Vec<EmbeddingVector<T>>, RetrievalError> {
    let batch_size = batch_size.max(1);
    let batches: Vec<(usize, Vec<&str>)> = graph
        .nodes()
        .chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| (i * batch_size, chunk.iter().map(|n| n.text.as_str()).collect()))
        .collect();
    type Batch<T> = Result<Vec<EmbeddingVector<T>>, RetrievalError>;
    let results: Mutex<Vec<Option<Batch<T>>>> =
        Mutex::new((0..batches.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = max_in_flight.max(1).min(batches.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let b = next.fetch_add(1, AtomicOrdering::Relaxed);
                let Some((start, texts)) = batches.get(b) else {
                    break;
                };
                let out = embedder.embed(texts).map_err(|source| RetrievalError::EmbedderFailure {
                    node: *start,
                    source,
                });
                let out = out.and_then(|vs| {
                    if vs.len() == texts.len() {
                        Ok(vs)
                    } else {
                        Err(RetrievalError::EmbedderFailure {
                            node: *start,
                            source: EmbedError::Malformed("batch size mismatch".into()),
                        })
                    }
                });
                results.lock().expect("poisoned")[b] = Some(out);
            });
        }
    });
    let mut all = Vec::with_capacity(graph.node_count());
    for r in results.into_inner().expect("poisoned") {
        all.extend(r.expect("every batch processed")?);
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry<T> {
    pub node_id: NodeId,
    pub embedding: EmbeddingVector<T>,
    pub text: String,
    /// Present only for train nodes.
    pub label: Option<usize>,
    norm: T,
}

/// One retrieved neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit<'a, T> {
    pub node_id: NodeId,
    pub similarity: T,
    pub text: &'a str,
    pub label: Option<usize>,
}

/// Flat list of node embeddings; holds no adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticIndex<T> {
    entries: Vec<IndexEntry<T>>,
    dim: usize,
}

impl<T: Scalar> SemanticIndex<T> {
    /// Attaches original texts and train-only labels to precomputed embeddings
    /// (one per node, in node id order).
    pub fn from_embeddings(
        graph: &TextAttributedGraph,
        embeddings: Vec<EmbeddingVector<T>>,
    ) -> Result<Self, RetrievalError> {
        if embeddings.len() != graph.node_count() {
            return Err(RetrievalError::MalformedSidecar(format!(
                "{} embeddings for {} nodes",
                embeddings.len(),
                graph.node_count()
            )));
        }
        let dim = embeddings.first().map_or(0, EmbeddingVector::dim);
        let mut entries = Vec::with_capacity(embeddings.len());
        for (node, embedding) in graph.nodes().iter().zip(embeddings) {
            if embedding.dim() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    found: embedding.dim(),
                });
            }
            let norm = embedding.norm();
            if norm == T::zero() {
                return Err(RetrievalError::ZeroVector);
            }
            entries.push(IndexEntry {
                node_id: node.node_id,
                embedding,
                text: node.text.clone(),
                label: graph.visible_label(node.node_id),
                norm,
            });
        }
        Ok(Self { entries, dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &EmbeddingVector<T>> {
        self.entries.iter().map(|e| &e.embedding)
    }

    /// The `k` most similar entries outside `exclude`, by descending similarity and
    /// ascending node id on ties.
    pub fn top_k(
        &self,
        query: &EmbeddingVector<T>,
        k: usize,
        exclude: &[NodeId],
    ) -> Result<Vec<Hit<'_, T>>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let qn = query.norm();
        if qn == T::zero() {
            return Err(RetrievalError::ZeroVector);
        }
        let mut scored: Vec<(T, &IndexEntry<T>)> = self
            .entries
            .iter()
            .filter(|e| !exclude.contains(&e.node_id))
            .map(|e| (similarity(&query.values, qn, &e.embedding.values, e.norm), e))
            .collect();
        let rank = |a: &(T, &IndexEntry<T>), b: &(T, &IndexEntry<T>)| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.node_id.cmp(&b.1.node_id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        Ok(scored
            .into_iter()
            .map(|(similarity, e)| Hit {
                node_id: e.node_id,
                similarity,
                text: &e.text,
                label: e.label,
            })
            .collect())
    }
}

/// Embeds the graph and builds its index.
pub fn build_index<T: Scalar>(
    graph: &TextAttributedGraph,
    embedder: &dyn EmbeddingProvider<T>,
    batch_size: usize,
    max_in_flight: usize,
) -> Result<SemanticIndex<T>, RetrievalError> {
    let embeddings = embed_graph(graph, embedder, batch_size, max_in_flight)?;
    if let Some(found) = embeddings.iter().map(EmbeddingVector::dim).find(|&d| d != embedder.dim()) {
        return Err(RetrievalError::DimensionMismatch {
            expected: embedder.dim(),
            found,
        });
    }
    SemanticIndex::from_embeddings(graph, embeddings)
}

const SIDECAR_MAGIC: &[u8; 4] = b"RGIX";

#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarHeader {
    pub dim: usize,
    pub count: usize,
    pub ids: Vec<String>,
}

/// Writes embeddings as: magic `RGIX`, u64 LE header length, JSON header
/// `{dim, count, ids}`, then `count * dim` little-endian f32 values.
pub fn write_sidecar<T: Scalar>(
    path: &Path,
    ids: &[String],
    embeddings: &[EmbeddingVector<T>],
) -> Result<(), RetrievalError> {
    let io = |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dim = embeddings.first().map_or(0, EmbeddingVector::dim);
    let header = serde_json::to_vec(&SidecarHeader {
        dim,
        count: embeddings.len(),
        ids: ids.to_vec(),
    })
    .expect("header serializes");
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(SIDECAR_MAGIC).map_err(io)?;
    out.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&header).map_err(io)?;
    for e in embeddings {
        for &v in e.values() {
            let f = v.to_f32().unwrap_or(f32::NAN);
            out.write_all(&f.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_sidecar<T: Scalar>(
    path: &Path,
) -> Result<(SidecarHeader, Vec<EmbeddingVector<T>>), RetrievalError> {
    let io = |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut input = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != SIDECAR_MAGIC {
        return Err(RetrievalError::MalformedSidecar("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header).map_err(io)?;
    let header: SidecarHeader = serde_json::from_slice(&header)
        .map_err(|e| RetrievalError::MalformedSidecar(e.to_string()))?;
    if header.ids.len() != header.count {
        return Err(RetrievalError::MalformedSidecar("id count mismatch".into()));
    }
    let mut buf = [0u8; 4];
    let mut embeddings = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let mut values = Vec::with_capacity(header.dim);
        for _ in 0..header.dim {
            input.read_exact(&mut buf).map_err(io)?;
            values.push(T::from_f64_lossy(f32::from_le_bytes(buf) as f64));
        }
        embeddings.push(EmbeddingVector::new(values)?);
    }
    if input.read(&mut buf).map_err(io)? != 0 {
        return Err(RetrievalError::MalformedSidecar("trailing bytes".into()));
    }
    Ok((header, embeddings))
}

/// Loads a sidecar and reorders its vectors into the graph's node order.
pub fn load_index_for_graph<T: Scalar>(
    path: &Path,
    graph: &TextAttributedGraph,
) -> Result<Vec<EmbeddingVector<T>>, RetrievalError> {
    let (header, embeddings) = read_sidecar::<T>(path)?;
    let mut slots: Vec<Option<EmbeddingVector<T>>> = vec![None; graph.node_count()];
    for (id, e) in header.ids.iter().zip(embeddings) {
        let v = graph
            .resolve(id)
            .ok_or_else(|| RetrievalError::MalformedSidecar(format!("unknown node id {id:?}")))?;
        slots[v] = Some(e);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(v, e)| {
            e.ok_or_else(|| RetrievalError::MalformedSidecar(format!("no vector for node {v}")))
        })
        .collect()
}
