//! Embedding providers, an exact cosine top-k index, and demonstration order.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::http::{HttpSettings, JsonClient};

pub const DEFAULT_HASH_DIM: usize = 256;
const UNIT_TOLERANCE: f64 = 1e-6;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `raw`. Fails on non-finite entries or a zero vector.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("embedding contains non-finite values".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::EmptyText);
        }
        Ok(Self(raw.into_iter().map(|v| v / norm).collect()))
    }

    fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.iter().any(|v| !v.is_finite()) || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::IndexFormat(format!(
                "stored vector is not unit norm ({norm})"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider and its parameters; stored in indexes and
    /// classifiers so mismatched artifacts are rejected.
    fn tag(&self) -> String;

    fn dim(&self) -> usize;

    /// Unnormalized embedding.
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let raw = self.embed_raw(text)?;
        if raw.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: raw.len(),
            });
        }
        EmbeddingVector::from_raw(raw)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Offline bag-of-words embedding: lowercased alphanumeric tokens hashed
/// (FNV-1a) into `dim` signed buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingProvider {
    dim: usize,
}

impl Default for HashingProvider {
    fn default() -> Self {
        Self {
            dim: DEFAULT_HASH_DIM,
        }
    }
}

impl HashingProvider {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("hashing dimension must be positive".into()));
        }
        Ok(Self { dim })
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    /// Bucket and sign of a token.
    pub fn slot(&self, token: &str) -> (usize, f64) {
        let h = fnv1a64(token.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl EmbeddingProvider for HashingProvider {
    fn tag(&self) -> String {
        format!("hashing-fnv1a/{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for token in Self::tokens(text) {
            let (bucket, sign) = self.slot(&token);
            v[bucket] += sign;
            any = true;
        }
        if !any {
            return Err(Error::EmptyText);
        }
        Ok(v)
    }
}

/// `POST {endpoint}/v1/embeddings` with `{model, input}`; reads
/// `data[0].embedding`.
pub struct RemoteProvider {
    client: JsonClient,
    model: String,
    dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteProviderSettings {
    pub model: String,
    pub dim: usize,
    #[serde(flatten)]
    pub http: HttpSettings,
}

impl RemoteProvider {
    pub fn new(settings: &RemoteProviderSettings) -> Result<Self> {
        Ok(Self {
            client: JsonClient::new(&settings.http)?,
            model: settings.model.clone(),
            dim: settings.dim,
        })
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn tag(&self) -> String {
        format!("remote:{}/{}", self.model, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>> {
        let response = self
            .client
            .post("/v1/embeddings", &json!({"model": self.model, "input": text}))?;
        let protocol = |reason: &str| Error::Protocol {
            endpoint: self.client.url("/v1/embeddings"),
            reason: reason.to_string(),
        };
        let values = response
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| protocol("missing data[0].embedding"))?;
        values
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| protocol("non-numeric embedding entry")))
            .collect()
    }
}

/// Exact cosine index over the label-free renders of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    provider_tag: String,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

const INDEX_MAGIC: &[u8; 8] = b"NICLIDX1";

impl EmbeddingIndex {
    pub fn from_parts(
        provider_tag: String,
        dim: usize,
        ids: Vec<String>,
        vectors: Vec<EmbeddingVector>,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::Shape(format!(
                "{} ids but {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: v.dim(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            provider_tag,
            dim,
            ids,
            vectors,
        })
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `n` most similar ids, excluding `exclude`, in ascending similarity
    /// (most similar last). Equal similarities rank the smaller id higher.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        n: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<String>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let mut scored: Vec<(f64, &str)> = self
            .ids
            .iter()
            .zip(&self.vectors)
            .filter(|(id, _)| !exclude.contains(*id))
            .map(|(id, v)| (query.cosine(v), id.as_str()))
            .collect();
        if n == 0 || n > scored.len() {
            return Err(Error::NotEnoughCandidates {
                requested: n,
                available: scored.len(),
            });
        }
        let rank = |a: &(f64, &str), b: &(f64, &str)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
        };
        if n < scored.len() {
            scored.select_nth_unstable_by(n - 1, rank);
            scored.truncate(n);
        }
        scored.sort_unstable_by(rank);
        Ok(scored.into_iter().rev().map(|(_, id)| id.to_string()).collect())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(INDEX_MAGIC)?;
        out.write_all(&(self.provider_tag.len() as u32).to_le_bytes())?;
        out.write_all(self.provider_tag.as_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        out.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id.as_bytes())?;
            for x in v.values() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::IndexFormat(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != INDEX_MAGIC {
            return Err(Error::IndexFormat("bad magic".into()));
        }
        let tag_len = cur.u32()? as usize;
        let provider_tag = cur.string(tag_len)?;
        let dim = cur.u32()? as usize;
        let count = cur.u64()? as usize;
        let per_vector = dim * 8;
        if count > bytes.len() / (4 + per_vector).max(1) {
            return Err(Error::IndexFormat(format!(
                "header claims {count} vectors, file too short"
            )));
        }
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let id_len = cur.u32()? as usize;
            ids.push(cur.string(id_len)?);
            let raw = cur.take(per_vector)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            vectors.push(EmbeddingVector::from_unit(values)?);
        }
        if cur.pos != bytes.len() {
            return Err(Error::IndexFormat(format!(
                "{} trailing bytes after {count} vectors",
                bytes.len() - cur.pos
            )));
        }
        Self::from_parts(provider_tag, dim, ids, vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::IndexFormat("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::IndexFormat("string is not UTF-8".into()))
    }
}

/// Embeds the label-free render of every example, in dataset order.
pub fn build_index(dataset: &Dataset, provider: &dyn EmbeddingProvider) -> Result<EmbeddingIndex> {
    if dataset.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let template = dataset.template();
    let vectors = dataset
        .examples()
        .par_iter()
        .map(|ex| provider.embed(&template.render_label_free(ex)))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::from_parts(
        provider.tag(),
        provider.dim(),
        dataset.examples().iter().map(|e| e.id.clone()).collect(),
        vectors,
    )
}

pub fn retrieve_topk(
    index: &EmbeddingIndex,
    provider: &dyn EmbeddingProvider,
    query_text: &str,
    n: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<String>> {
    if index.provider_tag != provider.tag() {
        return Err(Error::ProviderMismatch {
            index: index.provider_tag.clone(),
            provider: provider.tag(),
        });
    }
    let query = provider.embed(query_text)?;
    index.top_k(&query, n, exclude)
}

/// Anything that maps a query to demonstration ids. Results are in
/// ascending relevance: the most relevant id comes last.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query_text: &str, n: usize, exclude: &HashSet<String>) -> Result<Vec<String>>;

    /// Number of ids the retriever can return at most.
    fn capacity(&self) -> usize;
}

/// Cosine top-k over an [`EmbeddingIndex`].
#[derive(Clone)]
pub struct TopKRetriever {
    index: Arc<EmbeddingIndex>,
    provider: Arc<dyn EmbeddingProvider>,
}

impl TopKRetriever {
    pub fn new(index: Arc<EmbeddingIndex>, provider: Arc<dyn EmbeddingProvider>) -> Result<Self> {
        if index.provider_tag() != provider.tag() {
            return Err(Error::ProviderMismatch {
                index: index.provider_tag().to_string(),
                provider: provider.tag(),
            });
        }
        Ok(Self { index, provider })
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }
}

impl Retriever for TopKRetriever {
    fn retrieve(&self, query_text: &str, n: usize, exclude: &HashSet<String>) -> Result<Vec<String>> {
        retrieve_topk(&self.index, self.provider.as_ref(), query_text, n, exclude)
    }

    fn capacity(&self) -> usize {
        self.index.len()
    }
}

/// Placement of demonstrations in the prompt relative to their relevance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoOrder {
    /// Most relevant demonstration last, adjacent to the query.
    #[default]
    Ascending,
    /// Most relevant first, i.e. retrieval-score order.
    #[serde(alias = "score")]
    Descending,
}

impl DemoOrder {
    /// Reorders ids given in ascending relevance.
    pub fn arrange(self, mut ascending: Vec<String>) -> Vec<String> {
        if self == DemoOrder::Descending {
            ascending.reverse();
        }
        ascending
    }
}

/// Lookup from example id to its position in a slice of ids.
pub fn position_map(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}
