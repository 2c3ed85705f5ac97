//! Text encoders, the persistent vector cache and the entity index.
//!
//! Vectors are `f64` in memory. Anything that passes through the cache is
//! rounded to `f32` first, so a warm and a cold cache give identical results.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::kg::{EntityId, KnowledgeGraph};
use crate::text::placeholder_regex;

pub type Vector = Vec<f64>;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot encode empty text")]
    EmptyInput,
    #[error("encoder transport failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed encoder response: {0}")]
    Response(String),
    #[error("encoder returned dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("vector cache io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub trait Encoder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError>;

    fn encode(&self, text: &str) -> Result<Vector, EmbeddingError> {
        let mut v = self.encode_batch(&[text.to_string()])?;
        Ok(v.pop().expect("one vector per input"))
    }
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different dimensions");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn verbalize_triple(head: &str, relation: &str, tail: &str) -> String {
    format!("{head} | {relation} | {tail}")
}

fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // Final avalanche so nearby inputs spread across all bits.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Deterministic offline encoder: signed feature hashing of word tokens and
/// their character trigrams, normalized to the unit sphere.
///
/// Text is NFC-normalized and lowercased; `[ENTk]` placeholders contribute no
/// features, so a placeholder-only text maps to the zero vector.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    name: String,
    dim: usize,
    seed: u64,
}

impl HashEncoder {
    pub const TRIGRAM_WEIGHT: f64 = 0.35;

    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self {
            name: format!("hash-ngram-{dim}-{seed}"),
            dim,
            seed,
        }
    }

    fn features(text: &str) -> Vec<(String, f64)> {
        let stripped = placeholder_regex().replace_all(text, " ");
        let norm: String = stripped.nfc().collect::<String>().to_lowercase();
        let mut words: Vec<&str> = norm
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        words.sort_unstable();
        words.dedup();
        let mut feats: Vec<(String, f64)> = Vec::new();
        let mut grams: Vec<String> = Vec::new();
        for w in &words {
            feats.push((format!("w:{w}"), 1.0));
            let padded: Vec<char> = format!("<{w}>").chars().collect();
            for win in padded.windows(3) {
                grams.push(win.iter().collect());
            }
        }
        grams.sort_unstable();
        grams.dedup();
        feats.extend(
            grams
                .into_iter()
                .map(|g| (format!("c:{g}"), Self::TRIGRAM_WEIGHT)),
        );
        feats
    }

    fn encode_one(&self, text: &str) -> Vector {
        let mut v = vec![0.0; self.dim];
        for (feat, weight) in Self::features(text) {
            let h = fnv1a64(self.seed, feat.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign * weight;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Encoder for HashEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError> {
        texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    Err(EmbeddingError::EmptyInput)
                } else {
                    Ok(self.encode_one(t))
                }
            })
            .collect()
    }
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    model: &'a str,
    inputs: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP encoder: POST `{model, inputs}` and read back `{vectors}`.
pub struct RemoteEncoder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    max_attempts: usize,
    client: reqwest::blocking::Client,
}

impl RemoteEncoder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dim: usize,
        timeout: Duration,
    ) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbeddingError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dim,
            max_attempts: 3,
            client,
        })
    }

    fn post(&self, texts: &[String]) -> Result<EncodeResponse, String> {
        let mut req = self.client.post(&self.endpoint).json(&EncodeRequest {
            model: &self.model,
            inputs: texts,
        });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("http status {status}"));
        }
        resp.json::<EncodeResponse>().map_err(|e| e.to_string())
    }
}

impl Encoder for RemoteEncoder {
    fn name(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyInput);
        }
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.post(texts) {
                Ok(resp) => {
                    if resp.vectors.len() != texts.len() {
                        return Err(EmbeddingError::Response(format!(
                            "{} vectors for {} inputs",
                            resp.vectors.len(),
                            texts.len()
                        )));
                    }
                    if let Some(v) = resp.vectors.iter().find(|v| v.len() != self.dim) {
                        return Err(EmbeddingError::Dimension {
                            expected: self.dim,
                            got: v.len(),
                        });
                    }
                    return Ok(resp.vectors);
                }
                Err(e) => {
                    last = e;
                    if attempt < self.max_attempts {
                        std::thread::sleep(Duration::from_millis(200 * attempt as u64));
                    }
                }
            }
        }
        Err(EmbeddingError::Transport {
            attempts: self.max_attempts,
            message: last,
        })
    }
}

const CACHE_MAGIC: &[u8; 4] = b"STVC";
const CACHE_VERSION: u32 = 1;

fn cache_key(encoder: &str, text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(encoder.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    h.finalize().into()
}

fn record_checksum(key: &[u8; 32], dim: u32, data: &[u8]) -> u32 {
    let mut h = 0x811c_9dc5u32;
    for &b in key.iter().chain(dim.to_le_bytes().iter()).chain(data) {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

fn round_f32(v: &[f64]) -> Vector {
    v.iter().map(|&x| x as f32 as f64).collect()
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CacheLoadReport {
    pub loaded: usize,
    pub dropped: usize,
}

/// Append-only binary cache. Each record is
/// `sha256(encoder, text) | dim: u32 | dim x f32 | checksum: u32`, little endian.
struct VectorCache {
    path: PathBuf,
    writer: Mutex<Option<BufWriter<File>>>,
}

/// Cached vectors keyed by the SHA-256 of their text.
type VectorMap = HashMap<[u8; 32], Vector>;

impl VectorCache {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EmbeddingError + '_ {
        move |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Reads every intact record of the expected dimension. Damaged records
    /// are dropped and the file is rewritten without them.
    fn open(
        path: &Path,
        dim: usize,
    ) -> Result<(Self, VectorMap, CacheLoadReport), EmbeddingError> {
        let mut map = HashMap::new();
        let mut report = CacheLoadReport::default();
        let mut rewrite = false;
        if path.exists() {
            let mut bytes = Vec::new();
            BufReader::new(File::open(path).map_err(Self::io(path))?)
                .read_to_end(&mut bytes)
                .map_err(Self::io(path))?;
            if bytes.len() < 8
                || &bytes[0..4] != CACHE_MAGIC
                || u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != CACHE_VERSION
            {
                rewrite = !bytes.is_empty();
                report.dropped += usize::from(!bytes.is_empty());
            } else {
                let mut pos = 8;
                while pos < bytes.len() {
                    if bytes.len() - pos < 36 {
                        report.dropped += 1;
                        rewrite = true;
                        break;
                    }
                    let key: [u8; 32] = bytes[pos..pos + 32].try_into().unwrap();
                    let rec_dim = u32::from_le_bytes(bytes[pos + 32..pos + 36].try_into().unwrap());
                    let data_len = rec_dim as usize * 4;
                    let end = pos + 36 + data_len + 4;
                    if end > bytes.len() {
                        report.dropped += 1;
                        rewrite = true;
                        break;
                    }
                    let data = &bytes[pos + 36..pos + 36 + data_len];
                    let stored = u32::from_le_bytes(bytes[end - 4..end].try_into().unwrap());
                    let values: Vector = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    if stored != record_checksum(&key, rec_dim, data)
                        || rec_dim as usize != dim
                        || values.iter().any(|x| !x.is_finite())
                    {
                        report.dropped += 1;
                        rewrite = true;
                    } else {
                        map.insert(key, values);
                        report.loaded += 1;
                    }
                    pos = end;
                }
            }
        }
        let cache = Self {
            path: path.to_path_buf(),
            writer: Mutex::new(None),
        };
        if rewrite || !path.exists() {
            cache.rewrite(&map)?;
        }
        Ok((cache, map, report))
    }

    fn encode_record(key: &[u8; 32], v: &[f64]) -> Vec<u8> {
        let dim = v.len() as u32;
        let data: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        let mut rec = Vec::with_capacity(40 + data.len());
        rec.extend_from_slice(key);
        rec.extend_from_slice(&dim.to_le_bytes());
        rec.extend_from_slice(&data);
        rec.extend_from_slice(&record_checksum(key, dim, &data).to_le_bytes());
        rec
    }

    fn rewrite(&self, map: &VectorMap) -> Result<(), EmbeddingError> {
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent).map_err(Self::io(&self.path))?;
        }
        let mut keys: Vec<&[u8; 32]> = map.keys().collect();
        keys.sort();
        let mut w = BufWriter::new(File::create(&self.path).map_err(Self::io(&self.path))?);
        w.write_all(CACHE_MAGIC).map_err(Self::io(&self.path))?;
        w.write_all(&CACHE_VERSION.to_le_bytes())
            .map_err(Self::io(&self.path))?;
        for k in keys {
            w.write_all(&Self::encode_record(k, &map[k]))
                .map_err(Self::io(&self.path))?;
        }
        w.flush().map_err(Self::io(&self.path))?;
        *self.writer.lock().unwrap() = None;
        Ok(())
    }

    fn append(&self, records: &[([u8; 32], Vector)]) -> Result<(), EmbeddingError> {
        let mut guard = self.writer.lock().unwrap();
        if guard.is_none() {
            let f = OpenOptions::new()
                .append(true)
                .open(&self.path)
                .map_err(Self::io(&self.path))?;
            *guard = Some(BufWriter::new(f));
        }
        let w = guard.as_mut().unwrap();
        for (k, v) in records {
            w.write_all(&Self::encode_record(k, v))
                .map_err(Self::io(&self.path))?;
        }
        w.flush().map_err(Self::io(&self.path))
    }
}

/// Memoizing wrapper; optionally persists vectors to an on-disk cache.
pub struct CachedEncoder<E: Encoder> {
    inner: E,
    memo: RwLock<VectorMap>,
    disk: Option<VectorCache>,
    new_encodings: AtomicUsize,
    load_report: CacheLoadReport,
}

impl<E: Encoder> CachedEncoder<E> {
    pub fn in_memory(inner: E) -> Self {
        Self {
            inner,
            memo: RwLock::new(HashMap::new()),
            disk: None,
            new_encodings: AtomicUsize::new(0),
            load_report: CacheLoadReport::default(),
        }
    }

    pub fn with_file(inner: E, path: &Path) -> Result<Self, EmbeddingError> {
        let (disk, map, load_report) = VectorCache::open(path, inner.dimension())?;
        Ok(Self {
            inner,
            memo: RwLock::new(map),
            disk: Some(disk),
            new_encodings: AtomicUsize::new(0),
            load_report,
        })
    }

    /// Number of texts sent to the inner encoder since construction.
    pub fn new_encodings(&self) -> usize {
        self.new_encodings.load(Ordering::SeqCst)
    }

    pub fn load_report(&self) -> CacheLoadReport {
        self.load_report
    }

    pub fn cached_len(&self) -> usize {
        self.memo.read().unwrap().len()
    }
}

impl<E: Encoder> Encoder for CachedEncoder<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn encode_batch(&self, texts: &[String]) -> Result<Vec<Vector>, EmbeddingError> {
        let name = self.inner.name().to_string();
        let keys: Vec<[u8; 32]> = texts.iter().map(|t| cache_key(&name, t)).collect();
        let mut out: Vec<Option<Vector>> = {
            let memo = self.memo.read().unwrap();
            keys.iter().map(|k| memo.get(k).cloned()).collect()
        };
        let mut missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        // One encoder call per distinct text.
        missing.sort_by(|&a, &b| texts[a].cmp(&texts[b]).then(a.cmp(&b)));
        missing.dedup_by(|a, b| texts[*a] == texts[*b]);
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.encode_batch(&batch)?;
            self.new_encodings.fetch_add(batch.len(), Ordering::SeqCst);
            let records: Vec<([u8; 32], Vector)> = missing
                .iter()
                .zip(fresh)
                .map(|(&i, v)| (keys[i], round_f32(&v)))
                .collect();
            {
                let mut memo = self.memo.write().unwrap();
                for (k, v) in &records {
                    memo.insert(*k, v.clone());
                }
            }
            if let Some(disk) = &self.disk {
                disk.append(&records)?;
            }
            let memo = self.memo.read().unwrap();
            for (i, k) in keys.iter().enumerate() {
                if out[i].is_none() {
                    out[i] = memo.get(k).cloned();
                }
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

/// Exact-scan nearest-entity index over entity label vectors.
pub struct EntityIndex {
    entries: Vec<(EntityId, Vector)>,
}

impl EntityIndex {
    pub fn build(g: &KnowledgeGraph, encoder: &dyn Encoder) -> Result<Self, EmbeddingError> {
        let labels: Vec<String> = g.entity_ids().map(|e| g.entity_label(e).to_string()).collect();
        let vectors = encoder.encode_batch(&labels)?;
        Ok(Self {
            entries: g.entity_ids().zip(vectors).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vector(&self, e: EntityId) -> &[f64] {
        &self.entries[e.index()].1
    }

    /// Highest-cosine entities, score descending then id ascending.
    pub fn top_n(&self, query: &[f64], n: usize) -> Vec<(EntityId, f64)> {
        let mut scored: Vec<(EntityId, f64)> = self
            .entries
            .iter()
            .map(|(e, v)| (*e, cosine(query, v)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(n);
        scored
    }
}
