//! Text embeddings behind a pluggable provider, with a binary on-disk
//! cache so the expensive stage runs once.
//!
//! The remote provider speaks the OpenAI-compatible embeddings protocol:
//! POST `{model, input: [strings]}`, read `{data: [{index, embedding}]}`.
//! Rows are re-sorted by the returned index, so output order always
//! matches input order.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes of the embedding cache file format.
pub const CACHE_MAGIC: &[u8; 8] = b"AITPEMB1";

/// Dense row-major matrix of embedding vectors, aligned with a record id
/// list.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub ids: Vec<String>,
    pub dim: usize,
    pub data: Vec<f32>,
    pub model_tag: String,
}

impl EmbeddingMatrix {
    pub fn n_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() * self.dim != self.data.len() {
            return Err(Error::InvalidRecord(format!(
                "embedding matrix shape mismatch: {} ids x dim {} != {} values",
                self.ids.len(),
                self.dim,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord("embedding matrix contains NaN/Inf".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &self.ids {
            if !seen.insert(id) {
                return Err(Error::InvalidRecord(format!("duplicate id {id}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    RemoteHttp,
    MockDeterministic,
    FileOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_api_key_env_var")]
    pub api_key_env_var: String,
    #[serde(default = "default_parallel_requests")]
    pub parallel_requests: usize,
    /// Dimension used by the deterministic mock provider.
    #[serde(default = "default_mock_dim")]
    pub mock_dim: usize,
    /// Character cap approximating the encoder's token limit; longer
    /// texts are truncated with a counter, not rejected.
    #[serde(default = "default_max_chars")]
    pub max_chars: usize,
}

fn default_batch_size() -> usize {
    32
}
fn default_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_api_key_env_var() -> String {
    "GAPALIGN_API_KEY".into()
}
fn default_parallel_requests() -> usize {
    4
}
fn default_mock_dim() -> usize {
    32
}
fn default_max_chars() -> usize {
    8192 * 4
}

impl EmbeddingProviderConfig {
    pub fn mock(dim: usize) -> Self {
        EmbeddingProviderConfig {
            kind: ProviderKind::MockDeterministic,
            endpoint_url: None,
            model_name: "mock".into(),
            batch_size: default_batch_size(),
            max_retries: default_retries(),
            timeout_secs: default_timeout_secs(),
            api_key_env_var: default_api_key_env_var(),
            parallel_requests: default_parallel_requests(),
            mock_dim: dim,
            max_chars: default_max_chars(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ProviderKind::RemoteHttp && self.endpoint_url.is_none() {
            return Err(Error::Config("remote_http provider requires endpoint_url".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic test-double embedding: seed a portable RNG with a 64-bit
/// hash of the text bytes, draw `dim` standard normals, L2-normalize.
pub fn mock_embedding(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim >= 2, "mock embedding dim must be >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text.as_bytes()));
    let mut v: Vec<f32> = (0..dim)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x as f32
        })
        .collect();
    let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x = (*x as f64 / norm) as f32;
        }
    }
    v
}

fn truncate_chars(text: &str, max_chars: usize) -> (&str, bool) {
    match text.char_indices().nth(max_chars) {
        Some((byte_idx, _)) => (&text[..byte_idx], true),
        None => (text, false),
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

fn embed_batch_remote(
    client: &reqwest::blocking::Client,
    cfg: &EmbeddingProviderConfig,
    texts: &[&str],
    batch_index: usize,
) -> Result<Vec<Vec<f32>>> {
    let url = cfg.endpoint_url.as_deref().expect("validated");
    let api_key = std::env::var(&cfg.api_key_env_var).ok();
    let mut last_err = String::new();
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(100 * (1 << attempt.min(6)) as u64));
        }
        let mut req = client
            .post(url)
            .json(&EmbeddingRequest {
                model: &cfg.model_name,
                input: texts,
            });
        if let Some(key) = &api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send().and_then(|r| r.error_for_status()) {
            Ok(r) => r,
            Err(e) => {
                last_err = e.to_string();
                continue;
            }
        };
        let parsed: EmbeddingResponse = match resp.json() {
            Ok(p) => p,
            Err(e) => {
                last_err = e.to_string();
                continue;
            }
        };
        if parsed.data.len() != texts.len() {
            last_err = format!("expected {} rows, got {}", texts.len(), parsed.data.len());
            continue;
        }
        let mut rows: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for datum in parsed.data {
            if datum.index >= texts.len() {
                return Err(Error::Provider(format!(
                    "batch {batch_index}: response index {} out of range",
                    datum.index
                )));
            }
            rows[datum.index] = Some(datum.embedding);
        }
        return rows
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Provider(format!("batch {batch_index}: missing response rows")));
    }
    Err(Error::Provider(format!(
        "batch {batch_index}: failed after {} retries: {last_err}",
        cfg.max_retries
    )))
}

/// Embed texts through the configured provider. One output row per input
/// text, in input order, regardless of request completion order.
pub fn embed_records(
    ids: &[String],
    texts: &[String],
    cfg: &EmbeddingProviderConfig,
) -> Result<EmbeddingMatrix> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::Precondition("no texts to embed".into()));
    }
    if ids.len() != texts.len() {
        return Err(Error::Precondition("ids and texts must have equal length".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::Precondition(format!("text {i} is empty")));
    }

    let mut truncated = 0usize;
    let capped: Vec<&str> = texts
        .iter()
        .map(|t| {
            let (s, was_cut) = truncate_chars(t, cfg.max_chars);
            if was_cut {
                truncated += 1;
            }
            s
        })
        .collect();
    if truncated > 0 {
        log::warn!("truncated {truncated} texts to {} chars", cfg.max_chars);
    }

    let rows: Vec<Vec<f32>> = match cfg.kind {
        ProviderKind::MockDeterministic => capped
            .iter()
            .map(|t| mock_embedding(t, cfg.mock_dim))
            .collect(),
        ProviderKind::FileOnly => {
            return Err(Error::Provider(
                "file_only provider has no cache to load; run with a cache path".into(),
            ))
        }
        ProviderKind::RemoteHttp => {
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(cfg.timeout_secs))
                .build()
                .map_err(|e| Error::Provider(e.to_string()))?;
            let batches: Vec<&[&str]> = capped.chunks(cfg.batch_size).collect();
            let results: Mutex<Vec<Option<Result<Vec<Vec<f32>>>>>> =
                Mutex::new((0..batches.len()).map(|_| None).collect());
            let next = AtomicUsize::new(0);
            let workers = cfg.parallel_requests.max(1).min(batches.len());
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let b = next.fetch_add(1, Ordering::SeqCst);
                        if b >= batches.len() {
                            break;
                        }
                        let out = embed_batch_remote(&client, cfg, batches[b], b);
                        results.lock().unwrap()[b] = Some(out);
                    });
                }
            });
            let mut rows = Vec::with_capacity(texts.len());
            for slot in results.into_inner().unwrap() {
                rows.extend(slot.expect("all batches dispatched")?);
            }
            rows
        }
    };

    let dim = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Provider(format!("row {i} contains NaN/Inf")));
        }
    }

    let matrix = EmbeddingMatrix {
        ids: ids.to_vec(),
        dim,
        data: rows.into_iter().flatten().collect(),
        model_tag: cfg.model_name.clone(),
    };
    matrix.validate()?;
    Ok(matrix)
}

/// Embed with a binary cache file: a hit (same ids, same model tag)
/// bypasses the provider entirely.
pub fn embed_with_cache(
    ids: &[String],
    texts: &[String],
    cfg: &EmbeddingProviderConfig,
    cache_path: &Path,
) -> Result<EmbeddingMatrix> {
    if cache_path.exists() {
        let cached = load_embeddings(cache_path)?;
        if cached.ids == ids && (cfg.kind == ProviderKind::FileOnly || cached.model_tag == cfg.model_name) {
            return Ok(cached);
        }
        log::info!("embedding cache {} is stale, recomputing", cache_path.display());
    }
    if cfg.kind == ProviderKind::FileOnly {
        return Err(Error::Provider(format!(
            "file_only provider and no usable cache at {}",
            cache_path.display()
        )));
    }
    let matrix = embed_records(ids, texts, cfg)?;
    save_embeddings(&matrix, cache_path)?;
    Ok(matrix)
}

/// Persist a matrix in the binary cache format: magic "AITPEMB1",
/// u32-LE count, u32-LE dim, u16-LE model_tag length + tag bytes, per-id
/// u16-LE length + bytes, then count*dim f32-LE values row-major.
pub fn save_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    m.validate()?;
    let inner = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&(m.ids.len() as u32).to_le_bytes())?;
        f.write_all(&(m.dim as u32).to_le_bytes())?;
        f.write_all(&(m.model_tag.len() as u16).to_le_bytes())?;
        f.write_all(m.model_tag.as_bytes())?;
        for id in &m.ids {
            f.write_all(&(id.len() as u16).to_le_bytes())?;
            f.write_all(id.as_bytes())?;
        }
        for v in &m.data {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()
    };
    inner().map_err(|e| {
        let _ = std::fs::remove_file(path);
        Error::io(path, e)
    })
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let fail = |msg: &str| Error::CacheFormat(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| fail("truncated magic"))?;
    if &magic != CACHE_MAGIC {
        return Err(fail("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf).map_err(|_| fail("truncated count"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    f.read_exact(&mut u32buf).map_err(|_| fail("truncated dim"))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut u16buf = [0u8; 2];
    f.read_exact(&mut u16buf).map_err(|_| fail("truncated tag length"))?;
    let tag_len = u16::from_le_bytes(u16buf) as usize;
    let mut tag = vec![0u8; tag_len];
    f.read_exact(&mut tag).map_err(|_| fail("truncated tag"))?;
    let model_tag = String::from_utf8(tag).map_err(|_| fail("tag not UTF-8"))?;

    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        f.read_exact(&mut u16buf).map_err(|_| fail("truncated id length"))?;
        let len = u16::from_le_bytes(u16buf) as usize;
        let mut id = vec![0u8; len];
        f.read_exact(&mut id).map_err(|_| fail("truncated id"))?;
        ids.push(String::from_utf8(id).map_err(|_| fail("id not UTF-8"))?);
    }
    let mut data = Vec::with_capacity(count * dim);
    let mut f32buf = [0u8; 4];
    for _ in 0..count * dim {
        f.read_exact(&mut f32buf).map_err(|_| fail("truncated payload"))?;
        data.push(f32::from_le_bytes(f32buf));
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(fail("trailing bytes after payload"));
    }
    Ok(EmbeddingMatrix {
        ids,
        dim,
        data,
        model_tag,
    })
}
