//! Rewrite difference-set records into instruction-response pairs with a
//! three-step prompted procedure against a chat-completion endpoint:
//! query generation, query scoring + filtering, answer generation.
//!
//! Every model response is cached on disk keyed by (step name, rendered
//! prompt, model name), so reruns are free, deterministic, and
//! networkless.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus_io::{InstructionPair, Source, TextRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    QueryGeneration,
    QueryScoring,
    AnswerGeneration,
}

impl PromptKind {
    pub fn slot_count(self) -> usize {
        match self {
            PromptKind::QueryGeneration | PromptKind::QueryScoring => 1,
            PromptKind::AnswerGeneration => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::QueryGeneration => "query_generation",
            PromptKind::QueryScoring => "query_scoring",
            PromptKind::AnswerGeneration => "answer_generation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub name: PromptKind,
    pub template: String,
}

pub const QUERY_GENERATION_TEMPLATE: &str =
    include_str!("../resources/prompts/query_generation.txt");
pub const QUERY_SCORING_TEMPLATE: &str = include_str!("../resources/prompts/query_scoring.txt");
pub const ANSWER_GENERATION_TEMPLATE: &str =
    include_str!("../resources/prompts/answer_generation.txt");

impl PromptTemplate {
    /// The template shipped with the crate for the given step.
    pub fn shipped(kind: PromptKind) -> PromptTemplate {
        let template = match kind {
            PromptKind::QueryGeneration => QUERY_GENERATION_TEMPLATE,
            PromptKind::QueryScoring => QUERY_SCORING_TEMPLATE,
            PromptKind::AnswerGeneration => ANSWER_GENERATION_TEMPLATE,
        };
        PromptTemplate {
            name: kind,
            template: template.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.template.matches("{}").count();
        if slots != self.name.slot_count() {
            return Err(Error::Config(format!(
                "{} template has {slots} slots, expected {}",
                self.name.name(),
                self.name.slot_count()
            )));
        }
        Ok(())
    }
}

/// Fill the "{}" slots in order; no other bytes change.
pub fn render_prompt(template: &PromptTemplate, slots: &[&str]) -> Result<String> {
    template.validate()?;
    if slots.len() != template.name.slot_count() {
        return Err(Error::Config(format!(
            "{} expects {} slots, got {}",
            template.name.name(),
            template.name.slot_count(),
            slots.len()
        )));
    }
    let parts: Vec<&str> = template.template.split("{}").collect();
    let mut out = String::with_capacity(template.template.len());
    for (i, part) in parts.iter().enumerate() {
        out.push_str(part);
        if i < slots.len() {
            out.push_str(slots[i]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCandidate {
    pub origin_id: String,
    pub question: String,
    pub quality: Option<u8>,
    pub difficulty: Option<u8>,
    pub additional_info_needed: Option<bool>,
    #[serde(default)]
    pub failed: bool,
}

impl QueryCandidate {
    fn new(origin_id: &str, question: String) -> Self {
        QueryCandidate {
            origin_id: origin_id.to_string(),
            question,
            quality: None,
            difficulty: None,
            additional_info_needed: None,
            failed: false,
        }
    }

    pub fn is_scored(&self) -> bool {
        !self.failed && self.quality.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_quality: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_difficulty: Option<u8>,
    pub reject_if_additional_info: bool,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_quality: 6,
            max_difficulty: None,
            reject_if_additional_info: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Failed,
    LowQuality,
    TooDifficult,
    NeedsAdditionalInfo,
}

impl RejectReason {
    fn key(self) -> &'static str {
        match self {
            RejectReason::Failed => "failed",
            RejectReason::LowQuality => "low_quality",
            RejectReason::TooDifficult => "too_difficult",
            RejectReason::NeedsAdditionalInfo => "needs_additional_info",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenClientConfig {
    pub endpoint_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_parallel")]
    pub parallel_requests: usize,
    #[serde(default = "default_api_key_env_var")]
    pub api_key_env_var: String,
}

fn default_max_tokens() -> u32 {
    2048
}
fn default_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_parallel() -> usize {
    4
}
fn default_api_key_env_var() -> String {
    "GAPALIGN_API_KEY".into()
}

/// A chat-completion backend. `step` names the pipeline step making the
/// request (it participates in the response-cache key).
pub trait ChatClient: Send + Sync {
    fn complete(&self, step: &str, prompt: &str) -> Result<String>;
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f32,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

/// OpenAI-compatible chat completions over HTTP with retries.
pub struct HttpChatClient {
    cfg: GenClientConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(cfg: GenClientConfig) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::GenClient(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env_var).ok();
        Ok(HttpChatClient {
            cfg,
            client,
            api_key,
        })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, _step: &str, prompt: &str) -> Result<String> {
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 * (1 << attempt.min(6)) as u64));
            }
            let mut req = self.client.post(&self.cfg.endpoint_url).json(&ChatRequest {
                model: &self.cfg.model_name,
                messages: vec![ChatMessage {
                    role: "user",
                    content: prompt,
                }],
                temperature: self.cfg.temperature,
                max_tokens: self.cfg.max_tokens,
            });
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json::<ChatResponse>())
            {
                Ok(resp) => {
                    return resp
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| Error::GenClient("response has no choices".into()))
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::GenClient(format!(
            "request failed after {} retries: {last_err}",
            self.cfg.max_retries
        )))
    }
}

/// Append-only disk cache around another client. Key: SHA-256 of
/// (step, model name, prompt). Writes go to a temp file first and are
/// renamed into place, so concurrent writers of one key stay consistent.
pub struct CachedChatClient<C> {
    inner: C,
    dir: PathBuf,
    model_name: String,
    misses: AtomicUsize,
    hits: AtomicUsize,
}

impl<C: ChatClient> CachedChatClient<C> {
    pub fn new(inner: C, dir: impl Into<PathBuf>, model_name: impl Into<String>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CachedChatClient {
            inner,
            dir,
            model_name: model_name.into(),
            misses: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        })
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    fn key_path(&self, step: &str, prompt: &str) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(step.as_bytes());
        hasher.update([0]);
        hasher.update(self.model_name.as_bytes());
        hasher.update([0]);
        hasher.update(prompt.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        self.dir.join(format!("{hex}.txt"))
    }
}

impl<C: ChatClient> ChatClient for CachedChatClient<C> {
    fn complete(&self, step: &str, prompt: &str) -> Result<String> {
        let path = self.key_path(step, prompt);
        if let Ok(cached) = std::fs::read_to_string(&path) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(cached);
        }
        let response = self.inner.complete(step, prompt)?;
        self.misses.fetch_add(1, Ordering::SeqCst);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, &response).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(response)
    }
}

/// Extract the first balanced `{...}` block (string- and escape-aware)
/// and parse it strictly. Tolerates prose and Markdown code fences around
/// the JSON.
pub fn parse_model_json(raw: &str) -> Result<serde_json::Value> {
    let bytes = raw.as_bytes();
    let start = raw
        .find('{')
        .ok_or_else(|| Error::ModelOutput("no JSON object in model output".into()))?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    let block = &raw[start..=i];
                    return serde_json::from_str(block)
                        .map_err(|e| Error::ModelOutput(format!("invalid JSON block: {e}")));
                }
            }
            _ => {}
        }
    }
    Err(Error::ModelOutput("unbalanced JSON object in model output".into()))
}

fn complete_and_parse(
    client: &dyn ChatClient,
    step: PromptKind,
    prompt: &str,
    parse_retries: u32,
    retry_counter: &AtomicUsize,
) -> Result<serde_json::Value> {
    let mut last = None;
    for attempt in 0..=parse_retries {
        if attempt > 0 {
            retry_counter.fetch_add(1, Ordering::SeqCst);
        }
        let raw = client.complete(step.name(), prompt)?;
        match parse_model_json(&raw) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::ModelOutput("no attempts made".into())))
}

/// Counters reported by [`rewrite_corpus`].
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RewriteReport {
    pub records: usize,
    pub queries_generated: usize,
    pub kept: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub answers: usize,
    pub failures: usize,
    pub parse_retries: usize,
    pub clamped_scores: usize,
    pub unexpected_query_counts: usize,
}

impl RewriteReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected_by_reason.values().sum()
    }
}

struct Counters {
    retries: AtomicUsize,
    clamped: AtomicUsize,
    unexpected: AtomicUsize,
}

/// Step 1: render the query-generation prompt for the record and parse
/// the `{"questions": [...]}` reply. Two questions are expected; any
/// other count is accepted with a warning counter.
pub fn generate_queries(
    record: &TextRecord,
    client: &dyn ChatClient,
    parse_retries: u32,
) -> Result<Vec<QueryCandidate>> {
    record.validate()?;
    let counters = AtomicUsize::new(0);
    let out = generate_queries_inner(record, client, parse_retries, &counters, &AtomicUsize::new(0))?;
    Ok(out)
}

fn generate_queries_inner(
    record: &TextRecord,
    client: &dyn ChatClient,
    parse_retries: u32,
    retry_counter: &AtomicUsize,
    unexpected_counter: &AtomicUsize,
) -> Result<Vec<QueryCandidate>> {
    let template = PromptTemplate::shipped(PromptKind::QueryGeneration);
    let prompt = render_prompt(&template, &[&record.text])?;
    let value = complete_and_parse(
        client,
        PromptKind::QueryGeneration,
        &prompt,
        parse_retries,
        retry_counter,
    )?;
    let questions = value
        .get("questions")
        .and_then(|q| q.as_array())
        .ok_or_else(|| Error::ModelOutput("missing \"questions\" array".into()))?;
    let mut candidates = Vec::new();
    for q in questions {
        if let Some(text) = q.get("question").and_then(|s| s.as_str()) {
            if !text.trim().is_empty() {
                candidates.push(QueryCandidate::new(&record.id, text.to_string()));
            }
        }
    }
    if candidates.len() != 2 {
        unexpected_counter.fetch_add(1, Ordering::SeqCst);
        log::warn!(
            "record {}: expected 2 questions, got {}",
            record.id,
            candidates.len()
        );
    }
    Ok(candidates)
}

fn clamp_score(v: i64, clamped: &AtomicUsize) -> u8 {
    if !(1..=10).contains(&v) {
        clamped.fetch_add(1, Ordering::SeqCst);
        log::warn!("score {v} out of range, clamping into [1, 10]");
    }
    v.clamp(1, 10) as u8
}

/// Step 2: score a candidate on quality, difficulty, and whether extra
/// information is needed. Out-of-range integers are clamped into [1, 10].
/// An unparseable reply marks the candidate failed rather than aborting.
pub fn score_query(
    q: &QueryCandidate,
    client: &dyn ChatClient,
    parse_retries: u32,
) -> QueryCandidate {
    score_query_inner(
        q,
        client,
        parse_retries,
        &AtomicUsize::new(0),
        &AtomicUsize::new(0),
    )
}

fn score_query_inner(
    q: &QueryCandidate,
    client: &dyn ChatClient,
    parse_retries: u32,
    retry_counter: &AtomicUsize,
    clamped: &AtomicUsize,
) -> QueryCandidate {
    let mut out = q.clone();
    let template = PromptTemplate::shipped(PromptKind::QueryScoring);
    let prompt = match render_prompt(&template, &[&q.question]) {
        Ok(p) => p,
        Err(_) => {
            out.failed = true;
            return out;
        }
    };
    let value = match complete_and_parse(
        client,
        PromptKind::QueryScoring,
        &prompt,
        parse_retries,
        retry_counter,
    ) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("scoring failed for {}: {e}", q.origin_id);
            out.failed = true;
            return out;
        }
    };
    let quality = value.get("quality").and_then(|v| v.as_i64());
    let difficulty = value.get("difficulty").and_then(|v| v.as_i64());
    let additional = value.get("additional_info_needed").and_then(|v| v.as_bool());
    match (quality, difficulty, additional) {
        (Some(ql), Some(df), Some(ai)) => {
            out.quality = Some(clamp_score(ql, clamped));
            out.difficulty = Some(clamp_score(df, clamped));
            out.additional_info_needed = Some(ai);
        }
        _ => {
            log::warn!("scoring reply missing keys for {}", q.origin_id);
            out.failed = true;
        }
    }
    out
}

/// Partition scored candidates into kept and rejected. The partition is
/// exhaustive and disjoint.
pub fn filter_queries(
    candidates: Vec<QueryCandidate>,
    policy: &FilterPolicy,
) -> (Vec<QueryCandidate>, Vec<(QueryCandidate, RejectReason)>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for c in candidates {
        let reason = if !c.is_scored() {
            Some(RejectReason::Failed)
        } else if c.quality.unwrap() < policy.min_quality {
            Some(RejectReason::LowQuality)
        } else if policy
            .max_difficulty
            .is_some_and(|max| c.difficulty.unwrap_or(1) > max)
        {
            Some(RejectReason::TooDifficult)
        } else if policy.reject_if_additional_info && c.additional_info_needed == Some(true) {
            Some(RejectReason::NeedsAdditionalInfo)
        } else {
            None
        };
        match reason {
            Some(r) => rejected.push((c, r)),
            None => kept.push(c),
        }
    }
    (kept, rejected)
}

/// Step 3: answer a kept question using the source text as background.
/// Returns None (counted by the caller) when the reply is unusable.
pub fn generate_answer(
    record: &TextRecord,
    q: &QueryCandidate,
    client: &dyn ChatClient,
    parse_retries: u32,
    pair_id: String,
) -> Result<Option<InstructionPair>> {
    let template = PromptTemplate::shipped(PromptKind::AnswerGeneration);
    let prompt = render_prompt(&template, &[&record.text, &q.question])?;
    let value = match complete_and_parse(
        client,
        PromptKind::AnswerGeneration,
        &prompt,
        parse_retries,
        &AtomicUsize::new(0),
    ) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("answer generation failed for {}: {e}", record.id);
            return Ok(None);
        }
    };
    let answer = value
        .get("answer")
        .and_then(|a| a.as_str())
        .unwrap_or_default();
    if answer.trim().is_empty() {
        log::warn!("empty answer for {}", record.id);
        return Ok(None);
    }
    Ok(Some(InstructionPair {
        id: pair_id,
        instruction: q.question.clone(),
        response: answer.to_string(),
        source: Source::Rewritten,
        origin_id: Some(record.id.clone()),
    }))
}

/// Run generate -> score -> filter -> answer over every record, with
/// bounded parallelism across records. Output is ordered by
/// (origin_id, question index) independent of completion order.
pub fn rewrite_corpus(
    diff: &[TextRecord],
    client: &dyn ChatClient,
    policy: &FilterPolicy,
    parse_retries: u32,
) -> Result<(Vec<InstructionPair>, RewriteReport)> {
    use rayon::prelude::*;

    if diff.is_empty() {
        return Err(Error::Precondition("difference set is empty".into()));
    }
    let counters = Counters {
        retries: AtomicUsize::new(0),
        clamped: AtomicUsize::new(0),
        unexpected: AtomicUsize::new(0),
    };

    struct RecordOutcome {
        pairs: Vec<InstructionPair>,
        generated: usize,
        kept: usize,
        rejected: Vec<RejectReason>,
        answer_drops: usize,
        failed: bool,
    }

    let outcomes: Vec<RecordOutcome> = diff
        .par_iter()
        .map(|record| {
            let candidates = match generate_queries_inner(
                record,
                client,
                parse_retries,
                &counters.retries,
                &counters.unexpected,
            ) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("query generation failed for {}: {e}", record.id);
                    return RecordOutcome {
                        pairs: Vec::new(),
                        generated: 0,
                        kept: 0,
                        rejected: Vec::new(),
                        answer_drops: 0,
                        failed: true,
                    };
                }
            };
            let generated = candidates.len();
            let scored: Vec<QueryCandidate> = candidates
                .iter()
                .map(|c| score_query_inner(c, client, parse_retries, &counters.retries, &counters.clamped))
                .collect();
            let (kept, rejected) = filter_queries(scored, policy);
            let mut pairs = Vec::new();
            let mut answer_drops = 0;
            for (qi, q) in kept.iter().enumerate() {
                let pair_id = format!("{}#q{qi}", record.id);
                match generate_answer(record, q, client, parse_retries, pair_id) {
                    Ok(Some(pair)) => pairs.push(pair),
                    Ok(None) => answer_drops += 1,
                    Err(e) => {
                        log::warn!("answer stage error for {}: {e}", record.id);
                        answer_drops += 1;
                    }
                }
            }
            RecordOutcome {
                pairs,
                generated,
                kept: kept.len(),
                rejected: rejected.into_iter().map(|(_, r)| r).collect(),
                answer_drops,
                failed: false,
            }
        })
        .collect();

    if outcomes.iter().all(|o| o.failed) {
        return Err(Error::GenClient(
            "every record failed query generation; endpoint unreachable?".into(),
        ));
    }

    let mut report = RewriteReport {
        records: diff.len(),
        parse_retries: counters.retries.load(Ordering::SeqCst),
        clamped_scores: counters.clamped.load(Ordering::SeqCst),
        unexpected_query_counts: counters.unexpected.load(Ordering::SeqCst),
        ..RewriteReport::default()
    };
    let mut pairs = Vec::new();
    for o in outcomes {
        report.queries_generated += o.generated;
        report.kept += o.kept;
        report.answers += o.pairs.len();
        report.failures += o.answer_drops + usize::from(o.failed);
        for r in o.rejected {
            *report.rejected_by_reason.entry(r.key().to_string()).or_insert(0) += 1;
        }
        pairs.extend(o.pairs);
    }
    pairs.sort_by(|a, b| (&a.origin_id, &a.id).cmp(&(&b.origin_id, &b.id)));
    Ok((pairs, report))
}

pub fn save_report(report: &RewriteReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}
