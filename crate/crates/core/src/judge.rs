//! Text similarity for open-ended answers and captions: a deterministic
//! lexical scorer, and a client for a remote LLM judge with a persistent cache.
//!
//! Remote wire format (chat-completion shape):
//!
//! ```text
//! POST {endpoint}
//! Authorization: Bearer $API_KEY        (only when the env var is set)
//! {"model": "...", "messages": [{"role": "user", "content": "<prompt>"}], "temperature": 0}
//!
//! 200 {"choices": [{"message": {"content": "0.85"}}], ...}
//! ```
//!
//! The cache is an append-only JSONL file, one [`JudgeCacheEntry`] per line.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::sync::OnceLock;

use crate::domain::split_words;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("judge transport: {0}")]
    Transport(String),
    #[error("judge reply carries no number: {0:?}")]
    NoNumber(String),
    #[error("malformed judge reply: {0}")]
    BadReply(String),
    #[error("judge cache: {0}")]
    Cache(String),
    #[error("judge failed after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: Box<JudgeError> },
    #[error("remote judge requested but not configured")]
    NotConfigured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    QaPair,
    CaptionVsTarget,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::QaPair => "qa_pair",
            PromptKind::CaptionVsTarget => "caption_vs_target",
        }
    }
}

const SCORE_INSTRUCTION: &str =
    "Output only a single numeric value between 0 and 1 (no additional text or explanation).";

/// The judge prompt with its slots filled.
pub fn build_prompt(kind: PromptKind, a: &str, b: &str, query: &str) -> String {
    match kind {
        PromptKind::QaPair => format!(
            "Please compare the following two answers for the question below and rate their similarity on a scale of 0 to 1.\n\n\
             Question: {query}\n\nAnswer 1: {a}\n\nAnswer 2: {b}\n\n{SCORE_INSTRUCTION}"
        ),
        PromptKind::CaptionVsTarget => format!(
            "Compare the following video caption with the ground truth caption and rate their similarity on a scale of 0 to 1.\n\n\
             Generated caption: {a}\n\nGround truth caption: {b}\n\n{SCORE_INSTRUCTION}"
        ),
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)").expect("valid regex"))
}

/// First decimal literal in `reply`, clamped to `[0, 1]`.
pub fn parse_score(reply: &str) -> Result<f64, JudgeError> {
    let m = number_re()
        .find(reply)
        .ok_or_else(|| JudgeError::NoNumber(reply.to_string()))?;
    let v: f64 = m
        .as_str()
        .parse()
        .map_err(|_| JudgeError::NoNumber(reply.to_string()))?;
    let clamped = v.clamp(0.0, 1.0);
    if clamped != v {
        tracing::warn!(value = v, "judge score outside [0, 1], clamped");
    }
    Ok(clamped)
}

/// Dice coefficient over lowercased word multisets; two empty texts score 1.
pub fn lexical_similarity(a: &str, b: &str) -> f64 {
    let wa: Vec<String> = split_words(a).collect();
    let wb: Vec<String> = split_words(b).collect();
    if wa.is_empty() && wb.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &wa {
        *counts.entry(w).or_default() += 1;
    }
    let mut common = 0usize;
    for w in &wb {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    2.0 * common as f64 / (wa.len() + wb.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub retry_backoff_ms: u64,
    pub cache_path: Option<PathBuf>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_in_flight: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "meta-llama/Llama-3.1-70B-Instruct".into(),
            timeout_secs: 30.0,
            max_retries: 3,
            retry_backoff_ms: 500,
            cache_path: None,
            api_key_env: "ARROWRL_JUDGE_API_KEY".into(),
            max_in_flight: 4,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err("judge timeout must be positive".into());
        }
        if self.max_in_flight == 0 {
            return Err("judge max_in_flight must be positive".into());
        }
        Ok(())
    }
}

/// Sends one JSON request and returns the decoded JSON reply.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value, timeout: Duration) -> Result<Value, JudgeError>;
}

#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &Value, timeout: Duration) -> Result<Value, JudgeError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| JudgeError::Transport(e.to_string()))?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| JudgeError::BadReply(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeCacheEntry {
    pub key: String,
    pub score: f64,
    pub raw: String,
}

pub fn cache_key(kind: PromptKind, a: &str, b: &str, query: &str, model: &str) -> String {
    let material = serde_json::to_vec(&json!([kind.as_str(), a, b, query, model])).expect("serializable");
    hex::encode(Sha256::digest(material))
}

/// In-memory index over the append-only cache file.
#[derive(Debug, Default)]
pub struct JudgeCache {
    path: Option<PathBuf>,
    entries: HashMap<String, JudgeCacheEntry>,
}

impl JudgeCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Load every well-formed line of `path`; a missing file is an empty cache.
    pub fn open(path: PathBuf) -> Result<Self, JudgeError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| JudgeError::Cache(e.to_string()))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| JudgeError::Cache(e.to_string()))?;
                match serde_json::from_str::<JudgeCacheEntry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key.clone(), e);
                    }
                    Err(_) if line.trim().is_empty() => {}
                    Err(e) => tracing::warn!(error = %e, "skipping malformed judge cache line"),
                }
            }
        }
        Ok(Self { path: Some(path), entries })
    }

    pub fn get(&self, key: &str) -> Option<&JudgeCacheEntry> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, entry: JudgeCacheEntry) -> Result<(), JudgeError> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| JudgeError::Cache(e.to_string()))?;
            }
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| JudgeError::Cache(e.to_string()))?;
            let mut line = serde_json::to_string(&entry).map_err(|e| JudgeError::Cache(e.to_string()))?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| JudgeError::Cache(e.to_string()))?;
        }
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Cache-first client for a remote judge.
pub struct RemoteJudge {
    cfg: JudgeConfig,
    transport: Box<dyn Transport>,
    cache: Mutex<JudgeCache>,
    slots: Semaphore,
}

impl RemoteJudge {
    pub fn new(cfg: JudgeConfig, transport: Box<dyn Transport>) -> Result<Self, JudgeError> {
        cfg.validate().map_err(JudgeError::Cache)?;
        let cache = match &cfg.cache_path {
            Some(p) => JudgeCache::open(p.clone())?,
            None => JudgeCache::in_memory(),
        };
        let slots = Semaphore::new(cfg.max_in_flight);
        Ok(Self { cfg, transport, cache: Mutex::new(cache), slots })
    }

    pub fn http(cfg: JudgeConfig) -> Result<Self, JudgeError> {
        Self::new(cfg, Box::new(HttpTransport))
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.cfg
    }

    pub fn cached_entries(&self) -> usize {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn score(&self, kind: PromptKind, a: &str, b: &str, query: &str) -> Result<f64, JudgeError> {
        let key = cache_key(kind, a, b, query, &self.cfg.model);
        if let Some(e) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(e.score);
        }
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": build_prompt(kind, a, b, query)}],
            "temperature": 0,
        });
        let api_key = std::env::var(&self.cfg.api_key_env).ok();
        let timeout = Duration::from_secs_f64(self.cfg.timeout_secs);
        let attempts = self.cfg.max_retries + 1;
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 && self.cfg.retry_backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.retry_backoff_ms * attempt as u64));
            }
            let result = {
                let _slot = self.slots.acquire();
                self.transport.post_json(&self.cfg.endpoint, api_key.as_deref(), &body, timeout)
            };
            match result.and_then(|v| reply_content(&v)).and_then(|raw| parse_score(&raw).map(|s| (s, raw))) {
                Ok((score, raw)) => {
                    self.cache
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .insert(JudgeCacheEntry { key, score, raw })?;
                    return Ok(score);
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "judge request failed");
                    last = Some(e);
                }
            }
        }
        Err(JudgeError::Exhausted { attempts, last: Box::new(last.expect("at least one attempt")) })
    }
}

/// `choices[0].message.content` of a chat-completion reply.
pub fn reply_content(v: &Value) -> Result<String, JudgeError> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| JudgeError::BadReply(format!("no choices[0].message.content in {v}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    Lexical,
    Remote,
}

/// The similarity backend used for free-text comparisons.
pub struct Judge {
    mode: JudgeMode,
    remote: Option<RemoteJudge>,
}

impl Judge {
    pub fn lexical() -> Self {
        Self { mode: JudgeMode::Lexical, remote: None }
    }

    pub fn remote(remote: RemoteJudge) -> Self {
        Self { mode: JudgeMode::Remote, remote: Some(remote) }
    }

    /// A judge in `mode` that may hold a remote client it will only use in remote mode.
    pub fn with_mode(mode: JudgeMode, remote: Option<RemoteJudge>) -> Self {
        Self { mode, remote }
    }

    pub fn mode(&self) -> JudgeMode {
        self.mode
    }

    pub fn similarity(&self, kind: PromptKind, a: &str, b: &str, query: &str) -> Result<f64, JudgeError> {
        match self.mode {
            JudgeMode::Lexical => Ok(lexical_similarity(a, b)),
            JudgeMode::Remote => self
                .remote
                .as_ref()
                .ok_or(JudgeError::NotConfigured)?
                .score(kind, a, b, query),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(lexical_similarity("fill the glass", "fill the glass"), 1.0);
        assert_eq!(lexical_similarity("fill", "drain"), 0.0);
        assert_eq!(lexical_similarity("red ball", "red cube"), 0.5);
        assert_eq!(lexical_similarity("", ""), 1.0);
        assert_eq!(lexical_similarity("a", ""), 0.0);
        // multiset: one shared "a" of two
        assert!((lexical_similarity("a a", "a b") - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parse_examples() {
        assert_eq!(parse_score("0.85").unwrap(), 0.85);
        assert_eq!(parse_score("Score: 1.2").unwrap(), 1.0);
        assert_eq!(parse_score(".5").unwrap(), 0.5);
        assert!(matches!(parse_score("no idea"), Err(JudgeError::NoNumber(_))));
    }

    #[test]
    fn cache_key_depends_on_order() {
        let k1 = cache_key(PromptKind::QaPair, "a", "b", "q", "m");
        let k2 = cache_key(PromptKind::QaPair, "b", "a", "q", "m");
        assert_ne!(k1, k2);
        assert_eq!(k1.len(), 64);
    }
}
