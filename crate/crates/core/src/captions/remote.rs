//! Chat-completion caption provider.
//!
//! One request per caption, issued batch by batch with at most `max_inflight` requests
//! in flight. Failed requests are retried with exponential backoff. Replies that are
//! too long are cut back to whole sentences; replies that are still outside the length
//! window are re-requested.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{tokenize, Caption, CaptionConstraints, CaptionSet};
use crate::error::{Error, Result};
use crate::morphology::StageClass;

pub const DEFAULT_PROMPT: &str =
    "Describe the fungal growth stage {class}, focusing on its key biological characteristics.";
pub const DEFAULT_FORMAT_HINT: &str = "Answer with a single description of the form \"{class} characterized by [characteristics]\" using between {min_len} and {max_len} words.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    /// Environment variable holding the API key. Keys are never read from config files.
    pub api_key_env: String,
    /// Recorded in the caption set; defaults to the model name.
    pub provider_id: Option<String>,
    pub prompt: String,
    pub format_hint: String,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub max_inflight: usize,
    pub timeout_s: u64,
    /// Extra requests allowed per caption when a reply misses the length window.
    pub resample_budget: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8080/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: "MYCOCLIP_API_KEY".into(),
            provider_id: None,
            prompt: DEFAULT_PROMPT.into(),
            format_hint: DEFAULT_FORMAT_HINT.into(),
            max_attempts: 3,
            backoff_base_ms: 500,
            max_inflight: 4,
            timeout_s: 60,
            resample_budget: 3,
        }
    }
}

impl EndpointConfig {
    pub fn provider(&self) -> String {
        self.provider_id.clone().unwrap_or_else(|| self.model.clone())
    }

    pub fn prompt_for(&self, class: StageClass, constraints: &CaptionConstraints) -> String {
        let fill = |s: &str| {
            s.replace("{class}", class.name())
                .replace("{min_len}", &constraints.min_len.to_string())
                .replace("{max_len}", &constraints.max_len.to_string())
        };
        let hint = fill(&self.format_hint);
        if hint.is_empty() {
            fill(&self.prompt)
        } else {
            format!("{} {hint}", fill(&self.prompt))
        }
    }

    pub fn request_body(&self, class: StageClass, constraints: &CaptionConstraints) -> Value {
        json!({
            "model": self.model,
            "messages": [
                { "role": "user", "content": self.prompt_for(class, constraints) }
            ],
            "temperature": constraints.sampling_temperature,
        })
    }
}

/// Identifies one HTTP call; replay fixtures are keyed by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestTag {
    pub class: StageClass,
    pub index: usize,
    /// 0 for the first request of a caption, then 1.. for length resamples.
    pub resample: u32,
    pub attempt: u32,
}

impl RequestTag {
    pub fn fixture_name(&self) -> String {
        if self.resample == 0 {
            format!("{}_{:04}.json", self.class, self.index)
        } else {
            format!("{}_{:04}_r{}.json", self.class, self.index, self.resample)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    /// Sends one JSON request. `Err` means the request did not complete (connect,
    /// timeout); any HTTP status, including errors, comes back as `Ok`.
    fn post(&self, tag: &RequestTag, url: &str, api_key: Option<&str>, body: &str) -> std::result::Result<HttpReply, String>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn post(&self, tag: &RequestTag, url: &str, api_key: Option<&str>, body: &str) -> std::result::Result<HttpReply, String> {
        (**self).post(tag, url, api_key, body)
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider {
                provider: "http".into(),
                detail: e.to_string(),
            })?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post(&self, _tag: &RequestTag, url: &str, api_key: Option<&str>, body: &str) -> std::result::Result<HttpReply, String> {
        let mut req = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Serves recorded response bodies from a directory; a missing fixture is a 404.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Transport for ReplayTransport {
    fn post(&self, tag: &RequestTag, _url: &str, _api_key: Option<&str>, _body: &str) -> std::result::Result<HttpReply, String> {
        let path = self.dir.join(tag.fixture_name());
        match std::fs::read_to_string(&path) {
            Ok(body) => Ok(HttpReply { status: 200, body }),
            Err(_) => Ok(HttpReply {
                status: 404,
                body: format!("no fixture {}", path.display()),
            }),
        }
    }
}

/// Wraps a live transport and saves every successful body as a replay fixture.
pub struct RecordingTransport<T> {
    inner: T,
    dir: PathBuf,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
        }
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post(&self, tag: &RequestTag, url: &str, api_key: Option<&str>, body: &str) -> std::result::Result<HttpReply, String> {
        let reply = self.inner.post(tag, url, api_key, body)?;
        if (200..300).contains(&reply.status) {
            std::fs::create_dir_all(&self.dir).map_err(|e| e.to_string())?;
            std::fs::write(self.dir.join(tag.fixture_name()), &reply.body).map_err(|e| e.to_string())?;
        }
        Ok(reply)
    }
}

/// Extracts `choices[0].message.content` (or legacy `choices[0].text`).
pub fn parse_completion(body: &str) -> Result<String> {
    let parse_err = |detail: &str| Error::Parse {
        detail: detail.to_string(),
        raw_body: body.to_string(),
    };
    let value: Value = serde_json::from_str(body).map_err(|e| parse_err(&e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| parse_err("response has no choices"))?;
    let content = choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err("choice has no message content"))?;
    let content = content.split_whitespace().collect::<Vec<_>>().join(" ");
    if content.is_empty() {
        return Err(parse_err("empty completion"));
    }
    Ok(content)
}

/// Brings a completion inside the length window by dropping trailing sentences.
/// Returns `None` when no sentence prefix fits.
pub fn fit_length(text: &str, constraints: &CaptionConstraints) -> Option<String> {
    if constraints.accepts(text) {
        return Some(text.to_string());
    }
    let mut sentences = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if matches!(ch, '.' | '!' | '?') {
            sentences.push(text[start..=i].trim());
            start = i + ch.len_utf8();
        }
    }
    let mut best = None;
    let mut kept = String::new();
    for s in sentences.into_iter().filter(|s| !s.is_empty()) {
        let candidate = if kept.is_empty() { s.to_string() } else { format!("{kept} {s}") };
        if tokenize(&candidate).len() > constraints.max_len {
            break;
        }
        kept = candidate;
        if constraints.accepts(&kept) {
            best = Some(kept.clone());
        }
    }
    best
}

struct Fetcher<'a> {
    class: StageClass,
    endpoint: &'a EndpointConfig,
    constraints: &'a CaptionConstraints,
    transport: &'a dyn Transport,
    api_key: Option<&'a str>,
    body: String,
}

impl Fetcher<'_> {
    fn provider_err(&self, detail: String) -> Error {
        Error::Provider {
            provider: self.endpoint.provider(),
            detail,
        }
    }

    /// One completion, retried on transport failure or non-2xx status.
    fn request(&self, index: usize, resample: u32) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..self.endpoint.max_attempts.max(1) {
            if attempt > 0 && self.endpoint.backoff_base_ms > 0 {
                let wait = self.endpoint.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let tag = RequestTag {
                class: self.class,
                index,
                resample,
                attempt,
            };
            match self.transport.post(&tag, &self.endpoint.url, self.api_key, &self.body) {
                Ok(reply) if (200..300).contains(&reply.status) => return parse_completion(&reply.body),
                Ok(reply) => {
                    let snippet: String = reply.body.chars().take(200).collect();
                    last = format!("HTTP {}: {snippet}", reply.status);
                }
                Err(e) => last = e,
            }
        }
        Err(self.provider_err(format!(
            "caption {index} of {} failed after {} attempts: {last}",
            self.class, self.endpoint.max_attempts
        )))
    }

    fn caption(&self, index: usize) -> Result<String> {
        for resample in 0..=self.endpoint.resample_budget {
            let text = self.request(index, resample)?;
            if let Some(fitted) = fit_length(&text, self.constraints) {
                return Ok(fitted);
            }
        }
        Err(self.provider_err(format!(
            "caption {index} of {} stayed outside {}..={} tokens after {} resamples",
            self.class, self.constraints.min_len, self.constraints.max_len, self.endpoint.resample_budget
        )))
    }
}

/// Fetches `constraints.total` captions for `class` from a chat-completion endpoint.
pub fn fetch_remote_captions(
    class: StageClass,
    endpoint: &EndpointConfig,
    constraints: &CaptionConstraints,
    transport: &dyn Transport,
    api_key: Option<&str>,
) -> Result<CaptionSet> {
    constraints.validate()?;
    let fetcher = Fetcher {
        class,
        endpoint,
        constraints,
        transport,
        api_key,
        body: endpoint.request_body(class, constraints).to_string(),
    };
    let inflight = endpoint.max_inflight.max(1);
    let mut captions = Vec::with_capacity(constraints.total);
    for k in 0..constraints.batches() {
        let lo = k * constraints.batch_size;
        let hi = (lo + constraints.batch_size).min(constraints.total);
        let indices: Vec<usize> = (lo..hi).collect();
        for wave in indices.chunks(inflight) {
            let results: Vec<Result<String>> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&i| {
                        let f = &fetcher;
                        scope.spawn(move || f.caption(i))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("caption worker panicked"))
                    .collect()
            });
            for r in results {
                captions.push(Caption {
                    text: r?,
                    batch: Some(k),
                });
            }
        }
    }
    let distinct: std::collections::BTreeSet<&str> = captions.iter().map(|c| c.text.as_str()).collect();
    Ok(CaptionSet {
        class,
        deduplicated: distinct.len() == captions.len(),
        captions,
        provider: endpoint.provider(),
    })
}

/// Body of a minimal chat-completion response, as used for fixtures.
pub fn completion_body(content: &str) -> String {
    json!({
        "id": "fixture",
        "object": "chat.completion",
        "choices": [
            { "index": 0, "message": { "role": "assistant", "content": content }, "finish_reason": "stop" }
        ]
    })
    .to_string()
}
