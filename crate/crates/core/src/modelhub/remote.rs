//! OpenAI-compatible HTTP backend.
//!
//! `generate` posts to `{base}/chat/completions`. `score` needs log-probs of
//! the given text rather than of a continuation, so it posts an echo request
//! to `{base}/completions` (`echo: true, max_tokens: 0, logprobs: 0`) and reads
//! `choices[0].logprobs`. Servers that do not return prompt log-probs make
//! scoring unavailable; nothing is approximated.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{overlap_embedding, Backend, BackendDescriptor, BackendKind, Capability, ScoredText};
use crate::error::{Error, Result};

pub const ENV_URL: &str = "LSCP_REMOTE_URL";
pub const ENV_KEY: &str = "LSCP_REMOTE_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Use the server's `/embeddings` endpoint instead of word-overlap vectors.
    pub embeddings: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key: None,
            model: "default".into(),
            timeout_secs: 120,
            max_retries: 2,
            max_in_flight: 4,
            embeddings: false,
        }
    }
}

impl RemoteConfig {
    /// Takes the URL from `LSCP_REMOTE_URL` and the key from
    /// `LSCP_REMOTE_KEY` when they are set.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_URL) {
            if !url.is_empty() {
                self.base_url = url;
            }
        }
        if let Ok(key) = std::env::var(ENV_KEY) {
            if !key.is_empty() {
                self.api_key = Some(key);
            }
        }
        self
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build();
        let limit = config.max_in_flight.max(1);
        Self {
            agent: ureq::Agent::new_with_config(agent_config),
            config,
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                limit,
            },
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value> {
        let _permit = self.in_flight.acquire();
        let mut req = self
            .agent
            .post(self.url(path))
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| {
            let retryable = matches!(
                e,
                ureq::Error::Io(_)
                    | ureq::Error::Timeout(_)
                    | ureq::Error::HostNotFound
                    | ureq::Error::ConnectionFailed
            );
            Error::backend(format!("{path}: {e}"), retryable)
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::backend(format!("{path}: reading body: {e}"), true))?;
        if status == 429 || status >= 500 {
            return Err(Error::backend(
                format!("{path}: HTTP {status}: {text}"),
                true,
            ));
        }
        if status >= 400 {
            return Err(Error::backend(
                format!("{path}: HTTP {status}: {text}"),
                false,
            ));
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::backend(format!("{path}: malformed JSON: {e}"), false))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    attempt += 1;
                    tracing::warn!(attempt, "retrying remote call: {e}");
                    std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
                }
                other => return other,
            }
        }
    }
}

/// Parses an echo-completions response into per-token log-probs and byte
/// spans of `text`.
pub fn parse_echo_logprobs(text: &str, resp: &Value) -> Result<ScoredText> {
    let lp = resp
        .pointer("/choices/0/logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| Error::LogprobsUnavailable("response carries no logprobs".into()))?;
    let tokens: Vec<String> = lp
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::LogprobsUnavailable("missing logprobs.tokens".into()))?
        .iter()
        .map(|t| t.as_str().unwrap_or_default().to_string())
        .collect();
    let values: Vec<Option<f64>> = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::LogprobsUnavailable("missing logprobs.token_logprobs".into()))?
        .iter()
        .map(Value::as_f64)
        .collect();
    if tokens.len() != values.len() {
        return Err(Error::LogprobsUnavailable(format!(
            "{} tokens but {} logprobs",
            tokens.len(),
            values.len()
        )));
    }
    let mut offsets = Vec::with_capacity(tokens.len());
    let mut logprobs = Vec::with_capacity(tokens.len());
    let mut cursor = 0usize;
    for (i, (tok, value)) in tokens.iter().zip(&values).enumerate() {
        let start = cursor;
        let end = (cursor + tok.len()).min(text.len());
        cursor = end;
        match value {
            Some(v) => {
                offsets.push(start..end);
                logprobs.push(v.min(0.0));
            }
            // Some servers return null for the unconditioned first token.
            None if i == 0 => {}
            None => {
                return Err(Error::LogprobsUnavailable(format!(
                    "null logprob at token {i}"
                )));
            }
        }
    }
    if logprobs.is_empty() {
        return Err(Error::LogprobsUnavailable("no scored tokens".into()));
    }
    if cursor != text.len() {
        return Err(Error::LogprobsUnavailable(
            "echoed tokens do not reassemble the scored text".into(),
        ));
    }
    Ok(ScoredText {
        text: text.to_string(),
        offsets,
        logprobs,
    })
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::new(
            BackendKind::Remote,
            [Capability::Score, Capability::Generate, Capability::Embed],
            format!("remote:{}", self.config.model),
        )
    }

    fn instance_id(&self) -> String {
        format!("remote-{}@{}", self.config.model, self.config.base_url)
    }

    fn score(&self, text: &str) -> Result<ScoredText> {
        if text.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let body = json!({
            "model": self.config.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let resp = self.post("completions", &body)?;
        parse_echo_logprobs(text, &resp)
    }

    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<String> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
            "logprobs": false,
        });
        let resp = self.post("chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::backend("chat response without message content", false))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if !self.config.embeddings {
            return Ok(overlap_embedding(text));
        }
        let body = json!({"model": self.config.model, "input": text});
        let resp = self.post("embeddings", &body)?;
        resp.pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .ok_or_else(|| Error::backend("embedding response without data", false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_logprobs_parse() {
        let resp = json!({"choices": [{"logprobs": {
            "tokens": ["The", " cat", " sat"],
            "token_logprobs": [null, -1.5, -0.25],
        }}]});
        let s = parse_echo_logprobs("The cat sat", &resp).unwrap();
        assert_eq!(s.logprobs, vec![-1.5, -0.25]);
        assert_eq!(s.offsets, vec![3..7, 7..11]);
    }

    #[test]
    fn missing_logprobs_is_reported() {
        let resp = json!({"choices": [{"text": "x"}]});
        assert!(matches!(
            parse_echo_logprobs("x", &resp),
            Err(Error::LogprobsUnavailable(_))
        ));
        let resp = json!({"choices": [{"logprobs": {
            "tokens": ["a", "b"], "token_logprobs": [-1.0, null]}}]});
        assert!(parse_echo_logprobs("ab", &resp).is_err());
    }

    #[test]
    fn url_joining() {
        let b = RemoteBackend::new(RemoteConfig {
            base_url: "http://h/v1/".into(),
            ..RemoteConfig::default()
        });
        assert_eq!(b.url("chat/completions"), "http://h/v1/chat/completions");
    }
}
