//! Chat-completion clients: a remote HTTP backend, a replaying fixture backend
//! keyed by prompt hash, and a recorder that produces fixtures.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("chat transport failed after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("malformed chat response: {0}")]
    Response(String),
    #[error("no fixture for prompt {hash} ({preview}...)")]
    FixtureMiss { hash: String, preview: String },
    #[error("fixture file {path}: {message}")]
    Fixture { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub n: usize,
}

impl ChatRequest {
    pub fn new(prompt: String, temperature: f64, n: usize) -> Self {
        Self {
            prompt,
            temperature,
            n,
        }
    }
}

pub trait ChatClient: Send + Sync {
    /// Up to `n` completions for the prompt.
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, ClientError>;
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub prompt_sha256: String,
    pub completions: Vec<String>,
}

/// Replays recorded completions; an unknown prompt is an error.
#[derive(Debug, Default)]
pub struct FixtureChatClient {
    records: BTreeMap<String, Vec<String>>,
}

impl FixtureChatClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, prompt: &str, completions: Vec<String>) {
        self.records.insert(prompt_sha256(prompt), completions);
    }

    /// Adds every record of `other`; its completions win on a shared prompt.
    pub fn merge(&mut self, other: FixtureChatClient) {
        self.records.extend(other.records);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let err = |message: String| ClientError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let mut records = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureRecord =
                serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            records.insert(rec.prompt_sha256, rec.completions);
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        write_fixtures(&self.records, path)
    }
}

fn write_fixtures(records: &BTreeMap<String, Vec<String>>, path: &Path) -> Result<(), ClientError> {
    let err = |e: std::io::Error| ClientError::Fixture {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    for (hash, completions) in records {
        let rec = FixtureRecord {
            prompt_sha256: hash.clone(),
            completions: completions.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("fixture serializes")).map_err(err)?;
    }
    w.flush().map_err(err)
}

impl ChatClient for FixtureChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, ClientError> {
        let hash = prompt_sha256(&req.prompt);
        match self.records.get(&hash) {
            Some(c) => Ok(c.iter().take(req.n.max(1)).cloned().collect()),
            None => Err(ClientError::FixtureMiss {
                hash,
                preview: req.prompt.chars().take(60).collect(),
            }),
        }
    }
}

/// Wraps a client and keeps every exchange for later replay.
pub struct RecordingChatClient<C: ChatClient> {
    inner: C,
    records: Mutex<BTreeMap<String, Vec<String>>>,
}

impl<C: ChatClient> RecordingChatClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            records: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ClientError> {
        write_fixtures(&self.records.lock().unwrap(), path)
    }
}

impl<C: ChatClient> ChatClient for RecordingChatClient<C> {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, ClientError> {
        let out = self.inner.complete(req)?;
        self.records
            .lock()
            .unwrap()
            .insert(prompt_sha256(&req.prompt), out.clone());
        Ok(out)
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    n: usize,
}

/// HTTP backend: POST `{model, messages, temperature, n}`, read `{choices}`.
/// A choice may be a bare string, `{text}` or `{message: {content}}`.
pub struct RemoteChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_attempts: usize,
    client: reqwest::blocking::Client,
}

impl RemoteChatClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, ClientError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            max_attempts: 3,
            client,
        })
    }

    fn post(&self, req: &ChatRequest) -> Result<Value, String> {
        let body = WireRequest {
            model: &self.model,
            messages: vec![WireMessage {
                role: "user",
                content: &req.prompt,
            }],
            temperature: req.temperature,
            n: req.n,
        };
        let mut http = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http.send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("http status {}", resp.status()));
        }
        resp.json::<Value>().map_err(|e| e.to_string())
    }
}

fn choice_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Object(o) => o
            .get("text")
            .and_then(Value::as_str)
            .or_else(|| o.get("message")?.get("content")?.as_str())
            .map(str::to_string),
        _ => None,
    }
}

impl ChatClient for RemoteChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<Vec<String>, ClientError> {
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.post(req) {
                Ok(v) => {
                    let choices = v
                        .get("choices")
                        .and_then(Value::as_array)
                        .ok_or_else(|| ClientError::Response("missing `choices`".into()))?;
                    return choices
                        .iter()
                        .map(|c| {
                            choice_text(c)
                                .ok_or_else(|| ClientError::Response(format!("bad choice: {c}")))
                        })
                        .collect();
                }
                Err(e) => {
                    last = e;
                    if attempt < self.max_attempts {
                        std::thread::sleep(Duration::from_millis(250 * attempt as u64));
                    }
                }
            }
        }
        Err(ClientError::Transport {
            attempts: self.max_attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_round_trip_and_miss() {
        let mut f = FixtureChatClient::new();
        f.insert("hello", vec!["a".into(), "b".into()]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("fx.jsonl");
        f.save(&p).unwrap();
        let g = FixtureChatClient::load(&p).unwrap();
        assert_eq!(
            g.complete(&ChatRequest::new("hello".into(), 0.0, 1)).unwrap(),
            vec!["a".to_string()]
        );
        assert!(matches!(
            g.complete(&ChatRequest::new("other".into(), 0.0, 1)),
            Err(ClientError::FixtureMiss { .. })
        ));
    }

    #[test]
    fn choice_shapes() {
        assert_eq!(choice_text(&serde_json::json!("x")).unwrap(), "x");
        assert_eq!(choice_text(&serde_json::json!({"text": "y"})).unwrap(), "y");
        assert_eq!(
            choice_text(&serde_json::json!({"message": {"content": "z"}})).unwrap(),
            "z"
        );
    }

    #[test]
    fn unreachable_endpoint_reports_attempts() {
        let c = RemoteChatClient::new("http://127.0.0.1:9/v1", "m", None, Duration::from_millis(200))
            .unwrap();
        match c.complete(&ChatRequest::new("p".into(), 0.0, 1)) {
            Err(ClientError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }
}
