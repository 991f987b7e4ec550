//! Blocking clients for OpenAI-compatible chat-completions and embeddings
//! endpoints.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use clh_core::backend::{Backend, BackendError, GenerationRequest, GenerationResult};
use clh_core::retrieval::{normalize, Embedder, RetrievalError};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpSettings {
    /// Base URL up to and including the version segment, e.g.
    /// `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff: Duration,
    pub max_in_flight: usize,
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CallError {
    Timeout,
    Unavailable(String),
    BadBody(String),
}

/// Counting gate capping concurrent requests.
struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(cap: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            cap: cap.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

struct JsonClient {
    agent: ureq::Agent,
    settings: HttpSettings,
    gate: Gate,
}

impl JsonClient {
    fn new(settings: HttpSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            gate: Gate::new(settings.max_in_flight),
            settings,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.settings.base_url.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying timeouts, transport errors, 429 and 5xx with
    /// exponential backoff. Other statuses fail at once.
    fn post(&self, path: &str, body: &Value) -> Result<Value, CallError> {
        let url = self.url(path);
        let mut last = CallError::Unavailable("no attempt made".into());
        for attempt in 0..=self.settings.max_retries {
            if attempt > 0 {
                let delay = self
                    .settings
                    .backoff
                    .saturating_mul(1 << (attempt - 1).min(16));
                log::warn!("{url}: attempt {attempt} failed ({last:?}); retrying in {delay:?}");
                thread::sleep(delay);
            }
            let _permit = self.gate.acquire();
            let mut request = self.agent.post(&url);
            if let Some(key) = &self.settings.api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        return response
                            .body_mut()
                            .read_json::<Value>()
                            .map_err(|e| CallError::BadBody(e.to_string()));
                    }
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    last = CallError::Unavailable(format!("HTTP {status}: {}", text.trim()));
                    if status != 429 && status < 500 {
                        return Err(last);
                    }
                }
                Err(ureq::Error::Timeout(_)) => last = CallError::Timeout,
                Err(e) => last = CallError::Unavailable(e.to_string()),
            }
        }
        Err(last)
    }
}

/// Chat-completions backend. Requests carry `{model, messages, temperature:
/// 0}`; under constrained decoding the id pattern is sent as
/// `guided_regex`, the guided-decoding extension of vLLM-style servers.
pub struct HttpBackend {
    client: JsonClient,
}

impl HttpBackend {
    pub fn new(settings: HttpSettings) -> Self {
        Self {
            client: JsonClient::new(settings),
        }
    }

    pub fn request_body(&self, request: &GenerationRequest<'_>) -> Value {
        let mut body = json!({
            "model": self.client.settings.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": 0,
        });
        if let Some(c) = request.constraint {
            body["guided_regex"] = Value::String(c.regex());
        }
        body
    }
}

/// Raw text of the first choice. Servers that split reasoning into a
/// separate field get it re-joined ahead of a `</think>` marker.
fn completion_text(v: &Value) -> Option<String> {
    let message = v.get("choices")?.get(0)?.get("message")?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default();
    let reasoning = ["reasoning_content", "reasoning"]
        .iter()
        .find_map(|k| message.get(*k).and_then(Value::as_str))
        .filter(|r| !r.is_empty());
    match reasoning {
        Some(r) if !content.contains("</think>") => Some(format!("{r}</think>\n{content}")),
        _ if message.get("content").is_some_and(Value::is_string) => Some(content.to_string()),
        _ => None,
    }
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<GenerationResult, BackendError> {
        let body = self.request_body(request);
        let v = self
            .client
            .post("chat/completions", &body)
            .map_err(|e| match e {
                CallError::Timeout => BackendError::Timeout,
                CallError::Unavailable(m) => BackendError::Unavailable(m),
                CallError::BadBody(m) => BackendError::UnparseableResponse(m),
            })?;
        let text =
            completion_text(&v).ok_or_else(|| BackendError::UnparseableResponse(v.to_string()))?;
        Ok(GenerationResult::from_raw(text))
    }
}

/// Embeddings endpoint client; vectors are normalized and checked against
/// the configured dimension.
pub struct HttpEmbedder {
    client: JsonClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(settings: HttpSettings, dim: usize) -> Self {
        Self {
            client: JsonClient::new(settings),
            dim,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let body = json!({"model": self.client.settings.model, "input": [text]});
        let v = self
            .client
            .post("embeddings", &body)
            .map_err(|e| RetrievalError::BackendUnavailable(format!("{e:?}")))?;
        let values = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| {
                RetrievalError::BackendUnavailable("response has no data[0].embedding".into())
            })?;
        let mut vector: Vec<f32> = values
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN) as f32)
            .collect();
        if vector.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        normalize(&mut vector)?;
        Ok(vector)
    }
}
