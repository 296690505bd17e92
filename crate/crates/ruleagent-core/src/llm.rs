//! Chat-completion backends: a deterministic scripted double for tests and
//! offline runs, and a client for any OpenAI-compatible HTTP endpoint.
//!
//! Every call is logged into an in-memory transcript before its response is
//! parsed by anyone, so a run can always be audited from its artifacts.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// Environment variable holding the API credential for live runs.
pub const API_KEY_ENV: &str = "RULEAGENT_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("backend configuration error: {0}")]
    Configuration(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("script has no response for {kind:?} call #{occurrence}")]
    ScriptExhausted { kind: PromptKind, occurrence: usize },
}

/// Which stage of the loop a request belongs to; scripted responses key on
/// this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Planning,
    ConfidenceReflection,
    RuleReflection,
}

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub kind: PromptKind,
    pub system: String,
    pub user: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl ChatRequest {
    fn validate(&self) -> Result<(), LlmError> {
        if self.system.is_empty() || self.user.is_empty() {
            return Err(LlmError::InvalidRequest(
                "system and user texts must be non-empty".into(),
            ));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A logged call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: PromptKind,
    pub occurrence: usize,
    pub system: String,
    pub user: String,
    pub response: String,
}

/// Chat backend. Implementations are safe to call from several threads;
/// transcript appends are serialized internally.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;

    /// Complete log of all calls, in completion order.
    fn transcript(&self) -> Vec<TranscriptEntry>;

    /// Whether per-sample calls may be issued concurrently. The scripted
    /// backend keys on call order, so it stays sequential for determinism.
    fn supports_parallel(&self) -> bool {
        false
    }
}

/// Canned responses for one prompt kind: an ordered sequence consumed per
/// occurrence, then an optional default for everything after.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KindScript {
    #[serde(default)]
    pub sequence: Vec<String>,
    #[serde(default)]
    pub default: Option<String>,
}

impl KindScript {
    fn lookup(&self, occurrence: usize) -> Option<&str> {
        self.sequence
            .get(occurrence)
            .or(self.default.as_ref())
            .map(String::as_str)
    }
}

/// The full script of a deterministic offline run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendScript {
    pub planning: KindScript,
    pub confidence_reflection: KindScript,
    pub rule_reflection: KindScript,
}

impl BackendScript {
    fn kind_script(&self, kind: PromptKind) -> &KindScript {
        match kind {
            PromptKind::Planning => &self.planning,
            PromptKind::ConfidenceReflection => &self.confidence_reflection,
            PromptKind::RuleReflection => &self.rule_reflection,
        }
    }

    pub fn from_json(text: &str) -> Result<BackendScript, LlmError> {
        serde_json::from_str(text)
            .map_err(|e| LlmError::Configuration(format!("bad backend script: {e}")))
    }
}

/// Deterministic test double: responses come from the script, keyed by
/// (prompt kind, occurrence index). Performs no I/O.
pub struct ScriptedBackend {
    script: BackendScript,
    state: Mutex<ScriptedState>,
}

#[derive(Default)]
struct ScriptedState {
    occurrences: HashMap<PromptKind, usize>,
    transcript: Vec<TranscriptEntry>,
}

impl ScriptedBackend {
    pub fn new(script: BackendScript) -> ScriptedBackend {
        ScriptedBackend {
            script,
            state: Mutex::new(ScriptedState::default()),
        }
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let mut state = self.state.lock().expect("scripted backend lock");
        let occurrence = *state
            .occurrences
            .entry(request.kind)
            .and_modify(|n| *n += 1)
            .or_insert(0);
        let response = self
            .script
            .kind_script(request.kind)
            .lookup(occurrence)
            .ok_or(LlmError::ScriptExhausted {
                kind: request.kind,
                occurrence,
            })?
            .to_string();
        state.transcript.push(TranscriptEntry {
            kind: request.kind,
            occurrence,
            system: request.system.clone(),
            user: request.user.clone(),
            response: response.clone(),
        });
        Ok(response)
    }

    fn transcript(&self) -> Vec<TranscriptEntry> {
        self.state
            .lock()
            .expect("scripted backend lock")
            .transcript
            .clone()
    }
}

/// Client for the OpenAI-compatible chat-completions wire protocol.
/// Retries 429 and 5xx responses with exponential backoff (3 attempts).
pub struct HttpBackend {
    base_url: String,
    api_key: String,
    client: reqwest::blocking::Client,
    backoff_base: Duration,
    state: Mutex<HttpState>,
}

#[derive(Default)]
struct HttpState {
    occurrences: HashMap<PromptKind, usize>,
    transcript: Vec<TranscriptEntry>,
}

const RETRY_ATTEMPTS: u32 = 3;

impl HttpBackend {
    /// Reads the credential from [`API_KEY_ENV`]; fails before any network
    /// call when it is unset.
    pub fn from_env(base_url: impl Into<String>) -> Result<HttpBackend, LlmError> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| {
            LlmError::Configuration(format!("environment variable {API_KEY_ENV} is not set"))
        })?;
        Ok(HttpBackend::new(base_url, api_key))
    }

    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> HttpBackend {
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            client: reqwest::blocking::Client::new(),
            backoff_base: Duration::from_millis(500),
            state: Mutex::new(HttpState::default()),
        }
    }

    pub fn with_backoff_base(mut self, base: Duration) -> HttpBackend {
        self.backoff_base = base;
        self
    }

    fn post_once(&self, request: &ChatRequest) -> Result<reqwest::blocking::Response, String> {
        let body = json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        self.client
            .post(format!("{}/v1/chat/completions", self.base_url))
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| e.to_string())
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let mut last_error = String::new();
        let mut response_text = None;
        for attempt in 0..RETRY_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.pow(attempt - 1));
            }
            match self.post_once(request) {
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().map_err(|e| LlmError::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    })?;
                    if status.is_success() {
                        response_text = Some(text);
                        break;
                    }
                    last_error = format!("status {status}: {text}");
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(LlmError::Transport {
                            attempts: attempt + 1,
                            message: last_error,
                        });
                    }
                }
                Err(message) => last_error = message,
            }
        }
        let raw = response_text.ok_or(LlmError::Transport {
            attempts: RETRY_ATTEMPTS,
            message: last_error,
        })?;

        // Log the raw response before parsing anything out of it.
        let occurrence;
        {
            let mut state = self.state.lock().expect("http backend lock");
            occurrence = *state
                .occurrences
                .entry(request.kind)
                .and_modify(|n| *n += 1)
                .or_insert(0);
            state.transcript.push(TranscriptEntry {
                kind: request.kind,
                occurrence,
                system: request.system.clone(),
                user: request.user.clone(),
                response: raw.clone(),
            });
        }

        #[derive(Deserialize)]
        struct Completion {
            choices: Vec<Choice>,
        }
        #[derive(Deserialize)]
        struct Choice {
            message: ChoiceMessage,
        }
        #[derive(Deserialize)]
        struct ChoiceMessage {
            content: Option<String>,
        }
        let completion: Completion = serde_json::from_str(&raw)
            .map_err(|e| LlmError::Protocol(format!("unparseable completion: {e}")))?;
        let content = completion
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        if content.is_empty() {
            return Err(LlmError::Protocol("empty completion content".into()));
        }
        Ok(content)
    }

    fn transcript(&self) -> Vec<TranscriptEntry> {
        self.state
            .lock()
            .expect("http backend lock")
            .transcript
            .clone()
    }

    fn supports_parallel(&self) -> bool {
        true
    }
}
