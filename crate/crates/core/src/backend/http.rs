use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{validate_turns, BackendConfig, BackendError, ChatBackend, ChatTurn, Role, Route};

/// Client for an OpenAI-style `/chat/completions` endpoint.
#[derive(Debug)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
    model_name: String,
    temperature: f64,
    max_tokens: u32,
    max_retries: u32,
    retry_base: Duration,
    image_root: Option<PathBuf>,
}

const MAX_BACKOFF: Duration = Duration::from_secs(30);
const BODY_EXCERPT: usize = 300;

impl HttpBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let env = cfg.api_key_env.as_deref().expect("validated");
        let api_key = std::env::var(env)
            .map_err(|_| BackendError::Config(format!("environment variable {env} is not set")))?;
        Self::with_key(cfg, api_key)
    }

    /// Builds a client with an explicit key, bypassing the environment.
    pub fn with_key(cfg: &BackendConfig, api_key: String) -> Result<Self, BackendError> {
        let base = cfg
            .base_url
            .as_deref()
            .ok_or_else(|| BackendError::Config("http backend requires base_url".into()))?
            .trim_end_matches('/');
        let endpoint = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            api_key,
            model_name: cfg.model_name.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            max_retries: cfg.max_retries,
            retry_base: Duration::from_millis(cfg.retry_base_ms),
            image_root: cfg.image_root.clone(),
        })
    }

    /// Request body for the wire protocol. The routing header is removed.
    pub fn request_body(&self, turns: &[ChatTurn]) -> Result<Value, BackendError> {
        let messages = turns
            .iter()
            .map(|t| self.message(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({
            "model": self.model_name,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": messages,
        }))
    }

    fn message(&self, turn: &ChatTurn) -> Result<Value, BackendError> {
        let text = match turn.role {
            Role::System => Route::strip(&turn.content),
            _ => turn.content.as_str(),
        };
        let content = match &turn.image_ref {
            None => Value::String(text.to_string()),
            Some(image) => {
                let mut parts = Vec::new();
                if !text.is_empty() {
                    parts.push(json!({"type": "text", "text": text}));
                }
                parts.push(json!({"type": "image_url", "image_url": {"url": self.image_url(image)?}}));
                Value::Array(parts)
            }
        };
        Ok(json!({"role": turn.role.wire_name(), "content": content}))
    }

    /// Remote references pass through; local files are inlined as base64 data URLs.
    fn image_url(&self, image_ref: &str) -> Result<String, BackendError> {
        let lower = image_ref.to_ascii_lowercase();
        if lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("data:") {
            return Ok(image_ref.to_string());
        }
        let path = match &self.image_root {
            Some(root) if Path::new(image_ref).is_relative() => root.join(image_ref),
            _ => PathBuf::from(image_ref),
        };
        let bytes = std::fs::read(&path).map_err(|e| BackendError::Image {
            image_ref: image_ref.to_string(),
            message: format!("{}: {e}", path.display()),
        })?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => "image/png",
            Some("gif") => "image/gif",
            Some("webp") => "image/webp",
            _ => "image/jpeg",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.retry_base
            .checked_mul(1u32 << attempt.min(16))
            .map_or(MAX_BACKOFF, |d| d.min(MAX_BACKOFF))
    }
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(BODY_EXCERPT).collect();
    if body.chars().count() > BODY_EXCERPT {
        s.push('…');
    }
    s
}

/// Pulls `choices[0].message.content`, joining text parts when it is an array.
pub(crate) fn extract_content(body: &Value) -> Result<String, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(BackendError::Protocol(format!("unexpected content type: {other}"))),
    }
}

enum Attempt {
    Done(String),
    Transient(String),
    Fatal(BackendError),
}

impl HttpBackend {
    fn attempt(&self, body: &Value) -> Attempt {
        let resp = match self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
        {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Transient(format!("HTTP {}: {}", status.as_u16(), excerpt(&text)));
        }
        if !status.is_success() {
            return Attempt::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body: excerpt(&text),
            });
        }
        match serde_json::from_str::<Value>(&text) {
            Ok(v) => match extract_content(&v) {
                Ok(c) => Attempt::Done(c),
                Err(e) => Attempt::Fatal(e),
            },
            Err(e) => Attempt::Fatal(BackendError::Protocol(format!("{e}: {}", excerpt(&text)))),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, turns: &[ChatTurn]) -> Result<String, BackendError> {
        validate_turns(turns)?;
        let body = self.request_body(turns)?;
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                let delay = self.backoff(attempt - 1);
                log::debug!("retrying after {delay:?}: {last}");
                thread::sleep(delay);
            }
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(msg) => last = msg,
            }
        }
        Err(BackendError::Unavailable {
            attempts: self.max_retries + 1,
            last,
        })
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves canned `(status, body)` responses in order, one per connection,
    /// and records request bodies.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn ok_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn backend(url: &str) -> HttpBackend {
        let mut cfg = BackendConfig::http(url, "test-model", "UNUSED");
        cfg.retry_base_ms = 1;
        cfg.max_retries = 2;
        HttpBackend::with_key(&cfg, "sk-test".into()).unwrap()
    }

    fn turns() -> Vec<ChatTurn> {
        vec![
            ChatTurn::system(Route::new("s1", "direct").header("Be brief.")),
            ChatTurn::user("What season is it?", Some("https://example.com/a.jpg".into())),
        ]
    }

    #[test]
    fn retries_after_429() {
        let (url, seen) = serve(vec![(429, "{}".into()), (200, ok_body("fall"))]);
        let b = backend(&url);
        assert_eq!(b.complete(&turns()).unwrap(), "fall");
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        let req: Value = serde_json::from_str(&seen[0]).unwrap();
        assert_eq!(req["model"], "test-model");
        assert_eq!(req["messages"][0]["content"], "Be brief.");
        assert_eq!(req["messages"][1]["content"][1]["image_url"]["url"], "https://example.com/a.jpg");
    }

    #[test]
    fn client_error_is_not_retried() {
        let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        match backend(&url).complete(&turns()) {
            Err(BackendError::Rejected { status, body }) => {
                assert_eq!(status, 400);
                assert!(body.contains("bad"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn exhausted_retries() {
        let (url, _) = serve(vec![(500, "{}".into()), (503, "{}".into()), (502, "{}".into())]);
        assert!(matches!(
            backend(&url).complete(&turns()),
            Err(BackendError::Unavailable { attempts: 3, .. })
        ));
    }

    #[test]
    fn local_images_are_inlined() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.png"), [1u8, 2, 3]).unwrap();
        let mut cfg = BackendConfig::http("http://localhost:1", "m", "K");
        cfg.image_root = Some(dir.path().to_path_buf());
        let b = HttpBackend::with_key(&cfg, "k".into()).unwrap();
        let body = b.request_body(&[ChatTurn::user("q", Some("x.png".into()))]).unwrap();
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,AQID");
        assert!(matches!(
            b.request_body(&[ChatTurn::user("q", Some("missing.jpg".into()))]),
            Err(BackendError::Image { .. })
        ));
    }

    #[test]
    fn content_parts_are_joined() {
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(extract_content(&v).unwrap(), "ab");
        assert!(extract_content(&json!({})).is_err());
    }
}
