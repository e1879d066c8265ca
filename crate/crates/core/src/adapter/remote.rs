//! HTTP completion client with bounded retries and an audit transcript.
//!
//! Wire contract: `POST <endpoint>` with a JSON body
//! `{"model": "...", "prompt": "..."}`; a successful response is a JSON
//! object with a string field `completion`. Embedding requests send
//! `{"model": "...", "input": "..."}` and expect a numeric array field
//! `embedding`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{AdapterError, MAX_ATTEMPTS_CAP};
use crate::embed::{Embedder, EmbeddingVector};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteSettings {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    pub max_attempts: u32,
    /// First backoff delay; doubles after every failed attempt.
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            timeout: Duration::from_secs(30),
            max_attempts: MAX_ATTEMPTS_CAP,
            backoff_base: Duration::from_secs(1),
            max_in_flight: 2,
        }
    }
}

impl RemoteSettings {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.endpoint.is_empty() {
            return Err(AdapterError::Config("no endpoint configured".into()));
        }
        if !(1..=MAX_ATTEMPTS_CAP).contains(&self.max_attempts) {
            return Err(AdapterError::Config(format!(
                "max_attempts must be in 1..={MAX_ATTEMPTS_CAP}, got {}",
                self.max_attempts
            )));
        }
        if self.max_in_flight == 0 {
            return Err(AdapterError::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// Applies `TABXFER_ENDPOINT`, `TABXFER_MODEL`, `TABXFER_TIMEOUT_MS` and
    /// `TABXFER_MAX_ATTEMPTS` when set.
    pub fn apply_env(&mut self) -> Result<(), AdapterError> {
        if let Ok(v) = std::env::var("TABXFER_ENDPOINT") {
            self.endpoint = v;
        }
        if let Ok(v) = std::env::var("TABXFER_MODEL") {
            self.model = v;
        }
        if let Ok(v) = std::env::var("TABXFER_TIMEOUT_MS") {
            let ms = v
                .parse()
                .map_err(|_| AdapterError::Config(format!("bad TABXFER_TIMEOUT_MS `{v}`")))?;
            self.timeout = Duration::from_millis(ms);
        }
        if let Ok(v) = std::env::var("TABXFER_MAX_ATTEMPTS") {
            self.max_attempts = v
                .parse()
                .map_err(|_| AdapterError::Config(format!("bad TABXFER_MAX_ATTEMPTS `{v}`")))?;
        }
        Ok(())
    }
}

/// Append-only prompt/response log.
#[derive(Debug)]
pub struct Transcript {
    path: PathBuf,
    file: Mutex<File>,
}

impl Transcript {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, label: &str, body: &str) {
        let mut f = self.file.lock().expect("transcript poisoned");
        let _ = writeln!(f, "=== {label}");
        let _ = f.write_all(body.as_bytes());
        if !body.ends_with('\n') {
            let _ = writeln!(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptRecord {
    pub attempt: u32,
    /// `None` on success.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub log: Vec<AttemptRecord>,
}

#[derive(Debug)]
struct InFlight {
    cap: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut active = self.active.lock().expect("in-flight counter poisoned");
        while *active >= self.cap {
            active = self.freed.wait(active).expect("in-flight counter poisoned");
        }
        *active += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight counter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteClient {
    settings: RemoteSettings,
    agent: ureq::Agent,
    in_flight: InFlight,
    transcript: Option<Arc<Transcript>>,
}

impl RemoteClient {
    pub fn new(settings: RemoteSettings, transcript: Option<Arc<Transcript>>) -> Result<Self, AdapterError> {
        settings.validate()?;
        let agent = ureq::AgentBuilder::new().timeout(settings.timeout).build();
        Ok(Self {
            in_flight: InFlight {
                cap: settings.max_in_flight,
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            settings,
            agent,
            transcript,
        })
    }

    pub fn settings(&self) -> &RemoteSettings {
        &self.settings
    }

    fn attempt(&self, body: &Value) -> Result<Value, String> {
        let response = self
            .agent
            .post(&self.settings.endpoint)
            .send_json(body.clone())
            .map_err(|e| e.to_string())?;
        response
            .into_json::<Value>()
            .map_err(|e| format!("malformed response: {e}"))
    }

    /// Posts `body` until `extract` accepts the response or attempts run out.
    fn post_with_retry<T>(
        &self,
        label: &str,
        body: Value,
        extract: impl Fn(&Value) -> Option<T>,
    ) -> Result<(T, Vec<AttemptRecord>), AdapterError> {
        let _permit = self.in_flight.acquire();
        let mut log = Vec::new();
        let mut delay = self.settings.backoff_base;
        for attempt in 1..=self.settings.max_attempts {
            if let Some(t) = &self.transcript {
                t.append(&format!("{label} request attempt={attempt}"), &body.to_string());
            }
            let outcome = self
                .attempt(&body)
                .and_then(|v| extract(&v).map(|x| (x, v)).ok_or_else(|| "malformed response".to_string()));
            match outcome {
                Ok((value, raw)) => {
                    log::debug!("{label}: attempt {attempt} succeeded");
                    if let Some(t) = &self.transcript {
                        t.append(&format!("{label} response attempt={attempt}"), &raw.to_string());
                    }
                    log.push(AttemptRecord { attempt, error: None });
                    return Ok((value, log));
                }
                Err(e) => {
                    log::warn!("{label}: attempt {attempt}/{} failed: {e}", self.settings.max_attempts);
                    if let Some(t) = &self.transcript {
                        t.append(&format!("{label} failure attempt={attempt}"), &e);
                    }
                    log.push(AttemptRecord {
                        attempt,
                        error: Some(e),
                    });
                    if attempt < self.settings.max_attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        Err(AdapterError::Exhausted {
            attempts: self.settings.max_attempts,
            last: log
                .last()
                .and_then(|r| r.error.clone())
                .unwrap_or_default(),
        })
    }

    pub fn complete(&self, prompt: &str) -> Result<Completion, AdapterError> {
        let body = json!({ "model": self.settings.model, "prompt": prompt });
        let (text, log) = self.post_with_retry("completion", body, |v| {
            v.get("completion").and_then(Value::as_str).map(str::to_string)
        })?;
        Ok(Completion {
            text,
            attempts: log.len() as u32,
            log,
        })
    }

    pub fn embed(&self, text: &str, dimension: usize) -> Result<Vec<f64>, AdapterError> {
        let body = json!({ "model": self.settings.model, "input": text });
        let (values, _) = self.post_with_retry("embedding", body, |v| {
            let arr = v.get("embedding")?.as_array()?;
            let values: Option<Vec<f64>> = arr.iter().map(Value::as_f64).collect();
            values.filter(|vals| vals.len() == dimension && vals.iter().all(|x| x.is_finite()))
        })?;
        Ok(values)
    }
}

/// One-shot completion with a fresh client.
pub fn remote_complete(prompt: &str, settings: &RemoteSettings) -> Result<Completion, AdapterError> {
    RemoteClient::new(settings.clone(), None)?.complete(prompt)
}

/// Embedder backed by a remote embedding endpoint.
pub struct RemoteEmbedder {
    client: RemoteClient,
    dimension: usize,
}

impl RemoteEmbedder {
    pub fn new(client: RemoteClient, dimension: usize) -> Self {
        Self { client, dimension }
    }
}

impl Embedder for RemoteEmbedder {
    fn tag(&self) -> String {
        format!("remote/{}/d{}", self.client.settings.model, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        Ok(EmbeddingVector::new(self.client.embed(text, self.dimension)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::thread;

    /// Serves one scripted `(status, body)` per connection, then stops.
    fn mock_server(script: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for (status, body) in script {
                let (stream, _) = match listener.accept() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream);
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut req_body = vec![0u8; content_length];
                let _ = reader.read_exact(&mut req_body);
                let mut stream = reader.into_inner();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        (format!("http://{addr}/v1/complete"), hits)
    }

    fn settings(endpoint: String, attempts: u32) -> RemoteSettings {
        RemoteSettings {
            endpoint,
            model: "test-model".into(),
            timeout: Duration::from_secs(5),
            max_attempts: attempts,
            backoff_base: Duration::from_millis(1),
            max_in_flight: 2,
        }
    }

    #[test]
    fn returns_completion_verbatim() {
        let (url, hits) = mock_server(vec![(200, r#"{"completion":"heart disease cohort"}"#.into())]);
        let c = remote_complete("prompt", &settings(url, 3)).unwrap();
        assert_eq!(c.text, "heart disease cohort");
        assert_eq!(c.attempts, 1);
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn retries_until_success() {
        let (url, hits) = mock_server(vec![
            (500, "{}".into()),
            (200, "not json".into()),
            (200, r#"{"completion":"ok"}"#.into()),
        ]);
        let c = remote_complete("prompt", &settings(url, 5)).unwrap();
        assert_eq!(c.text, "ok");
        assert_eq!(c.attempts, 3);
        assert_eq!(c.log.len(), 3);
        assert!(c.log[0].error.is_some() && c.log[1].error.is_some() && c.log[2].error.is_none());
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn unreachable_endpoint_exhausts_attempts() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let err = remote_complete("p", &settings(format!("http://127.0.0.1:{port}/"), 2)).unwrap_err();
        assert!(matches!(err, AdapterError::Exhausted { attempts: 2, .. }));
    }

    #[test]
    fn attempt_cap_is_validated() {
        assert!(settings("http://x".into(), 0).validate().is_err());
        assert!(settings("http://x".into(), 6).validate().is_err());
        assert!(settings("http://x".into(), 5).validate().is_ok());
        assert!(settings(String::new(), 2).validate().is_err());
    }

    #[test]
    fn transcript_records_every_attempt() {
        let dir = tempfile::tempdir().unwrap();
        let t = Arc::new(Transcript::create(&dir.path().join("t.log")).unwrap());
        let (url, _) = mock_server(vec![(503, "{}".into()), (200, r#"{"completion":"x"}"#.into())]);
        let client = RemoteClient::new(settings(url, 2), Some(t.clone())).unwrap();
        client.complete("hello").unwrap();
        let text = std::fs::read_to_string(t.path()).unwrap();
        assert_eq!(text.matches("request attempt=").count(), 2);
        assert!(text.contains("failure attempt=1"));
        assert!(text.contains("response attempt=2"));
    }

    #[test]
    fn remote_embedder_checks_dimension() {
        let vec64: Vec<String> = (0..64).map(|i| format!("{}", i as f64 / 64.0)).collect();
        let good = format!(r#"{{"embedding":[{}]}}"#, vec64.join(","));
        let (url, _) = mock_server(vec![(200, r#"{"embedding":[1,2]}"#.into()), (200, good)]);
        let client = RemoteClient::new(settings(url, 2), None).unwrap();
        let e = RemoteEmbedder::new(client, 64);
        let v = e.embed("x").unwrap();
        assert_eq!(v.dimension(), 64);
        assert!(e.tag().starts_with("remote/test-model"));
    }

    #[test]
    fn remote_adapter_end_to_end() {
        use crate::adapter::{Adapter, RemoteAdapter};
        let (url, _) = mock_server(vec![(200, r#"{"completion":"  cardiac   risk\n cohort "}"#.into())]);
        let adapter = RemoteAdapter::new(RemoteClient::new(settings(url, 1), None).unwrap());
        let card = crate::adapter::tests::card("x", &["a"], &["p", "q"]);
        assert_eq!(adapter.generate_query(&card).unwrap(), "cardiac risk cohort");
    }
}
