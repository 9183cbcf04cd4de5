//! A small HTTP server exposing the mock providers over the same
//! OpenAI-compatible surface the live gateway speaks, for demos and for
//! exercising the HTTP path without external credentials.
//!
//! Requests are routed by model name: POST `/v1/chat/completions` and
//! POST `/v1/embeddings` with a `model` the registry knows.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;

use crate::config::PipelineConfig;

use super::mock::{MockEmbedder, MockStudent, MockTeacher, DEFAULT_MOCK_EMBED_DIM};
use super::{ChatBackend, EmbedBackend};

/// Mock backends routable by model name.
#[derive(Default, Clone)]
pub struct MockRegistry {
    chat: BTreeMap<String, Arc<dyn ChatBackend>>,
    embed: BTreeMap<String, Arc<dyn EmbedBackend>>,
}

impl MockRegistry {
    /// Builds one mock backend per provider in the config, mocking live
    /// roles so any config can be served.
    pub fn from_config(config: &PipelineConfig) -> Self {
        let mut registry = MockRegistry::default();
        for spec in &config.providers {
            let seed = spec.effective_seed(config.seed);
            let role = spec.role.mocked();
            if role.is_teacher() {
                registry.chat.insert(
                    spec.model.clone(),
                    Arc::new(MockTeacher::new(seed, config.factor_weights.clone())),
                );
            } else if role.is_student() {
                registry
                    .chat
                    .insert(spec.model.clone(), Arc::new(MockStudent::new(seed)));
            } else if role.is_embedder() {
                registry.embed.insert(
                    spec.model.clone(),
                    Arc::new(MockEmbedder::new(
                        seed,
                        spec.embedding_dimension.unwrap_or(DEFAULT_MOCK_EMBED_DIM),
                    )),
                );
            }
        }
        registry
    }
}

/// Running server handle; shuts down on `stop` or drop.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds (use port 0 for an ephemeral port) and starts serving.
    pub fn start(registry: MockRegistry, bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let stop = shutdown.clone();
        let join = std::thread::spawn(move || {
            let registry = Arc::new(registry);
            loop {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let registry = registry.clone();
                        std::thread::spawn(move || handle_connection(stream, &registry));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        if stop.load(Ordering::Relaxed) {
                            break;
                        }
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });
        Ok(Self {
            addr,
            shutdown,
            join: Some(join),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to use as a provider endpoint.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_inner();
    }

    fn shutdown_inner(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.shutdown_inner();
    }
}

fn handle_connection(mut stream: TcpStream, registry: &MockRegistry) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let Some((path, body)) = read_request(&mut stream) else {
        respond(&mut stream, 400, &error_body("malformed request"));
        return;
    };
    let parsed: serde_json::Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => {
            respond(&mut stream, 400, &error_body(&format!("bad json: {e}")));
            return;
        }
    };
    let model = parsed["model"].as_str().unwrap_or_default().to_string();

    if path.ends_with("/chat/completions") {
        let Some(backend) = registry.chat.get(&model) else {
            respond(&mut stream, 404, &error_body(&format!("unknown model `{model}`")));
            return;
        };
        let prompt = parsed["messages"]
            .as_array()
            .and_then(|ms| ms.last())
            .and_then(|m| m["content"].as_str())
            .unwrap_or_default();
        match backend.complete(prompt) {
            Ok(reply) => {
                let tokens = reply.completion_tokens.unwrap_or(0);
                let mut choice = json!({
                    "index": 0,
                    "message": {"role": "assistant", "content": reply.raw_text},
                    "finish_reason": "stop",
                });
                if let Some(lp) = reply.mean_logprob {
                    choice["logprobs"] = json!({"content": [{"logprob": lp}]});
                }
                let body = json!({
                    "id": "mock-completion",
                    "object": "chat.completion",
                    "model": model,
                    "choices": [choice],
                    "usage": {"prompt_tokens": 0, "completion_tokens": tokens, "total_tokens": tokens},
                });
                respond(&mut stream, 200, &body);
            }
            Err(e) => respond(&mut stream, 500, &error_body(&e.to_string())),
        }
    } else if path.ends_with("/embeddings") {
        let Some(backend) = registry.embed.get(&model) else {
            respond(&mut stream, 404, &error_body(&format!("unknown model `{model}`")));
            return;
        };
        let texts: Vec<String> = match &parsed["input"] {
            serde_json::Value::String(s) => vec![s.clone()],
            serde_json::Value::Array(items) => items
                .iter()
                .filter_map(|x| x.as_str().map(str::to_string))
                .collect(),
            _ => Vec::new(),
        };
        match backend.embed_batch(&texts) {
            Ok(vectors) => {
                let data: Vec<_> = vectors
                    .iter()
                    .enumerate()
                    .map(|(i, v)| json!({"object": "embedding", "index": i, "embedding": v}))
                    .collect();
                let body = json!({"object": "list", "model": model, "data": data});
                respond(&mut stream, 200, &body);
            }
            Err(e) => respond(&mut stream, 500, &error_body(&e.to_string())),
        }
    } else {
        respond(&mut stream, 404, &error_body(&format!("unknown path `{path}`")));
    }
}

fn error_body(message: &str) -> serde_json::Value {
    json!({"error": {"message": message, "type": "mock_server_error"}})
}

/// Reads one HTTP/1.1 request; returns (path, body).
fn read_request(stream: &mut TcpStream) -> Option<(String, Vec<u8>)> {
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 1024];
    let header_end = loop {
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
        if buf.len() > 64 * 1024 {
            return None;
        }
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
    };

    let header_text = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let mut lines = header_text.lines();
    let request_line = lines.next()?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next()?;
    let path = parts.next()?.to_string();
    if method != "POST" {
        return None;
    }
    let content_length: usize = lines
        .filter_map(|l| l.split_once(':'))
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.trim().parse().ok())
        .unwrap_or(0);

    let mut body = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    body.truncate(content_length);
    Some((path, body))
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

fn respond(stream: &mut TcpStream, status: u16, body: &serde_json::Value) {
    let text = body.to_string();
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Internal Server Error",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}
