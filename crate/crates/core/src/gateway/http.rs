//! OpenAI-compatible HTTP backends for chat completions and embeddings.
//!
//! Retry policy: at most `max_retries + 1` attempts per request; 429 and
//! 5xx responses and transport failures are retried with exponentially
//! increasing delays, other statuses fail immediately.

use std::time::Duration;

use serde_json::json;
use ureq::Agent;

use crate::config::ProviderSpec;

use super::{ChatBackend, EmbedBackend, GatewayError, ProviderReply};

const BACKOFF_BASE_MS: u64 = 200;

fn backoff_delay(attempt: u32) -> Duration {
    Duration::from_millis(BACKOFF_BASE_MS << (attempt - 1).min(8))
}

fn build_agent() -> Agent {
    Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(300)))
        .build()
        .into()
}

fn auth_token(spec: &ProviderSpec) -> Result<Option<String>, GatewayError> {
    match &spec.auth_env {
        None => Ok(None),
        Some(var) => match std::env::var(var) {
            Ok(tok) => Ok(Some(tok)),
            Err(_) => Err(GatewayError::Transport {
                provider: spec.id.clone(),
                attempts: 0,
                message: format!("auth environment variable `{var}` is not set"),
            }),
        },
    }
}

/// Reads a response body as JSON, truncating it for error messages.
fn snippet(v: &str) -> String {
    let mut s: String = v.chars().take(200).collect();
    if s.len() < v.len() {
        s.push_str("...");
    }
    s
}

enum Outcome {
    Done(serde_json::Value),
    Retry(String),
    RateLimited,
    Fail(String),
}

fn post_json(
    agent: &Agent,
    url: &str,
    token: Option<&str>,
    body: &serde_json::Value,
) -> Outcome {
    let mut req = agent.post(url);
    if let Some(tok) = token {
        req = req.header("authorization", &format!("Bearer {tok}"));
    }
    match req.send_json(body) {
        Ok(mut resp) => {
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .unwrap_or_else(|e| format!("<unreadable body: {e}>"));
            if (200..300).contains(&status) {
                match serde_json::from_str(&text) {
                    Ok(v) => Outcome::Done(v),
                    Err(e) => Outcome::Fail(format!("bad json body: {e}: {}", snippet(&text))),
                }
            } else if status == 429 {
                Outcome::RateLimited
            } else if (500..600).contains(&status) {
                Outcome::Retry(format!("http {status}: {}", snippet(&text)))
            } else {
                Outcome::Fail(format!("http {status}: {}", snippet(&text)))
            }
        }
        Err(e) => Outcome::Retry(format!("transport: {e}")),
    }
}

/// Runs the shared retry loop around one POST.
fn post_with_retries(
    spec: &ProviderSpec,
    agent: &Agent,
    url: &str,
    body: &serde_json::Value,
) -> Result<serde_json::Value, GatewayError> {
    let token = auth_token(spec)?;
    let attempts = spec.max_retries + 1;
    let mut rate_limited = false;
    let mut last_message = String::new();
    for attempt in 1..=attempts {
        if attempt > 1 {
            std::thread::sleep(backoff_delay(attempt - 1));
        }
        match post_json(agent, url, token.as_deref(), body) {
            Outcome::Done(v) => return Ok(v),
            Outcome::Fail(message) => {
                return Err(GatewayError::Transport {
                    provider: spec.id.clone(),
                    attempts: attempt,
                    message,
                })
            }
            Outcome::RateLimited => {
                rate_limited = true;
                last_message = "http 429".to_string();
            }
            Outcome::Retry(message) => {
                rate_limited = false;
                last_message = message;
            }
        }
    }
    if rate_limited {
        Err(GatewayError::RateLimited {
            provider: spec.id.clone(),
            attempts,
        })
    } else {
        Err(GatewayError::Transport {
            provider: spec.id.clone(),
            attempts,
            message: last_message,
        })
    }
}

fn endpoint_url(spec: &ProviderSpec, path: &str) -> String {
    format!("{}/{}", spec.endpoint.trim_end_matches('/'), path)
}

/// Chat completion client for one provider.
pub struct HttpChat {
    spec: ProviderSpec,
    agent: Agent,
}

impl HttpChat {
    pub fn new(spec: ProviderSpec) -> Self {
        Self {
            spec,
            agent: build_agent(),
        }
    }
}

impl ChatBackend for HttpChat {
    fn complete(&self, prompt: &str) -> Result<ProviderReply, GatewayError> {
        let body = json!({
            "model": self.spec.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.spec.request_params.temperature,
            "max_tokens": self.spec.request_params.max_tokens,
            "top_p": self.spec.request_params.top_p,
        });
        let url = endpoint_url(&self.spec, "chat/completions");
        let v = post_with_retries(&self.spec, &self.agent, &url, &body)?;

        let raw_text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::Transport {
                provider: self.spec.id.clone(),
                attempts: 1,
                message: "response missing choices[0].message.content".to_string(),
            })?
            .to_string();
        let completion_tokens = v["usage"]["completion_tokens"].as_u64().map(|n| n as usize);
        let mean_logprob = v["choices"][0]["logprobs"]["content"]
            .as_array()
            .and_then(|entries| {
                let lps: Vec<f64> = entries
                    .iter()
                    .filter_map(|e| e["logprob"].as_f64())
                    .collect();
                if lps.is_empty() {
                    None
                } else {
                    Some(lps.iter().sum::<f64>() / lps.len() as f64)
                }
            });
        Ok(ProviderReply {
            raw_text,
            completion_tokens,
            mean_logprob,
        })
    }
}

/// Embeddings client for one provider.
pub struct HttpEmbed {
    spec: ProviderSpec,
    agent: Agent,
}

impl HttpEmbed {
    pub fn new(spec: ProviderSpec) -> Self {
        Self {
            spec,
            agent: build_agent(),
        }
    }
}

impl EmbedBackend for HttpEmbed {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let body = json!({
            "model": self.spec.model,
            "input": texts,
        });
        let url = endpoint_url(&self.spec, "embeddings");
        let v = post_with_retries(&self.spec, &self.agent, &url, &body)?;

        let data = v["data"].as_array().ok_or_else(|| GatewayError::Transport {
            provider: self.spec.id.clone(),
            attempts: 1,
            message: "response missing data array".to_string(),
        })?;
        let mut indexed: Vec<(usize, Vec<f32>)> = Vec::with_capacity(data.len());
        for (pos, entry) in data.iter().enumerate() {
            let idx = entry["index"].as_u64().map(|n| n as usize).unwrap_or(pos);
            let vector = entry["embedding"]
                .as_array()
                .map(|xs| xs.iter().filter_map(|x| x.as_f64().map(|f| f as f32)).collect())
                .unwrap_or_default();
            indexed.push((idx, vector));
        }
        indexed.sort_by_key(|(idx, _)| *idx);
        let vectors: Vec<Vec<f32>> = indexed.into_iter().map(|(_, v)| v).collect();
        if vectors.len() != texts.len() {
            return Err(GatewayError::Transport {
                provider: self.spec.id.clone(),
                attempts: 1,
                message: format!(
                    "embedding count {} does not match input count {}",
                    vectors.len(),
                    texts.len()
                ),
            });
        }
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_strictly_increases() {
        let delays: Vec<_> = (1..6).map(backoff_delay).collect();
        for pair in delays.windows(2) {
            assert!(pair[1] > pair[0], "{pair:?}");
        }
    }
}
