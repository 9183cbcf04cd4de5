//! The HTTP path: live providers pointed at the mock server must behave
//! exactly like the in-process mocks, and the retry policy must hold.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use distillery_core::config::{
    PipelineConfig, ProviderRole, ProviderSpec, RequestParams,
};
use distillery_core::embed::embed;
use distillery_core::gateway::server::{MockRegistry, MockServer};
use distillery_core::gateway::{
    generate_annotations, EmbeddingProvider, GatewayError, PromptTemplate, Provider,
};
use distillery_core::model::{Query, TaskKind};

fn spec(id: &str, role: ProviderRole, endpoint: &str) -> ProviderSpec {
    ProviderSpec {
        id: id.to_string(),
        role,
        endpoint: endpoint.to_string(),
        model: format!("mock-{id}"),
        auth_env: None,
        request_params: RequestParams::default(),
        max_concurrency: 2,
        max_retries: 2,
        seed: Some(99),
        embedding_dimension: Some(16),
    }
}

fn queries(n: usize) -> Vec<Query> {
    (0..n)
        .map(|i| Query {
            id: format!("q{i:02}"),
            text: format!("implement behavior {i}"),
            task_kind: TaskKind::CodeGeneration,
            aux: None,
        })
        .collect()
}

#[test]
fn http_annotations_match_in_process_mocks() {
    let config = PipelineConfig {
        seed: 5,
        providers: vec![
            spec("t1", ProviderRole::MockTeacher, ""),
            spec("e1", ProviderRole::MockEmbedder, ""),
        ],
        ..PipelineConfig::default()
    };
    let server = MockServer::start(MockRegistry::from_config(&config), "127.0.0.1:0").unwrap();
    let base = server.base_url();

    let template =
        PromptTemplate::new("generation", &config.prompts.generation).unwrap();
    let qs = queries(3);

    let in_process =
        Provider::from_spec(&spec("t1", ProviderRole::MockTeacher, ""), &config, None, None)
            .unwrap();
    let (local, local_failures) =
        generate_annotations(&qs, &[in_process], &template, &config);
    assert!(local_failures.is_empty());

    let over_http =
        Provider::from_spec(&spec("t1", ProviderRole::Teacher, &base), &config, None, None)
            .unwrap();
    let (remote, remote_failures) =
        generate_annotations(&qs, &[over_http], &template, &config);
    assert!(remote_failures.is_empty(), "{remote_failures:?}");

    assert_eq!(local.len(), remote.len());
    for (a, b) in local.iter().zip(&remote) {
        assert_eq!(a.raw_text, b.raw_text);
        assert_eq!(a.confidence, b.confidence);
        assert_eq!(a.label, b.label);
        assert_eq!(a.completion_tokens, b.completion_tokens);
        assert_eq!(a.mean_logprob, b.mean_logprob);
    }

    // embeddings over HTTP match the in-process embedder too
    let texts: Vec<String> = local.iter().map(|a| a.rationale.clone()).collect();
    let local_embedder = EmbeddingProvider::from_spec(
        &spec("e1", ProviderRole::MockEmbedder, ""),
        &config,
        None,
        None,
    )
    .unwrap();
    let remote_embedder = EmbeddingProvider::from_spec(
        &spec("e1", ProviderRole::Embedder, &base),
        &config,
        None,
        None,
    )
    .unwrap();
    let local_vecs = embed(&texts, &local_embedder).unwrap();
    let remote_vecs = embed(&texts, &remote_embedder).unwrap();
    assert_eq!(local_vecs.len(), remote_vecs.len());
    for (u, v) in local_vecs.iter().zip(&remote_vecs) {
        assert_eq!(u.dimension, 16);
        for (a, b) in u.vector.iter().zip(&v.vector) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    server.stop();
}

/// A bare server that fails with the given statuses before succeeding.
fn flaky_server(fail_statuses: Vec<u16>) -> (String, Arc<AtomicU32>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicU32::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut buf = [0u8; 8192];
            let mut total = Vec::new();
            loop {
                match stream.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => {
                        total.extend_from_slice(&buf[..n]);
                        if let Some(pos) = total.windows(4).position(|w| w == b"\r\n\r\n") {
                            let headers = String::from_utf8_lossy(&total[..pos]).to_string();
                            let need: usize = headers
                                .lines()
                                .filter_map(|l| l.split_once(':'))
                                .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                                .and_then(|(_, v)| v.trim().parse().ok())
                                .unwrap_or(0);
                            if total.len() >= pos + 4 + need {
                                break;
                            }
                        }
                    }
                    Err(_) => break,
                }
            }
            let attempt = counter.fetch_add(1, Ordering::SeqCst) as usize;
            let response = if attempt < fail_statuses.len() {
                let status = fail_statuses[attempt];
                format!("HTTP/1.1 {status} X\r\nContent-Length: 2\r\nConnection: close\r\n\r\n{{}}")
            } else {
                let body = serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": "ok"}}],
                    "usage": {"completion_tokens": 1}
                })
                .to_string();
                format!(
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
            };
            let _ = stream.write_all(response.as_bytes());
        }
    });
    (format!("http://{addr}/v1"), hits)
}

#[test]
fn retries_recover_from_transient_failures() {
    // two failures then success fits within max_retries = 2 (3 attempts)
    let (base, hits) = flaky_server(vec![500, 429]);
    let teacher =
        Provider::from_spec(&spec("t1", ProviderRole::Teacher, &base), &PipelineConfig::default(), None, None)
            .unwrap();
    let reply = teacher.complete_cached("Task: anything").unwrap();
    assert_eq!(reply.raw_text, "ok");
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn rate_limit_surfaces_after_retries_exhausted() {
    let (base, hits) = flaky_server(vec![429, 429, 429, 429, 429]);
    let teacher =
        Provider::from_spec(&spec("t1", ProviderRole::Teacher, &base), &PipelineConfig::default(), None, None)
            .unwrap();
    let err = teacher.complete_cached("Task: anything").unwrap_err();
    assert!(
        matches!(err, GatewayError::RateLimited { attempts: 3, .. }),
        "{err}"
    );
    // at most max_retries + 1 attempts
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn non_retryable_status_fails_fast() {
    let (base, hits) = flaky_server(vec![401, 401, 401]);
    let teacher =
        Provider::from_spec(&spec("t1", ProviderRole::Teacher, &base), &PipelineConfig::default(), None, None)
            .unwrap();
    let err = teacher.complete_cached("Task: anything").unwrap_err();
    assert!(matches!(err, GatewayError::Transport { attempts: 1, .. }), "{err}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}
