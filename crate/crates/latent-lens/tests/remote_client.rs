//! Remote-client behavior against a local stub server: request schema,
//! authentication, retry-after-429, retry exhaustion, malformed bodies, and
//! timeouts. Tests share one process-wide environment lock because the API
//! key lives in an environment variable.

mod common;

use std::sync::Mutex;

use common::{chat_completion_body, StubServer, StubStep};
use latent_lens::dataset::ImageSample;
use latent_lens::explainers::{
    build_prompt, sample_responses, ExplainError, ExplainerConfig, PromptTemplate,
};
use latent_lens::similarity::{
    EmbeddingProvider, RemoteEmbedder, SimilarityError, API_KEY_ENV,
};
use latent_lens::traversal::{LatentVector, TraversalSequence, TraversalSpec};

static ENV_LOCK: Mutex<()> = Mutex::new(());

fn with_api_key<T>(key: Option<&str>, f: impl FnOnce() -> T) -> T {
    let _guard = ENV_LOCK.lock().unwrap();
    match key {
        Some(k) => std::env::set_var(API_KEY_ENV, k),
        None => std::env::remove_var(API_KEY_ENV),
    }
    let result = f();
    std::env::remove_var(API_KEY_ENV);
    result
}

fn tiny_sequence() -> TraversalSequence {
    let frame = ImageSample::new(vec![0.25; 16], 4, 4);
    TraversalSequence {
        spec: TraversalSpec::new(LatentVector::new(vec![0.0]), 0),
        assigned_values: vec![0.0, 1.0],
        frames: vec![frame.clone(), frame],
        sequence_id: "seq-test".to_string(),
    }
}

fn config_for(server: &StubServer, n: usize, max_retries: u32) -> ExplainerConfig {
    ExplainerConfig {
        backend: latent_lens::explainers::BackendKind::Remote,
        endpoint: server.addr.clone(),
        model_name: "stub-model".to_string(),
        samples_n: n,
        timeout_s: 5.0,
        max_retries,
        in_flight_limit: 1,
        ..ExplainerConfig::default()
    }
}

#[test]
fn request_schema_carries_auth_image_and_sampling_knobs() {
    let server = StubServer::start(vec![StubStep::Respond(
        200,
        chat_completion_body("The shape moves right."),
    )]);
    let (prompt, image) = build_prompt(&PromptTemplate::default(), &tiny_sequence()).unwrap();
    let config = config_for(&server, 2, 0);

    let samples = with_api_key(Some("test-key"), || {
        sample_responses(&config, "seq-test", &prompt, &image).unwrap()
    });

    assert_eq!(samples.set.responses.len(), 2);
    assert!(samples
        .set
        .responses
        .iter()
        .all(|r| r == "The shape moves right."));
    assert_eq!(samples.attempts, vec![1, 1]);

    let requests = server.requests();
    assert_eq!(requests.len(), 2);
    for request in &requests {
        assert!(request.request_line.starts_with("POST /chat/completions"));
        assert_eq!(request.header("authorization"), Some("Bearer test-key"));
        assert_eq!(request.header("content-type"), Some("application/json"));
        let body = request.json();
        assert_eq!(body["model"], "stub-model");
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["top_p"], 1.0);
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[0]["text"].as_str().unwrap(), prompt);
        assert_eq!(content[1]["type"], "image_url");
        let url = content[1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }
}

#[test]
fn missing_api_key_fails_before_any_request() {
    let server = StubServer::start(vec![StubStep::Respond(
        200,
        chat_completion_body("unused"),
    )]);
    let (prompt, image) = build_prompt(&PromptTemplate::default(), &tiny_sequence()).unwrap();
    let config = config_for(&server, 2, 0);

    let err = with_api_key(None, || {
        sample_responses(&config, "seq-test", &prompt, &image).unwrap_err()
    });
    assert!(matches!(err, ExplainError::AuthMissing(_)));
    assert!(server.requests().is_empty());
}

#[test]
fn rate_limited_twice_then_succeeds_after_two_retries() {
    let server = StubServer::start(vec![
        StubStep::Respond(429, r#"{"error": "slow down"}"#.to_string()),
        StubStep::Respond(429, r#"{"error": "slow down"}"#.to_string()),
        StubStep::Respond(200, chat_completion_body("Recovered answer.")),
    ]);
    let (prompt, image) = build_prompt(&PromptTemplate::default(), &tiny_sequence()).unwrap();
    let config = config_for(&server, 2, 3);

    let samples = with_api_key(Some("k"), || {
        sample_responses(&config, "seq-test", &prompt, &image).unwrap()
    });
    // First request consumed the two 429s; attempt counts are recorded per
    // request index.
    assert_eq!(samples.attempts[0], 3);
    assert_eq!(samples.attempts[1], 1);
    assert_eq!(samples.set.responses[0], "Recovered answer.");
    assert_eq!(server.requests().len(), 4);
}

#[test]
fn retries_exhaust_into_http_error_with_bounded_attempts() {
    let server = StubServer::start(vec![StubStep::Respond(
        503,
        r#"{"error": "down"}"#.to_string(),
    )]);
    let (prompt, image) = build_prompt(&PromptTemplate::default(), &tiny_sequence()).unwrap();
    let config = config_for(&server, 2, 2);

    let err = with_api_key(Some("k"), || {
        sample_responses(&config, "seq-test", &prompt, &image).unwrap_err()
    });
    match err {
        ExplainError::Http { status, attempts } => {
            assert_eq!(status, 503);
            assert_eq!(attempts, 3); // max_retries + 1
        }
        other => panic!("expected Http error, got {other:?}"),
    }
    // The first request slot used exactly max_retries + 1 attempts.
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn non_retryable_status_fails_immediately() {
    let server = StubServer::start(vec![StubStep::Respond(
        401,
        r#"{"error": "bad key"}"#.to_string(),
    )]);
    let (prompt, image) = build_prompt(&PromptTemplate::default(), &tiny_sequence()).unwrap();
    let config = config_for(&server, 2, 5);

    let err = with_api_key(Some("k"), || {
        sample_responses(&config, "seq-test", &prompt, &image).unwrap_err()
    });
    match err {
        ExplainError::Http { status, attempts } => {
            assert_eq!(status, 401);
            assert_eq!(attempts, 1);
        }
        other => panic!("expected Http error, got {other:?}"),
    }
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn missing_message_content_is_malformed() {
    let server = StubServer::start(vec![StubStep::Respond(
        200,
        r#"{"choices": [{"message": {"role": "assistant"}}]}"#.to_string(),
    )]);
    let (prompt, image) = build_prompt(&PromptTemplate::default(), &tiny_sequence()).unwrap();
    let config = config_for(&server, 2, 0);

    let err = with_api_key(Some("k"), || {
        sample_responses(&config, "seq-test", &prompt, &image).unwrap_err()
    });
    assert!(matches!(err, ExplainError::MalformedResponse));
}

#[test]
fn stalled_socket_times_out() {
    let server = StubServer::start(vec![StubStep::Stall(3_000)]);
    let (prompt, image) = build_prompt(&PromptTemplate::default(), &tiny_sequence()).unwrap();
    let mut config = config_for(&server, 2, 0);
    config.timeout_s = 0.3;

    let err = with_api_key(Some("k"), || {
        sample_responses(&config, "seq-test", &prompt, &image).unwrap_err()
    });
    assert!(
        matches!(err, ExplainError::Timeout | ExplainError::Transport(_)),
        "got {err:?}"
    );
}

#[test]
fn remote_embedder_posts_batches_and_orders_by_index() {
    let body = serde_json::json!({
        "data": [
            { "index": 1, "embedding": [0.0, 1.0] },
            { "index": 0, "embedding": [1.0, 0.0] }
        ]
    })
    .to_string();
    let server = StubServer::start(vec![StubStep::Respond(200, body)]);
    let embedder = RemoteEmbedder::new(server.addr.clone(), "embed-model");

    let vectors = with_api_key(Some("k"), || {
        embedder
            .embed_set(&["first".to_string(), "second".to_string()])
            .unwrap()
    });
    assert_eq!(vectors[0].values, vec![1.0, 0.0]);
    assert_eq!(vectors[1].values, vec![0.0, 1.0]);

    let requests = server.requests();
    assert_eq!(requests.len(), 1);
    assert!(requests[0].request_line.starts_with("POST /embeddings"));
    let body = requests[0].json();
    assert_eq!(body["model"], "embed-model");
    assert_eq!(body["input"][0], "first");
    assert_eq!(body["input"][1], "second");
}

#[test]
fn remote_embedder_rejects_malformed_payloads() {
    let server = StubServer::start(vec![StubStep::Respond(
        200,
        r#"{"data": "not an array"}"#.to_string(),
    )]);
    let embedder = RemoteEmbedder::new(server.addr.clone(), "embed-model");
    let err = with_api_key(Some("k"), || {
        embedder.embed_set(&["text".to_string()]).unwrap_err()
    });
    assert!(matches!(err, SimilarityError::MalformedResponse(_)));
}
