//! Certainty scoring for explanation response sets.
//!
//! The certainty of a set of n sampled explanations is the mean similarity
//! over all n(n-1)/2 unordered pairs, under either cosine similarity of text
//! embeddings or lexical ROUGE-L. The response with the highest mean
//! similarity to the others is displayed when certainty reaches the
//! threshold; otherwise the fixed sentinel is shown.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explainers::ResponseSet;
use crate::net::{self, NetError};
use crate::nlgmetrics::{self, hash_token, MetricsError, TokenEmbedder, EMBED_DIM};

/// Exact sentinel displayed for suppressed explanations.
pub const NO_CLEAR_EXPLANATION: &str = "No clear explanation";

/// Environment variable holding the bearer token for remote providers.
pub const API_KEY_ENV: &str = "LATENTLENS_API_KEY";

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("API key missing: set {0}")]
    AuthMissing(String),
    #[error("embeddings endpoint returned HTTP {status} after {attempts} attempts")]
    Http { status: u16, attempts: u32 },
    #[error("embeddings request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("embeddings response malformed: {0}")]
    MalformedResponse(String),
    #[error("text has no tokens after tokenization")]
    EmptyTextAfterTokenization,
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("certainty needs at least two responses, got {0}")]
    TooFewResponses(usize),
    #[error("cosine certainty requires an embedding provider")]
    ProviderRequired,
}

impl From<NetError> for SimilarityError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Http { status, attempts } => SimilarityError::Http { status, attempts },
            NetError::Timeout => SimilarityError::Timeout,
            NetError::Transport(message) => SimilarityError::Transport(message),
            NetError::MalformedBody(m) => SimilarityError::MalformedResponse(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityKind {
    #[serde(rename = "cosine_embedding")]
    CosineEmbedding,
    #[serde(rename = "lexical_rougeL")]
    LexicalRougeL,
}

impl SimilarityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::CosineEmbedding => "cosine_embedding",
            SimilarityKind::LexicalRougeL => "lexical_rougeL",
        }
    }

    /// Table label matching the similarity measure's common name.
    pub fn display_name(self) -> &'static str {
        match self {
            SimilarityKind::CosineEmbedding => "cosine similarity",
            SimilarityKind::LexicalRougeL => "lexical similarity",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub provider_label: String,
}

/// Embeds whole texts; set-scoped statistics (like IDF) are computed over
/// exactly the texts passed to one `embed_set` call.
pub trait EmbeddingProvider {
    fn label(&self) -> &str;
    fn embed_set(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SimilarityError>;
}

/// Embeds a single text through a provider.
pub fn embed(
    provider: &dyn EmbeddingProvider,
    text: &str,
) -> Result<EmbeddingVector, SimilarityError> {
    let texts = [text.to_string()];
    Ok(provider.embed_set(&texts)?.remove(0))
}

/// Offline embedding fallback: hashed bag-of-words with TF-IDF weighting
/// over a 2^15-dimension vocabulary, L2-normalized. IDF is computed over the
/// response set in scope with smoothing `ln((n+1)/(df+1)) + 1`.
#[derive(Debug, Default, Clone, Copy)]
pub struct LocalTfIdfEmbedder;

impl EmbeddingProvider for LocalTfIdfEmbedder {
    fn label(&self) -> &str {
        "local-tfidf"
    }

    fn embed_set(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SimilarityError> {
        let token_lists: Vec<Vec<String>> =
            texts.iter().map(|t| nlgmetrics::tokenize(t)).collect();
        if token_lists.iter().any(Vec::is_empty) {
            return Err(SimilarityError::EmptyTextAfterTokenization);
        }
        let n = texts.len() as f64;
        let mut document_frequency: HashMap<usize, f64> = HashMap::new();
        for tokens in &token_lists {
            let mut buckets: Vec<usize> = tokens
                .iter()
                .map(|t| (hash_token(t) % EMBED_DIM as u64) as usize)
                .collect();
            buckets.sort_unstable();
            buckets.dedup();
            for b in buckets {
                *document_frequency.entry(b).or_insert(0.0) += 1.0;
            }
        }
        Ok(token_lists
            .iter()
            .map(|tokens| {
                let mut values = vec![0.0; EMBED_DIM];
                for t in tokens {
                    let bucket = (hash_token(t) % EMBED_DIM as u64) as usize;
                    let idf = ((n + 1.0) / (document_frequency[&bucket] + 1.0)).ln() + 1.0;
                    values[bucket] += idf;
                }
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in &mut values {
                    *v /= norm;
                }
                EmbeddingVector {
                    values,
                    provider_label: "local-tfidf".to_string(),
                }
            })
            .collect())
    }
}

/// Remote embeddings over an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub model: String,
    pub timeout_s: f64,
    pub max_retries: u32,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout_s: 30.0,
            max_retries: 3,
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn label(&self) -> &str {
        &self.model
    }

    fn embed_set(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, SimilarityError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(SimilarityError::EmptyTextAfterTokenization);
        }
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| SimilarityError::AuthMissing(API_KEY_ENV.to_string()))?;
        let agent = ureq::AgentBuilder::new()
            .timeout(std::time::Duration::from_secs_f64(self.timeout_s))
            .build();
        let url = format!("{}/embeddings", self.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let outcome = net::post_json(&agent, &url, Some(&key), &body, self.max_retries)?;

        let data = outcome.value["data"]
            .as_array()
            .ok_or_else(|| SimilarityError::MalformedResponse("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(SimilarityError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (fallback_index, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map_or(fallback_index, |i| i as usize);
            let values = item["embedding"]
                .as_array()
                .ok_or_else(|| {
                    SimilarityError::MalformedResponse("missing embedding array".into())
                })?
                .iter()
                .map(|v| v.as_f64().unwrap_or(f64::NAN))
                .collect::<Vec<f64>>();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(SimilarityError::MalformedResponse(
                    "non-numeric embedding entry".into(),
                ));
            }
            indexed.push((index, values));
        }
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed
            .into_iter()
            .map(|(_, values)| EmbeddingVector {
                values,
                provider_label: self.model.clone(),
            })
            .collect())
    }
}

impl TokenEmbedder for RemoteEmbedder {
    fn label(&self) -> &str {
        &self.model
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricsError> {
        self.embed_set(tokens)
            .map(|vs| vs.into_iter().map(|v| v.values).collect())
            .map_err(|e| MetricsError::Embedding(e.to_string()))
    }
}

/// Cosine similarity of two equal-length nonzero vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::LengthMismatch(u.len(), v.len()));
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Lexical similarity: ROUGE-L F1 over token sequences.
pub fn lexical_sim(a: &str, b: &str) -> f64 {
    nlgmetrics::rouge_l(&nlgmetrics::tokenize(a), &nlgmetrics::tokenize(b))
}

/// Pairwise similarity structure over one response set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyReport {
    pub sequence_id: String,
    pub similarity_kind: SimilarityKind,
    pub pairwise: Vec<Vec<f64>>,
    pub certainty: f64,
    pub per_response_mean: Vec<f64>,
    pub selected_index: usize,
}

/// Builds a certainty report from a pair-similarity callback, evaluating
/// each of the n(n-1)/2 unordered pairs exactly once.
pub fn certainty_with_sim<F>(
    sequence_id: &str,
    responses: &[String],
    kind: SimilarityKind,
    mut sim: F,
) -> Result<CertaintyReport, SimilarityError>
where
    F: FnMut(usize, usize) -> Result<f64, SimilarityError>,
{
    let n = responses.len();
    if n < 2 {
        return Err(SimilarityError::TooFewResponses(n));
    }
    let mut pairwise = vec![vec![0.0f64; n]; n];
    for (i, row) in pairwise.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let s = sim(i, j)?;
            pairwise[i][j] = s;
            pairwise[j][i] = s;
            sum += s;
        }
    }
    let pair_count = (n * (n - 1) / 2) as f64;
    let certainty = sum / pair_count;

    let per_response_mean: Vec<f64> = (0..n)
        .map(|i| {
            let row_sum: f64 = pairwise[i].iter().sum::<f64>() - 1.0;
            row_sum / (n - 1) as f64
        })
        .collect();
    let selected_index = per_response_mean
        .iter()
        .enumerate()
        .fold(0usize, |best, (i, &m)| {
            if m > per_response_mean[best] {
                i
            } else {
                best
            }
        });

    Ok(CertaintyReport {
        sequence_id: sequence_id.to_string(),
        similarity_kind: kind,
        pairwise,
        certainty,
        per_response_mean,
        selected_index,
    })
}

/// Scores a response set under the chosen similarity kind. Cosine certainty
/// needs an embedding provider; lexical certainty is self-contained.
pub fn certainty(
    responses: &ResponseSet,
    kind: SimilarityKind,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<CertaintyReport, SimilarityError> {
    certainty_of_texts(&responses.sequence_id, &responses.responses, kind, provider)
}

pub fn certainty_of_texts(
    sequence_id: &str,
    texts: &[String],
    kind: SimilarityKind,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<CertaintyReport, SimilarityError> {
    match kind {
        SimilarityKind::LexicalRougeL => {
            let token_lists: Vec<Vec<String>> =
                texts.iter().map(|t| nlgmetrics::tokenize(t)).collect();
            certainty_with_sim(sequence_id, texts, kind, |i, j| {
                Ok(nlgmetrics::rouge_l(&token_lists[i], &token_lists[j]))
            })
        }
        SimilarityKind::CosineEmbedding => {
            let provider = provider.ok_or(SimilarityError::ProviderRequired)?;
            let vectors = provider.embed_set(texts)?;
            certainty_with_sim(sequence_id, texts, kind, |i, j| {
                cosine(&vectors[i].values, &vectors[j].values)
            })
        }
    }
}

/// Boundary-inclusive display rule: the selected response at `certainty >=
/// epsilon`, the sentinel below.
pub fn select_explanation(
    report: &CertaintyReport,
    responses: &[String],
    epsilon: f64,
) -> String {
    if report.certainty >= epsilon {
        responses[report.selected_index].clone()
    } else {
        NO_CLEAR_EXPLANATION.to_string()
    }
}
