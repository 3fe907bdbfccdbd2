//! Reference-based generation metrics computed natively: corpus BLEU,
//! ROUGE-L, METEOR (exact + stemmed matching, no synonym stage), and a
//! greedy embedding-F1 score over a pluggable token embedder.
//!
//! Tokenization lowercases and keeps maximal runs of letters and digits;
//! punctuation is discarded. Multi-reference wrappers take the best score
//! over the references.

pub mod porter;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("candidate and reference lists differ in length ({candidates} vs {references})")]
    LengthMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("no sequence ids shared between explanations and annotations")]
    NoOverlap,
    #[error("text has no tokens after tokenization")]
    EmptyAfterTokenization,
    #[error("token embedding failed: {0}")]
    Embedding(String),
}

/// Lowercases and splits into maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// FNV-1a hash used by the hashed bag-of-words embedding spaces.
pub fn hash_token(token: &str) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Dimension of the hashed embedding spaces.
pub const EMBED_DIM: usize = 1 << 15;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        *counts.entry(window).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level BLEU with clipped n-gram precision for n = 1..=max_n, a
/// geometric mean, and the closest-reference brevity penalty. Any aggregate
/// precision of zero makes the whole score zero.
pub fn bleu_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    max_n: usize,
) -> Result<f64, MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    assert!(max_n >= 1);
    let mut clipped = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(MetricsError::LengthMismatch {
                candidates: candidates.len(),
                references: 0,
            });
        }
        candidate_len += cand.len();
        let closest = refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&len| (len.abs_diff(cand.len()), len))
            .expect("nonempty reference list");
        reference_len += closest;

        for n in 1..=max_n {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
            for (gram, &count) in &cand_counts {
                let best_ref = ref_counts
                    .iter()
                    .map(|rc| rc.get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped[n - 1] += count.min(best_ref);
                totals[n - 1] += count;
            }
        }
    }

    let mut log_sum = 0.0;
    for n in 0..max_n {
        if totals[n] == 0 || clipped[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped[n] as f64 / totals[n] as f64).ln();
    }
    let brevity = if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    Ok(brevity * (log_sum / max_n as f64).exp())
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L F1 between token sequences.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn rouge_l_multi(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| rouge_l(candidate, r))
        .fold(0.0, f64::max)
}

fn greedy_align(
    candidate: &[String],
    reference: &[String],
    key: impl Fn(&String) -> String,
    cand_matched: &mut [bool],
    ref_matched: &mut [bool],
    alignment: &mut Vec<(usize, usize)>,
) {
    let ref_keys: Vec<String> = reference.iter().map(&key).collect();
    for (ci, token) in candidate.iter().enumerate() {
        if cand_matched[ci] {
            continue;
        }
        let cand_key = key(token);
        for (ri, ref_key) in ref_keys.iter().enumerate() {
            if !ref_matched[ri] && *ref_key == cand_key {
                cand_matched[ci] = true;
                ref_matched[ri] = true;
                alignment.push((ci, ri));
                break;
            }
        }
    }
}

/// METEOR with two greedy alignment stages (exact, then Porter-stemmed), the
/// 10PR/(R+9P) harmonic mean, and the cubed chunk penalty.
pub fn meteor(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut cand_matched = vec![false; candidate.len()];
    let mut ref_matched = vec![false; reference.len()];
    let mut alignment = Vec::new();
    greedy_align(
        candidate,
        reference,
        |t| t.clone(),
        &mut cand_matched,
        &mut ref_matched,
        &mut alignment,
    );
    greedy_align(
        candidate,
        reference,
        |t| porter::stem(t),
        &mut cand_matched,
        &mut ref_matched,
        &mut alignment,
    );
    let matches = alignment.len();
    if matches == 0 {
        return 0.0;
    }
    let precision = matches as f64 / candidate.len() as f64;
    let recall = matches as f64 / reference.len() as f64;
    let f_mean = 10.0 * precision * recall / (recall + 9.0 * precision);

    alignment.sort_unstable();
    let mut chunks = 1usize;
    for pair in alignment.windows(2) {
        let (c0, r0) = pair[0];
        let (c1, r1) = pair[1];
        if c1 != c0 + 1 || r1 != r0 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    f_mean * (1.0 - penalty)
}

pub fn meteor_multi(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references
        .iter()
        .map(|r| meteor(candidate, r))
        .fold(0.0, f64::max)
}

/// Embeds tokens one at a time into a shared vector space.
pub trait TokenEmbedder {
    fn label(&self) -> &str;
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricsError>;
}

/// Offline token embedder: a one-hot vector at the token's hash bucket.
/// Cosine similarity between two tokens is 1 for equal hashes and 0
/// otherwise, so embedding-F1 reduces to exact-match overlap structure.
#[derive(Debug, Default, Clone, Copy)]
pub struct HashedTokenEmbedder;

impl TokenEmbedder for HashedTokenEmbedder {
    fn label(&self) -> &str {
        "local-hashed"
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, MetricsError> {
        Ok(tokens
            .iter()
            .map(|t| {
                let mut v = vec![0.0; EMBED_DIM];
                v[(hash_token(t) % EMBED_DIM as u64) as usize] = 1.0;
                v
            })
            .collect())
    }
}

fn cosine_or_zero(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu.sqrt() * nv.sqrt())
    }
}

/// Greedy-matching embedding F1: recall is the mean over reference tokens of
/// the best cosine against candidate tokens; precision is symmetric.
pub fn embed_f1(
    candidate: &[String],
    reference: &[String],
    embedder: &dyn TokenEmbedder,
) -> Result<f64, MetricsError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptyAfterTokenization);
    }
    let cand_vecs = embedder.embed_tokens(candidate)?;
    let ref_vecs = embedder.embed_tokens(reference)?;
    let best = |rows: &[Vec<f64>], cols: &[Vec<f64>]| -> f64 {
        rows.iter()
            .map(|r| cols.iter().map(|c| cosine_or_zero(r, c)).fold(f64::MIN, f64::max))
            .sum::<f64>()
            / rows.len() as f64
    };
    let recall = best(&ref_vecs, &cand_vecs);
    let precision = best(&cand_vecs, &ref_vecs);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn embed_f1_multi(
    candidate: &[String],
    references: &[Vec<String>],
    embedder: &dyn TokenEmbedder,
) -> Result<f64, MetricsError> {
    let mut best = 0.0f64;
    let mut any = false;
    for r in references.iter().filter(|r| !r.is_empty()) {
        any = true;
        best = best.max(embed_f1(candidate, r, embedder)?);
    }
    if !any || candidate.is_empty() {
        return Ok(0.0);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub embed_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sequence_id: String,
    pub rouge_l: f64,
    pub meteor: f64,
    pub embed_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub aggregate: MetricScores,
}

/// Scores every explanation that has reference annotations: sentence-level
/// ROUGE-L/METEOR/embedding-F1 (best over references) plus corpus BLEU over
/// the joined set.
pub fn evaluate_table(
    explanations: &BTreeMap<String, String>,
    annotations: &BTreeMap<String, Vec<String>>,
    embedder: &dyn TokenEmbedder,
) -> Result<EvalTable, MetricsError> {
    let ids: BTreeSet<&String> = explanations
        .keys()
        .filter(|id| annotations.get(*id).is_some_and(|refs| !refs.is_empty()))
        .collect();
    if ids.is_empty() {
        return Err(MetricsError::NoOverlap);
    }

    let mut rows = Vec::with_capacity(ids.len());
    let mut candidates = Vec::with_capacity(ids.len());
    let mut references = Vec::with_capacity(ids.len());
    for id in &ids {
        let cand = tokenize(&explanations[*id]);
        let refs: Vec<Vec<String>> = annotations[*id].iter().map(|r| tokenize(r)).collect();
        rows.push(EvalRow {
            sequence_id: (*id).clone(),
            rouge_l: rouge_l_multi(&cand, &refs),
            meteor: meteor_multi(&cand, &refs),
            embed_f1: embed_f1_multi(&cand, &refs, embedder)?,
        });
        candidates.push(cand);
        references.push(refs);
    }
    let bleu = bleu_corpus(&candidates, &references, 4)?;
    let n = rows.len() as f64;
    let aggregate = MetricScores {
        bleu,
        rouge_l: rows.iter().map(|r| r.rouge_l).sum::<f64>() / n,
        meteor: rows.iter().map(|r| r.meteor).sum::<f64>() / n,
        embed_f1: rows.iter().map(|r| r.embed_f1).sum::<f64>() / n,
    };
    Ok(EvalTable { rows, aggregate })
}
