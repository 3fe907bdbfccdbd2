//! Shared HTTP plumbing for the remote explainer and embedding providers:
//! POST a JSON body and retry transient failures (408/429/5xx and transport
//! errors) with capped exponential backoff.

use std::time::Duration;

use crate::rng::SplitMix64;

#[derive(Debug)]
pub(crate) enum NetError {
    Http { status: u16, attempts: u32 },
    Timeout,
    Transport(String),
    MalformedBody(String),
}

pub(crate) struct PostOutcome {
    pub value: serde_json::Value,
    pub attempts: u32,
}

const BACKOFF_BASE_S: f64 = 0.5;
const BACKOFF_FACTOR: f64 = 2.0;
const BACKOFF_CAP_S: f64 = 8.0;

fn retryable_status(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

/// Issues `POST url` with a JSON body, at most `max_retries + 1` attempts.
/// Backoff delays are jittered by +/-25% but kept nondecreasing.
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &serde_json::Value,
    max_retries: u32,
) -> Result<PostOutcome, NetError> {
    let payload = body.to_string();
    let mut jitter = SplitMix64::new(url.len() as u64 ^ 0x6c61_7465);
    let mut attempts = 0u32;
    let mut last_delay = 0.0f64;
    loop {
        attempts += 1;
        let mut req = agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_string(&payload) {
            Ok(resp) => {
                let text = resp
                    .into_string()
                    .map_err(|e| NetError::Transport(e.to_string()))?;
                let value = serde_json::from_str(&text)
                    .map_err(|e| NetError::MalformedBody(e.to_string()))?;
                return Ok(PostOutcome { value, attempts });
            }
            Err(ureq::Error::Status(status, _)) => {
                if !retryable_status(status) || attempts > max_retries {
                    return Err(NetError::Http { status, attempts });
                }
            }
            Err(ureq::Error::Transport(t)) => {
                let message = t.to_string();
                let timed_out = message.contains("timed out") || message.contains("timeout");
                if attempts > max_retries {
                    return Err(if timed_out {
                        NetError::Timeout
                    } else {
                        NetError::Transport(message)
                    });
                }
            }
        }
        let exp = BACKOFF_BASE_S * BACKOFF_FACTOR.powi(attempts as i32 - 1);
        let jittered = exp.min(BACKOFF_CAP_S) * (0.75 + 0.5 * jitter.next_open01());
        last_delay = jittered.max(last_delay);
        std::thread::sleep(Duration::from_secs_f64(last_delay));
    }
}
