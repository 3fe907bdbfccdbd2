//! Explanation backends: sample n natural-language descriptions of a
//! traversal strip from a remote OpenAI-compatible vision chat API, a
//! scripted mock with on-topic/off-topic template pools, or a deterministic
//! image-statistics heuristic.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcodec::{encode_png, EncodedImage};
use crate::net::{self, NetError};
use crate::rng::SplitMix64;
use crate::similarity::API_KEY_ENV;
use crate::traversal::{compose_strip, TraversalSequence, DEFAULT_SEPARATOR_PX};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("API key missing: set {0}")]
    AuthMissing(String),
    #[error("chat endpoint returned HTTP {status} after {attempts} attempts")]
    Http { status: u16, attempts: u32 },
    #[error("chat request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("response missing message content")]
    MalformedResponse,
    #[error("prompt template must contain the {{k}} placeholder exactly once")]
    BadTemplate,
    #[error("invalid explainer configuration: {0}")]
    InvalidConfig(String),
    #[error("image encoding failed: {0}")]
    Codec(#[from] crate::imgcodec::CodecError),
    #[error("strip composition failed: {0}")]
    Strip(#[from] crate::traversal::TraversalError),
}

impl From<NetError> for ExplainError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Http { status, attempts } => ExplainError::Http { status, attempts },
            NetError::Timeout => ExplainError::Timeout,
            NetError::Transport(message) => ExplainError::Transport(message),
            NetError::MalformedBody(_) => ExplainError::MalformedResponse,
        }
    }
}

/// Default question attached to every strip.
pub const DEFAULT_PROMPT: &str = "This row shows {k} images decoded while one latent variable \
     increases from -3 to 3, left to right. What is the latent variable, and how does it change \
     across the images?";

/// A prompt with exactly one `{k}` placeholder for the frame count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, ExplainError> {
        let text = text.into();
        if text.matches("{k}").count() != 1 {
            return Err(ExplainError::BadTemplate);
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_PROMPT).expect("default template is valid")
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        PromptTemplate::new(s).map_err(|e| e.to_string())
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.text
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Scripted,
    Heuristic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub backend: BackendKind,
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub samples_n: usize,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// Upper bound on simultaneous in-flight remote requests.
    pub in_flight_limit: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Heuristic,
            endpoint: "https://api.openai.com/v1".to_string(),
            model_name: "gpt-4-vision-preview".to_string(),
            temperature: 1.0,
            top_p: 1.0,
            samples_n: 5,
            timeout_s: 60.0,
            max_retries: 3,
            in_flight_limit: 4,
        }
    }
}

impl ExplainerConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.samples_n < 2 {
            return Err(ExplainError::InvalidConfig(format!(
                "samples_n must be at least 2, got {}",
                self.samples_n
            )));
        }
        if self.in_flight_limit == 0 {
            return Err(ExplainError::InvalidConfig(
                "in_flight_limit must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// The n sampled explanations for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    pub sequence_id: String,
    pub responses: Vec<String>,
    pub backend_label: String,
    pub elapsed_s: Vec<f64>,
}

impl ResponseSet {
    pub fn new(
        sequence_id: impl Into<String>,
        responses: Vec<String>,
        backend_label: impl Into<String>,
        elapsed_s: Vec<f64>,
    ) -> Self {
        assert_eq!(responses.len(), elapsed_s.len());
        assert!(
            responses.iter().all(|r| !r.trim().is_empty()),
            "responses must be nonempty after trimming"
        );
        Self {
            sequence_id: sequence_id.into(),
            responses,
            backend_label: backend_label.into(),
            elapsed_s,
        }
    }
}

/// On-topic/off-topic template pools emulating clear and unclear visual
/// regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedScenario {
    pub scenario_id: String,
    pub on_topic_pool: Vec<String>,
    pub off_topic_pool: Vec<String>,
    pub noise_p: f64,
}

impl ScriptedScenario {
    pub fn validate(&self) -> Result<(), ExplainError> {
        if self.on_topic_pool.is_empty() || self.off_topic_pool.is_empty() {
            return Err(ExplainError::InvalidConfig(format!(
                "scenario {} has an empty template pool",
                self.scenario_id
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(ExplainError::InvalidConfig(format!(
                "scenario {} noise_p {} outside [0, 1]",
                self.scenario_id, self.noise_p
            )));
        }
        if self
            .on_topic_pool
            .iter()
            .chain(&self.off_topic_pool)
            .any(|t| t.trim().is_empty())
        {
            return Err(ExplainError::InvalidConfig(format!(
                "scenario {} contains an empty template",
                self.scenario_id
            )));
        }
        Ok(())
    }
}

/// Substitutes the frame count into the template and PNG-encodes the
/// composed strip.
pub fn build_prompt(
    template: &PromptTemplate,
    sequence: &TraversalSequence,
) -> Result<(String, EncodedImage), ExplainError> {
    let k = sequence.frames.len();
    let text = template.text.replace("{k}", &k.to_string());
    let strip = compose_strip(sequence, DEFAULT_SEPARATOR_PX)?;
    let image = encode_png(&strip)?;
    Ok((text, image))
}

fn chat_body(config: &ExplainerConfig, prompt: &str, image: &EncodedImage) -> serde_json::Value {
    let data_url = format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(&image.bytes)
    );
    serde_json::json!({
        "model": config.model_name,
        "temperature": config.temperature,
        "top_p": config.top_p,
        "messages": [{
            "role": "user",
            "content": [
                { "type": "text", "text": prompt },
                { "type": "image_url", "image_url": { "url": data_url } }
            ]
        }]
    })
}

fn extract_content(value: &serde_json::Value) -> Result<String, ExplainError> {
    let content = value["choices"][0]["message"]["content"]
        .as_str()
        .ok_or(ExplainError::MalformedResponse)?;
    let trimmed = content.trim();
    if trimmed.is_empty() {
        return Err(ExplainError::MalformedResponse);
    }
    Ok(trimmed.to_string())
}

/// Outcome of one remote sampling run, with per-request attempt counts.
#[derive(Debug, Clone)]
pub struct RemoteSamples {
    pub set: ResponseSet,
    pub attempts: Vec<u32>,
}

/// Issues n independent chat-completion requests with the image attached as
/// a base64 data URL. Requests fan out over at most `in_flight_limit`
/// worker threads; responses are ordered by request index, not completion
/// time.
pub fn sample_responses(
    config: &ExplainerConfig,
    sequence_id: &str,
    prompt: &str,
    image: &EncodedImage,
) -> Result<RemoteSamples, ExplainError> {
    config.validate()?;
    let api_key = std::env::var(API_KEY_ENV)
        .map_err(|_| ExplainError::AuthMissing(API_KEY_ENV.to_string()))?;
    let url = format!(
        "{}/chat/completions",
        config.endpoint.trim_end_matches('/')
    );
    let body = chat_body(config, prompt, image);
    let n = config.samples_n;
    let workers = config.in_flight_limit.min(n);

    let next_index = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<(String, f64, u32), ExplainError>>>> =
        Mutex::new((0..n).map(|_| None).collect());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| {
                let agent = ureq::AgentBuilder::new()
                    .timeout(std::time::Duration::from_secs_f64(config.timeout_s))
                    .build();
                // Stop claiming new requests once any request has failed;
                // in-flight ones run to completion.
                while !failed.load(Ordering::SeqCst) {
                    let index = next_index.fetch_add(1, Ordering::SeqCst);
                    if index >= n {
                        break;
                    }
                    let started = Instant::now();
                    let outcome = net::post_json(
                        &agent,
                        &url,
                        Some(&api_key),
                        &body,
                        config.max_retries,
                    );
                    let result = outcome.map_err(ExplainError::from).and_then(|post| {
                        let text = extract_content(&post.value)?;
                        Ok((text, started.elapsed().as_secs_f64(), post.attempts))
                    });
                    if result.is_err() {
                        failed.store(true, Ordering::SeqCst);
                    }
                    slots.lock().unwrap()[index] = Some(result);
                }
            });
        }
    });

    let mut results = slots.into_inner().unwrap();
    if let Some(pos) = results.iter().position(|s| matches!(s, Some(Err(_)))) {
        return Err(results.swap_remove(pos).unwrap().unwrap_err());
    }
    let mut responses = Vec::with_capacity(n);
    let mut elapsed = Vec::with_capacity(n);
    let mut attempts = Vec::with_capacity(n);
    for slot in results {
        let (text, secs, tries) = slot.expect("no failures, so every index was claimed")?;
        responses.push(text);
        elapsed.push(secs);
        attempts.push(tries);
    }
    Ok(RemoteSamples {
        set: ResponseSet::new(
            sequence_id,
            responses,
            format!("remote:{}", config.model_name),
            elapsed,
        ),
        attempts,
    })
}

/// Draws n templated responses: each draw independently selects the
/// off-topic pool with probability `noise_p`, then a uniform template from
/// the chosen pool.
pub fn scripted_respond(scenario: &ScriptedScenario, seed: i64, n: usize) -> ResponseSet {
    scenario.validate().expect("scenario must be valid");
    let mut rng = SplitMix64::from_seed_i64(seed);
    let mut responses = Vec::with_capacity(n);
    for _ in 0..n {
        let off_topic = rng.next_open01() < scenario.noise_p;
        let pool = if off_topic {
            &scenario.off_topic_pool
        } else {
            &scenario.on_topic_pool
        };
        let template = &pool[rng.next_range(pool.len() as u64) as usize];
        responses.push(template.clone());
    }
    ResponseSet::new(
        scenario.scenario_id.clone(),
        responses,
        "scripted",
        vec![0.0; n],
    )
}

/// Which frame statistic a heuristic explanation names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TrendStat {
    HorizontalPosition,
    VerticalPosition,
    Area,
    Brightness,
}

struct FrameStats {
    centroid_x: f64,
    centroid_y: f64,
    area: f64,
    mean_intensity: f64,
}

fn frame_stats(frame: &crate::dataset::ImageSample) -> FrameStats {
    let mut mass = 0.0;
    let mut moment_x = 0.0;
    let mut moment_y = 0.0;
    let mut area = 0.0;
    let mut total = 0.0;
    for row in 0..frame.height {
        for col in 0..frame.width {
            let v = frame.get(row, col);
            total += v;
            mass += v;
            moment_x += v * (col as f64 + 0.5);
            moment_y += v * (row as f64 + 0.5);
            if v > 0.5 {
                area += 1.0;
            }
        }
    }
    let (centroid_x, centroid_y) = if mass > 0.0 {
        (moment_x / mass, moment_y / mass)
    } else {
        (frame.width as f64 / 2.0, frame.height as f64 / 2.0)
    };
    FrameStats {
        centroid_x,
        centroid_y,
        area,
        mean_intensity: total / frame.len() as f64,
    }
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

const NO_TREND_TEMPLATES: [&str; 3] = [
    "No consistent change is visible across the images.",
    "The images do not show a consistent pattern for this latent variable.",
    "There is no clear trend across the sequence.",
];

fn trend_templates(stat: TrendStat, increasing: bool) -> [String; 3] {
    let (name, direction) = match (stat, increasing) {
        (TrendStat::HorizontalPosition, true) => ("horizontal position", "from left to right"),
        (TrendStat::HorizontalPosition, false) => ("horizontal position", "from right to left"),
        (TrendStat::VerticalPosition, true) => ("vertical position", "from top to bottom"),
        (TrendStat::VerticalPosition, false) => ("vertical position", "from bottom to top"),
        (TrendStat::Area, true) => ("size", "from smaller to larger"),
        (TrendStat::Area, false) => ("size", "from larger to smaller"),
        (TrendStat::Brightness, true) => ("brightness", "from darker to brighter"),
        (TrendStat::Brightness, false) => ("brightness", "from brighter to darker"),
    };
    [
        format!(
            "The latent variable controls {name}: the shape changes {direction} as the value increases."
        ),
        format!("Across the row the {name} shifts {direction}, so this dimension encodes {name}."),
        format!("This latent dimension changes {name}, moving {direction} across the sequence."),
    ]
}

/// Deterministic offline explainer: fits each frame statistic (intensity
/// centroid, foreground area, mean intensity) against the assigned values
/// and names the statistic with the strongest consistent trend; without one
/// it declares the sequence trendless.
///
/// A statistic qualifies when its normalized slope (the least-squares slope
/// divided by the statistic's range over the sequence plus 1e-9) reaches
/// 0.05 in magnitude, so non-monotone wandering is ignored, and when its
/// range covers at least 5% of the statistic's natural scale (image extent
/// for centroids, pixel count for area, 1 for mean intensity), so sub-pixel
/// quantization drift cannot masquerade as a trend. Qualifiers are ranked
/// by that covered fraction; near-ties within 25% resolve to the earliest
/// statistic in the listed order, which reads footprint growth as size
/// rather than brightness on near-binary frames where the two are
/// proportional.
pub fn heuristic_explain(sequence: &TraversalSequence, n: usize) -> ResponseSet {
    assert!(sequence.frames.len() >= 2, "need at least two frames");
    let stats: Vec<FrameStats> = sequence.frames.iter().map(frame_stats).collect();
    let xs = &sequence.assigned_values;
    let width = sequence.frames[0].width as f64;
    let height = sequence.frames[0].height as f64;

    let series = [
        (
            TrendStat::HorizontalPosition,
            stats.iter().map(|s| s.centroid_x).collect::<Vec<f64>>(),
            width,
        ),
        (
            TrendStat::VerticalPosition,
            stats.iter().map(|s| s.centroid_y).collect(),
            height,
        ),
        (
            TrendStat::Area,
            stats.iter().map(|s| s.area).collect(),
            width * height,
        ),
        (
            TrendStat::Brightness,
            stats.iter().map(|s| s.mean_intensity).collect(),
            1.0,
        ),
    ];

    // (statistic, covered fraction of its natural scale, trend direction)
    let mut qualified: Vec<(TrendStat, f64, bool)> = Vec::new();
    for (stat, ys, natural_scale) in &series {
        let slope = least_squares_slope(xs, ys);
        let range = ys.iter().cloned().fold(f64::MIN, f64::max)
            - ys.iter().cloned().fold(f64::MAX, f64::min);
        let normalized = slope / (range + 1e-9);
        let fraction = range / natural_scale;
        if normalized.abs() >= 0.05 && fraction >= 0.05 {
            qualified.push((*stat, fraction, normalized > 0.0));
        }
    }
    let best_fraction = qualified
        .iter()
        .map(|(_, fraction, _)| *fraction)
        .fold(0.0f64, f64::max);
    let winner = qualified
        .iter()
        .find(|(_, fraction, _)| *fraction >= 0.75 * best_fraction)
        .copied();

    let templates: Vec<String> = match winner {
        Some((stat, _, increasing)) => trend_templates(stat, increasing).to_vec(),
        None => NO_TREND_TEMPLATES.iter().map(|s| s.to_string()).collect(),
    };
    let responses: Vec<String> = (0..n)
        .map(|i| templates[i % templates.len()].clone())
        .collect();
    ResponseSet::new(
        sequence.sequence_id.clone(),
        responses,
        "heuristic",
        vec![0.0; n],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render_shape, FactorAssignment, ImageSample, Shape};
    use crate::traversal::{LatentVector, TraversalSpec};

    fn sequence_from_frames(frames: Vec<ImageSample>) -> TraversalSequence {
        let k = frames.len();
        TraversalSequence {
            spec: TraversalSpec::new(LatentVector::new(vec![0.0]), 0),
            assigned_values: (0..k).map(|i| -3.0 + i as f64 * 6.0 / (k - 1) as f64).collect(),
            frames,
            sequence_id: "synthetic".to_string(),
        }
    }

    #[test]
    fn template_requires_exactly_one_placeholder() {
        assert!(PromptTemplate::new("how many frames: {k}?").is_ok());
        assert!(matches!(
            PromptTemplate::new("no placeholder"),
            Err(ExplainError::BadTemplate)
        ));
        assert!(matches!(
            PromptTemplate::new("{k} and {k}"),
            Err(ExplainError::BadTemplate)
        ));
    }

    #[test]
    fn build_prompt_substitutes_frame_count_deterministically() {
        let frames: Vec<ImageSample> = (0..11)
            .map(|_| ImageSample::new(vec![0.5; 16], 4, 4))
            .collect();
        let seq = sequence_from_frames(frames);
        let (text, image) = build_prompt(&PromptTemplate::default(), &seq).unwrap();
        assert!(text.contains("This row shows 11 images"));
        assert!(!text.contains("{k}"));
        let (text2, image2) = build_prompt(&PromptTemplate::default(), &seq).unwrap();
        assert_eq!(text, text2);
        assert_eq!(image.bytes, image2.bytes);
    }

    #[test]
    fn default_prompt_snapshot() {
        let frames: Vec<ImageSample> = (0..2)
            .map(|_| ImageSample::new(vec![0.5; 16], 4, 4))
            .collect();
        let seq = sequence_from_frames(frames);
        let (text, _) = build_prompt(&PromptTemplate::default(), &seq).unwrap();
        assert_eq!(
            text,
            "This row shows 2 images decoded while one latent variable increases from -3 to 3, \
             left to right. What is the latent variable, and how does it change across the images?"
        );
    }

    fn scenario(noise_p: f64) -> ScriptedScenario {
        ScriptedScenario {
            scenario_id: "s".to_string(),
            on_topic_pool: vec![
                "The square moves left to right.".to_string(),
                "The square moves steadily to the right.".to_string(),
                "The square shifts from the left to the right.".to_string(),
            ],
            off_topic_pool: vec![
                "Clouds drift over a quiet valley.".to_string(),
                "The recipe calls for two fresh eggs.".to_string(),
                "Trains run late on winter mornings.".to_string(),
            ],
            noise_p,
        }
    }

    #[test]
    fn scripted_degenerate_probabilities() {
        let clear = scripted_respond(&scenario(0.0), 1, 4);
        assert_eq!(clear.responses.len(), 4);
        for r in &clear.responses {
            assert!(scenario(0.0).on_topic_pool.contains(r));
        }
        let unclear = scripted_respond(&scenario(1.0), 1, 4);
        for r in &unclear.responses {
            assert!(scenario(1.0).off_topic_pool.contains(r));
        }
    }

    #[test]
    fn scripted_noise_fraction_within_three_sigma() {
        let s = scenario(0.5);
        let set = scripted_respond(&s, 9, 10_000);
        let off = set
            .responses
            .iter()
            .filter(|r| s.off_topic_pool.contains(r))
            .count() as f64;
        let sigma = (10_000.0f64 * 0.25).sqrt();
        assert!((off - 5_000.0).abs() <= 3.0 * sigma, "off-topic count {off}");
    }

    #[test]
    fn scripted_is_deterministic() {
        let s = scenario(0.3);
        assert_eq!(scripted_respond(&s, 5, 8), scripted_respond(&s, 5, 8));
        assert_ne!(
            scripted_respond(&s, 5, 8).responses,
            scripted_respond(&s, 6, 8).responses
        );
    }

    fn factors(shape: Shape, scale: u8, x: u8, y: u8) -> FactorAssignment {
        FactorAssignment::new(shape, scale, 0, x, y)
    }

    #[test]
    fn heuristic_names_translation() {
        let frames: Vec<ImageSample> = (0..8)
            .map(|i| render_shape(&factors(Shape::Square, 2, (2 + i * 4) as u8, 16), 32))
            .collect();
        let set = heuristic_explain(&sequence_from_frames(frames), 3);
        assert!(
            set.responses[0].contains("horizontal position"),
            "got: {}",
            set.responses[0]
        );
        assert!(set.responses[0].contains("left to right"));
    }

    #[test]
    fn heuristic_names_growth() {
        let frames: Vec<ImageSample> = (0..6)
            .map(|i| render_shape(&factors(Shape::Square, i as u8, 16, 16), 32))
            .collect();
        let set = heuristic_explain(&sequence_from_frames(frames), 3);
        assert!(set.responses[0].contains("size"), "got: {}", set.responses[0]);
        assert!(set.responses[0].contains("smaller to larger"));
    }

    #[test]
    fn heuristic_names_brightness_ramp() {
        let frames: Vec<ImageSample> = (0..6)
            .map(|i| ImageSample::new(vec![0.05 + 0.07 * i as f64; 64], 8, 8))
            .collect();
        let set = heuristic_explain(&sequence_from_frames(frames), 3);
        assert!(
            set.responses[0].contains("brightness"),
            "got: {}",
            set.responses[0]
        );
        assert!(set.responses[0].contains("darker to brighter"));
    }

    #[test]
    fn heuristic_reports_no_trend_for_identical_frames() {
        let frame = render_shape(&factors(Shape::Ellipse, 3, 16, 16), 32);
        let frames = vec![frame; 5];
        let set = heuristic_explain(&sequence_from_frames(frames), 4);
        assert!(
            set.responses[0].contains("No consistent change"),
            "got: {}",
            set.responses[0]
        );
    }

    #[test]
    fn response_counts_match_for_every_backend() {
        let s = scenario(0.2);
        assert_eq!(scripted_respond(&s, 3, 7).responses.len(), 7);
        let frame = render_shape(&factors(Shape::Heart, 3, 16, 16), 32);
        let set = heuristic_explain(&sequence_from_frames(vec![frame.clone(), frame]), 5);
        assert_eq!(set.responses.len(), 5);
        assert_eq!(set.elapsed_s.len(), 5);
    }
}
