//! End-to-end orchestration: train the three model variants, build latent
//! traversals, sample explanations, score certainty, calibrate or apply the
//! display threshold, evaluate against human references, and render a
//! report.
//!
//! Every run lives in one directory so each stage can be rerun in
//! isolation:
//!
//! ```text
//! out/
//!   config.json        echo of the effective configuration
//!   manifest.json      versions, seed, timestamp (the only timestamped file)
//!   params/            <variant>.params binaries + <variant>_history.csv
//!   strips/            one PNG strip per sequence
//!   frames/            per-frame PNGs written by `traverse`
//!   sequences.json     traversal metadata with frame references
//!   responses/         <sequence_id>.jsonl sampled explanations
//!   certainty.jsonl    one CertaintyReport per scored sequence
//!   records.jsonl      one SequenceRecord per sequence (incl. failures)
//!   calibration.csv    threshold table per similarity kind
//!   metrics.csv        evaluation table per (dataset, variant, backend)
//!   report.md          human-readable summary
//! ```
//!
//! A backend failure on one sequence does not abort the run: the record
//! carries an error status and is excluded from calibration joins.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{self, CalibrationResult, LabeledScore};
use crate::dataset::{self, ImageDataset};
use crate::explainers::{
    self, BackendKind, ExplainError, ExplainerConfig, PromptTemplate, ResponseSet,
    ScriptedScenario,
};
use crate::imgcodec::encode_png;
use crate::nlgmetrics::{self, HashedTokenEmbedder, TokenEmbedder};
use crate::similarity::{
    self, CertaintyReport, EmbeddingProvider, LocalTfIdfEmbedder, RemoteEmbedder, SimilarityKind,
};
use crate::tinyvae::{self, TrainingConfig, Variant};
use crate::traversal::{self, GridOptions};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json failure in {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run directory incomplete: missing {0}")]
    IncompleteRun(String),
    #[error("no overlapping sequence ids between scores and annotations")]
    NoOverlap,
    #[error(transparent)]
    Calibration(#[from] calibration::CalibrationError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Vae(#[from] tinyvae::VaeError),
    #[error(transparent)]
    Metrics(#[from] nlgmetrics::MetricsError),
    #[error(transparent)]
    Similarity(#[from] similarity::SimilarityError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Codec(#[from] crate::imgcodec::CodecError),
    #[error(transparent)]
    Traversal(#[from] traversal::TraversalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Procedural { count: usize, side: usize },
    Idx { images: PathBuf, labels: Option<PathBuf> },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Procedural {
            count: 512,
            side: 64,
        }
    }
}

impl DatasetSource {
    pub fn default_label(&self) -> &'static str {
        match self {
            DatasetSource::Procedural { .. } => "procedural",
            DatasetSource::Idx { .. } => "mnist",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMatrix {
    pub vae: TrainingConfig,
    pub beta_vae: TrainingConfig,
    pub beta_tcvae: TrainingConfig,
}

impl Default for TrainingMatrix {
    fn default() -> Self {
        Self {
            vae: TrainingConfig {
                variant: Variant::Vae,
                beta: 1.0,
                ..TrainingConfig::default()
            },
            beta_vae: TrainingConfig {
                variant: Variant::BetaVae,
                beta: 4.0,
                ..TrainingConfig::default()
            },
            beta_tcvae: TrainingConfig {
                variant: Variant::BetaTcvae,
                beta: 6.0,
                ..TrainingConfig::default()
            },
        }
    }
}

impl TrainingMatrix {
    pub fn get(&self, variant: Variant) -> &TrainingConfig {
        match variant {
            Variant::Vae => &self.vae,
            Variant::BetaVae => &self.beta_vae,
            Variant::BetaTcvae => &self.beta_tcvae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraversalOptions {
    pub low: f64,
    pub high: f64,
    pub step: f64,
    pub separator_px: usize,
    pub resample_per_dim: bool,
}

impl Default for TraversalOptions {
    fn default() -> Self {
        Self {
            low: traversal::DEFAULT_LOW,
            high: traversal::DEFAULT_HIGH,
            step: traversal::DEFAULT_STEP,
            separator_px: traversal::DEFAULT_SEPARATOR_PX,
            resample_per_dim: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityConfig {
    pub kind: SimilarityKind,
    pub provider: ProviderKind,
    pub endpoint: String,
    pub model: String,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::LexicalRougeL,
            provider: ProviderKind::Local,
            endpoint: "https://api.openai.com/v1".to_string(),
            model: "text-embedding-3-small".to_string(),
        }
    }
}

impl SimilarityConfig {
    fn provider(&self) -> Box<dyn EmbeddingProvider> {
        match self.provider {
            ProviderKind::Local => Box::new(LocalTfIdfEmbedder),
            ProviderKind::Remote => {
                Box::new(RemoteEmbedder::new(self.endpoint.clone(), self.model.clone()))
            }
        }
    }

    fn token_embedder(&self) -> Box<dyn TokenEmbedder> {
        match self.provider {
            ProviderKind::Local => Box::new(HashedTokenEmbedder),
            ProviderKind::Remote => {
                Box::new(RemoteEmbedder::new(self.endpoint.clone(), self.model.clone()))
            }
        }
    }
}

/// Display threshold: a fixed value, or calibrated from labeled sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonConfig {
    Fixed(f64),
    Calibrate { annotations: PathBuf },
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        EpsilonConfig::Fixed(calibration::DEFAULT_EPSILON)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    /// Label used in metric tables; empty means derive from the source.
    pub dataset_label: String,
    pub training: TrainingMatrix,
    /// Variants covered by train/traverse/explain, in execution order.
    pub variants: Vec<Variant>,
    pub traversal: TraversalOptions,
    pub explainer: ExplainerConfig,
    /// Scenario file for the scripted backend (JSON list).
    pub scenarios_path: Option<PathBuf>,
    pub prompt_template: PromptTemplate,
    pub similarity: SimilarityConfig,
    pub epsilon: EpsilonConfig,
    /// Annotations JSONL used by `calibrate` and `evaluate` when no
    /// explicit path is given on the command line.
    pub annotations_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: i64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            dataset_label: String::new(),
            training: TrainingMatrix::default(),
            variants: Variant::ALL.to_vec(),
            traversal: TraversalOptions::default(),
            explainer: ExplainerConfig::default(),
            scenarios_path: None,
            prompt_template: PromptTemplate::default(),
            similarity: SimilarityConfig::default(),
            epsilon: EpsilonConfig::default(),
            annotations_path: None,
            out_dir: PathBuf::from("latent-lens-run"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn dataset_label(&self) -> &str {
        if self.dataset_label.is_empty() {
            self.dataset.default_label()
        } else {
            &self.dataset_label
        }
    }

    pub fn load_dataset(&self) -> Result<ImageDataset, PipelineError> {
        match &self.dataset {
            DatasetSource::Procedural { count, side } => {
                Ok(dataset::generate_shapes_dataset(*count, *side, self.seed))
            }
            DatasetSource::Idx { images, labels } => {
                let bytes = fs::read(images).map_err(io_err(images))?;
                let mut data = dataset::load_idx_images(&bytes)?;
                if let Some(label_path) = labels {
                    let label_bytes = fs::read(label_path).map_err(io_err(label_path))?;
                    let parsed = dataset::load_idx_labels(&label_bytes)?;
                    if parsed.len() != data.len() {
                        return Err(PipelineError::Config(format!(
                            "label count {} does not match image count {}",
                            parsed.len(),
                            data.len()
                        )));
                    }
                    data.labels = Some(parsed);
                }
                Ok(data)
            }
        }
    }
}

/// Human interpretability annotation for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sequence_id: String,
    pub label: u8,
    #[serde(default)]
    pub references: Vec<String>,
}

/// One row of the per-sequence report bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub sequence_id: String,
    pub dataset: String,
    pub variant: String,
    pub backend: String,
    pub dim_index: usize,
    pub strip_path: String,
    pub certainty: Option<f64>,
    pub selected: Option<String>,
    pub displayed: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResponseLine {
    index: usize,
    text: String,
    elapsed_s: f64,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_json(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest_json(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn params_dir(&self) -> PathBuf {
        self.root.join("params")
    }
    pub fn params_file(&self, variant: Variant) -> PathBuf {
        self.params_dir().join(format!("{variant}.params"))
    }
    pub fn history_file(&self, variant: Variant) -> PathBuf {
        self.params_dir().join(format!("{variant}_history.csv"))
    }
    pub fn strips_dir(&self) -> PathBuf {
        self.root.join("strips")
    }
    pub fn frames_dir(&self) -> PathBuf {
        self.root.join("frames")
    }
    pub fn sequences_json(&self) -> PathBuf {
        self.root.join("sequences.json")
    }
    pub fn responses_dir(&self) -> PathBuf {
        self.root.join("responses")
    }
    pub fn certainty_jsonl(&self) -> PathBuf {
        self.root.join("certainty.jsonl")
    }
    pub fn records_jsonl(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }
    pub fn calibration_csv(&self) -> PathBuf {
        self.root.join("calibration.csv")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }

    fn ensure_layout(&self) -> Result<(), PipelineError> {
        for dir in [
            self.root.clone(),
            self.params_dir(),
            self.strips_dir(),
            self.responses_dir(),
        ] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("serializable row"));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line).map_err(|e| PipelineError::Json {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_config_echo(run: &RunDir, config: &RunConfig) -> Result<(), PipelineError> {
    // The echo describes the bundle from its own root, so identical runs in
    // different locations stay byte-identical.
    let mut echo = config.clone();
    echo.out_dir = PathBuf::from(".");
    let text = serde_json::to_string_pretty(&echo).expect("config serializes");
    write_bytes(&run.config_json(), format!("{text}\n").as_bytes())
}

fn write_manifest(run: &RunDir, config: &RunConfig) -> Result<(), PipelineError> {
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = serde_json::json!({
        "crate": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "created_unix_s": created,
    });
    write_bytes(
        &run.manifest_json(),
        format!("{}\n", serde_json::to_string_pretty(&manifest).unwrap()).as_bytes(),
    )
}

/// Trains every configured variant and writes parameter binaries plus
/// per-epoch loss histories.
pub fn cmd_train(config: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let run = RunDir::new(&config.out_dir);
    run.ensure_layout()?;
    write_config_echo(&run, config)?;
    let data = config.load_dataset()?;
    let mut written = Vec::new();
    for &variant in &config.variants {
        let mut training = config.training.get(variant).clone();
        training.variant = variant;
        training.seed = config.seed;
        let (params, history) = tinyvae::train(&data, &training);

        let params_path = run.params_file(variant);
        write_bytes(&params_path, &tinyvae::save_params(&params))?;

        let mut csv = String::from(
            "epoch,reconstruction,kl_analytic,mutual_info_est,total_correlation_est,dimwise_kl_est,total\n",
        );
        for (epoch, terms) in history.iter().enumerate() {
            let total = tinyvae::loss(variant, terms, training.effective_beta());
            csv.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                epoch,
                terms.reconstruction,
                terms.kl_analytic,
                terms.mutual_info_est,
                terms.total_correlation_est,
                terms.dimwise_kl_est,
                total
            ));
        }
        write_bytes(&run.history_file(variant), csv.as_bytes())?;
        written.push(params_path);
    }
    write_manifest(&run, config)?;
    Ok(written)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SequenceMeta {
    sequence_id: String,
    model: String,
    seed: i64,
    dim_index: usize,
    values: Vec<f64>,
    image_refs: Vec<String>,
}

fn grid_for(
    config: &RunConfig,
    variant: Variant,
    params: &tinyvae::VaeParameters,
) -> Vec<traversal::TraversalSequence> {
    let options = GridOptions {
        low: config.traversal.low,
        high: config.traversal.high,
        step: config.traversal.step,
        model_label: variant.as_str().to_string(),
        resample_per_dim: config.traversal.resample_per_dim,
    };
    traversal::generate_grid(params, config.seed, &options)
}

/// Decodes traversal grids for every trained variant, writing per-frame
/// PNGs, composed strips, and sequence metadata.
pub fn cmd_traverse(config: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let run = RunDir::new(&config.out_dir);
    run.ensure_layout()?;
    write_config_echo(&run, config)?;
    fs::create_dir_all(run.frames_dir()).map_err(io_err(&run.frames_dir()))?;

    let mut metas = Vec::new();
    let mut strips = Vec::new();
    for &variant in &config.variants {
        let params_path = run.params_file(variant);
        if !params_path.exists() {
            return Err(PipelineError::IncompleteRun(
                params_path.display().to_string(),
            ));
        }
        let bytes = fs::read(&params_path).map_err(io_err(&params_path))?;
        let params = tinyvae::load_params(&bytes)?;
        for sequence in grid_for(config, variant, &params) {
            let frame_dir = run.frames_dir().join(&sequence.sequence_id);
            fs::create_dir_all(&frame_dir).map_err(io_err(&frame_dir))?;
            let mut image_refs = Vec::with_capacity(sequence.frames.len());
            for (j, frame) in sequence.frames.iter().enumerate() {
                let path = frame_dir.join(format!("{j:02}.png"));
                write_bytes(&path, &encode_png(frame)?.bytes)?;
                image_refs.push(format!("frames/{}/{j:02}.png", sequence.sequence_id));
            }
            let strip = traversal::compose_strip(&sequence, config.traversal.separator_px)?;
            let strip_path = run.strips_dir().join(format!("{}.png", sequence.sequence_id));
            write_bytes(&strip_path, &encode_png(&strip)?.bytes)?;
            strips.push(strip_path);
            metas.push(SequenceMeta {
                sequence_id: sequence.sequence_id.clone(),
                model: variant.as_str().to_string(),
                seed: config.seed,
                dim_index: sequence.spec.dim_index,
                values: sequence.assigned_values.clone(),
                image_refs,
            });
        }
    }
    let text = serde_json::to_string_pretty(&metas).expect("metadata serializes");
    write_bytes(&run.sequences_json(), format!("{text}\n").as_bytes())?;
    write_manifest(&run, config)?;
    Ok(strips)
}

fn load_scenarios(config: &RunConfig) -> Result<Vec<ScriptedScenario>, PipelineError> {
    let path = config.scenarios_path.as_ref().ok_or_else(|| {
        PipelineError::Config("scripted backend needs scenarios_path".to_string())
    })?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let scenarios: Vec<ScriptedScenario> =
        serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.clone(),
            message: e.to_string(),
        })?;
    if scenarios.is_empty() {
        return Err(PipelineError::Config("scenario file is empty".to_string()));
    }
    for s in &scenarios {
        s.validate()?;
    }
    Ok(scenarios)
}

fn explain_one(
    config: &RunConfig,
    scenarios: &[ScriptedScenario],
    sequence: &traversal::TraversalSequence,
    sequence_counter: usize,
) -> Result<ResponseSet, ExplainError> {
    let n = config.explainer.samples_n;
    match config.explainer.backend {
        BackendKind::Heuristic => Ok(explainers::heuristic_explain(sequence, n)),
        BackendKind::Scripted => {
            let scenario = &scenarios[sequence_counter % scenarios.len()];
            let seed = config
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64 as i64)
                .wrapping_mul(sequence_counter as i64 + 1);
            let mut set = explainers::scripted_respond(scenario, seed, n);
            set.sequence_id = sequence.sequence_id.clone();
            Ok(set)
        }
        BackendKind::Remote => {
            let (prompt, image) = explainers::build_prompt(&config.prompt_template, sequence)?;
            let samples = explainers::sample_responses(
                &config.explainer,
                &sequence.sequence_id,
                &prompt,
                &image,
            )?;
            Ok(samples.set)
        }
    }
}

/// Explanation stage output.
#[derive(Debug)]
pub struct ExplainOutcome {
    pub records: Vec<SequenceRecord>,
    pub reports: Vec<CertaintyReport>,
    pub epsilon: f64,
    pub calibration: Option<CalibrationResult>,
}

/// Runs the explanation stage over every variant's traversal grid: writes
/// strips, response sets, certainty reports, and selection records. The
/// threshold comes from the config, or is calibrated against the provided
/// annotations before selection.
pub fn cmd_explain(config: &RunConfig) -> Result<ExplainOutcome, PipelineError> {
    config.explainer.validate()?;
    let run = RunDir::new(&config.out_dir);
    run.ensure_layout()?;
    write_config_echo(&run, config)?;
    let scenarios = if config.explainer.backend == BackendKind::Scripted {
        load_scenarios(config)?
    } else {
        Vec::new()
    };
    let provider = config.similarity.provider();
    let dataset_label = config.dataset_label().to_string();

    struct Scored {
        record: SequenceRecord,
        report: Option<CertaintyReport>,
        responses: Option<Vec<String>>,
    }

    let mut scored: Vec<Scored> = Vec::new();
    let mut counter = 0usize;
    for &variant in &config.variants {
        let params_path = run.params_file(variant);
        if !params_path.exists() {
            return Err(PipelineError::IncompleteRun(
                params_path.display().to_string(),
            ));
        }
        let bytes = fs::read(&params_path).map_err(io_err(&params_path))?;
        let params = tinyvae::load_params(&bytes)?;
        for sequence in grid_for(config, variant, &params) {
            let strip = traversal::compose_strip(&sequence, config.traversal.separator_px)?;
            let strip_rel = format!("strips/{}.png", sequence.sequence_id);
            write_bytes(
                &run.strips_dir().join(format!("{}.png", sequence.sequence_id)),
                &encode_png(&strip)?.bytes,
            )?;

            let mut record = SequenceRecord {
                sequence_id: sequence.sequence_id.clone(),
                dataset: dataset_label.clone(),
                variant: variant.as_str().to_string(),
                backend: String::new(),
                dim_index: sequence.spec.dim_index,
                strip_path: strip_rel,
                certainty: None,
                selected: None,
                displayed: None,
                error: None,
            };

            let outcome = explain_one(config, &scenarios, &sequence, counter).and_then(|set| {
                let report =
                    similarity::certainty(&set, config.similarity.kind, Some(provider.as_ref()))
                        .map_err(|e| ExplainError::Transport(e.to_string()))?;
                Ok((set, report))
            });
            counter += 1;

            match outcome {
                Ok((set, report)) => {
                    record.backend = set.backend_label.clone();
                    record.certainty = Some(report.certainty);
                    let lines: Vec<ResponseLine> = set
                        .responses
                        .iter()
                        .enumerate()
                        .map(|(index, text)| ResponseLine {
                            index,
                            text: text.clone(),
                            elapsed_s: set.elapsed_s[index],
                        })
                        .collect();
                    write_jsonl(
                        &run.responses_dir()
                            .join(format!("{}.jsonl", sequence.sequence_id)),
                        &lines,
                    )?;
                    scored.push(Scored {
                        record,
                        report: Some(report),
                        responses: Some(set.responses),
                    });
                }
                Err(e) => {
                    record.error = Some(e.to_string());
                    scored.push(Scored {
                        record,
                        report: None,
                        responses: None,
                    });
                }
            }
        }
    }

    // Resolve the display threshold, calibrating against fresh scores when
    // configured.
    let mut calibration_result = None;
    let epsilon = match &config.epsilon {
        EpsilonConfig::Fixed(value) => *value,
        EpsilonConfig::Calibrate { annotations } => {
            let labels = read_jsonl::<AnnotationRecord>(annotations)?;
            let by_id: BTreeMap<&str, u8> = labels
                .iter()
                .map(|a| (a.sequence_id.as_str(), a.label))
                .collect();
            let joined: Vec<LabeledScore> = scored
                .iter()
                .filter_map(|s| {
                    let report = s.report.as_ref()?;
                    by_id.get(s.record.sequence_id.as_str()).map(|&label| {
                        LabeledScore::new(s.record.sequence_id.clone(), report.certainty, label)
                    })
                })
                .collect();
            if joined.is_empty() {
                return Err(PipelineError::NoOverlap);
            }
            let result = calibration::calibrate_threshold(&joined)?;
            write_calibration_csv(
                &run,
                &[(config.similarity.kind, result.clone())],
            )?;
            let epsilon = result.epsilon;
            calibration_result = Some(result);
            epsilon
        }
    };

    let mut records = Vec::with_capacity(scored.len());
    let mut reports = Vec::new();
    for mut s in scored {
        if let (Some(report), Some(responses)) = (&s.report, &s.responses) {
            s.record.selected = Some(responses[report.selected_index].clone());
            s.record.displayed = Some(similarity::select_explanation(
                report, responses, epsilon,
            ));
        }
        if let Some(report) = s.report {
            reports.push(report);
        }
        records.push(s.record);
    }
    write_jsonl(&run.certainty_jsonl(), &reports)?;
    write_jsonl(&run.records_jsonl(), &records)?;
    write_manifest(&run, config)?;
    Ok(ExplainOutcome {
        records,
        reports,
        epsilon,
        calibration: calibration_result,
    })
}

fn write_calibration_csv(
    run: &RunDir,
    rows: &[(SimilarityKind, CalibrationResult)],
) -> Result<(), PipelineError> {
    let mut csv = String::from("uncertainty_estimate,auc,f1_score,precision,recall\n");
    for (kind, result) in rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            kind.display_name(),
            result.auc,
            result.f1,
            result.precision,
            result.recall
        ));
    }
    write_bytes(&run.calibration_csv(), csv.as_bytes())
}

/// Joins human labels to persisted certainty scores and calibrates a
/// threshold per similarity kind present in the scores file.
pub fn cmd_calibrate(
    config: &RunConfig,
    annotations_path: Option<&Path>,
    scores_path: Option<&Path>,
) -> Result<Vec<(SimilarityKind, CalibrationResult)>, PipelineError> {
    let run = RunDir::new(&config.out_dir);
    run.ensure_layout()?;
    let annotations_path = annotations_path
        .map(Path::to_path_buf)
        .or_else(|| config.annotations_path.clone())
        .ok_or_else(|| PipelineError::Config("no annotations path provided".to_string()))?;
    let annotations = read_jsonl::<AnnotationRecord>(&annotations_path)?;
    let scores_path = scores_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.certainty_jsonl());
    let reports = read_jsonl::<CertaintyReport>(&scores_path)?;

    let labels: BTreeMap<&str, u8> = annotations
        .iter()
        .map(|a| (a.sequence_id.as_str(), a.label))
        .collect();

    let mut kinds: Vec<SimilarityKind> = Vec::new();
    for r in &reports {
        if !kinds.contains(&r.similarity_kind) {
            kinds.push(r.similarity_kind);
        }
    }
    kinds.sort_by_key(|k| k.as_str());

    let mut results = Vec::new();
    for kind in kinds {
        let joined: Vec<LabeledScore> = reports
            .iter()
            .filter(|r| r.similarity_kind == kind)
            .filter_map(|r| {
                labels
                    .get(r.sequence_id.as_str())
                    .map(|&label| LabeledScore::new(r.sequence_id.clone(), r.certainty, label))
            })
            .collect();
        if joined.is_empty() {
            continue;
        }
        results.push((kind, calibration::calibrate_threshold(&joined)?));
    }
    if results.is_empty() {
        return Err(PipelineError::NoOverlap);
    }
    write_calibration_csv(&run, &results)?;
    Ok(results)
}

/// Re-applies a display threshold to persisted certainty reports and
/// responses, rewriting the selection fields of records.jsonl.
pub fn cmd_select(config: &RunConfig, epsilon: f64) -> Result<Vec<SequenceRecord>, PipelineError> {
    let run = RunDir::new(&config.out_dir);
    let records_path = run.records_jsonl();
    if !records_path.exists() {
        return Err(PipelineError::IncompleteRun(
            records_path.display().to_string(),
        ));
    }
    let mut records = read_jsonl::<SequenceRecord>(&records_path)?;
    let reports = read_jsonl::<CertaintyReport>(&run.certainty_jsonl())?;
    let by_id: BTreeMap<&str, &CertaintyReport> = reports
        .iter()
        .map(|r| (r.sequence_id.as_str(), r))
        .collect();
    for record in &mut records {
        let Some(report) = by_id.get(record.sequence_id.as_str()) else {
            continue;
        };
        let lines: Vec<ResponseLine> = read_jsonl(
            &run.responses_dir()
                .join(format!("{}.jsonl", record.sequence_id)),
        )?;
        let responses: Vec<String> = lines.into_iter().map(|l| l.text).collect();
        record.certainty = Some(report.certainty);
        record.selected = Some(responses[report.selected_index].clone());
        record.displayed = Some(similarity::select_explanation(report, &responses, epsilon));
    }
    write_jsonl(&records_path, &records)?;
    Ok(records)
}

/// One output row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub vae_variant: String,
    pub backend: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub embed_f1: f64,
}

/// Scores selected explanations against reference annotations, one row per
/// (dataset, variant, backend) group.
pub fn cmd_evaluate(
    config: &RunConfig,
    explanations_path: Option<&Path>,
    annotations_path: Option<&Path>,
) -> Result<Vec<MetricsRow>, PipelineError> {
    let run = RunDir::new(&config.out_dir);
    let records_path = explanations_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.records_jsonl());
    if !records_path.exists() {
        return Err(PipelineError::IncompleteRun(
            records_path.display().to_string(),
        ));
    }
    let records = read_jsonl::<SequenceRecord>(&records_path)?;
    let annotations_path = annotations_path
        .map(Path::to_path_buf)
        .or_else(|| config.annotations_path.clone())
        .ok_or_else(|| PipelineError::Config("no annotations path provided".to_string()))?;
    let annotations = read_jsonl::<AnnotationRecord>(&annotations_path)?;
    let references: BTreeMap<String, Vec<String>> = annotations
        .into_iter()
        .filter(|a| !a.references.is_empty())
        .map(|a| (a.sequence_id, a.references))
        .collect();

    let mut groups: BTreeMap<(String, String, String), BTreeMap<String, String>> =
        BTreeMap::new();
    for record in &records {
        let Some(selected) = &record.selected else {
            continue;
        };
        groups
            .entry((
                record.dataset.clone(),
                record.variant.clone(),
                record.backend.clone(),
            ))
            .or_default()
            .insert(record.sequence_id.clone(), selected.clone());
    }

    let embedder = config.similarity.token_embedder();
    let mut rows = Vec::new();
    for ((dataset_label, variant, backend), explanations) in groups {
        match nlgmetrics::evaluate_table(&explanations, &references, embedder.as_ref()) {
            Ok(table) => rows.push(MetricsRow {
                dataset: dataset_label,
                vae_variant: variant,
                backend,
                bleu: table.aggregate.bleu,
                rouge_l: table.aggregate.rouge_l,
                meteor: table.aggregate.meteor,
                embed_f1: table.aggregate.embed_f1,
            }),
            Err(nlgmetrics::MetricsError::NoOverlap) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if rows.is_empty() {
        return Err(PipelineError::NoOverlap);
    }

    let mut csv = String::from("dataset,vae_variant,backend,bleu,rouge_l,meteor,embed_f1\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            row.dataset, row.vae_variant, row.backend, row.bleu, row.rouge_l, row.meteor,
            row.embed_f1
        ));
    }
    write_bytes(&run.metrics_csv(), csv.as_bytes())?;
    Ok(rows)
}

fn markdown_table_from_csv(csv: &str) -> String {
    let mut out = String::new();
    let mut lines = csv.lines();
    if let Some(header) = lines.next() {
        let cells: Vec<&str> = header.split(',').collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        out.push_str(&format!("|{}\n", " --- |".repeat(cells.len())));
        for line in lines {
            out.push_str(&format!("| {} |\n", line.split(',').collect::<Vec<_>>().join(" | ")));
        }
    }
    out
}

/// Renders report.md from the persisted bundle: one section per sequence
/// with its strip, certainty, and displayed text, plus calibration and
/// metric tables when present. Regeneration is byte-identical for an
/// unchanged run directory.
pub fn cmd_report(config: &RunConfig) -> Result<String, PipelineError> {
    let run = RunDir::new(&config.out_dir);
    let records_path = run.records_jsonl();
    if !records_path.exists() {
        return Err(PipelineError::IncompleteRun(
            records_path.display().to_string(),
        ));
    }
    let records = read_jsonl::<SequenceRecord>(&records_path)?;

    let mut md = String::from("# Latent variable explanations\n");
    for record in &records {
        md.push_str(&format!("\n## {}\n\n", record.sequence_id));
        md.push_str(&format!(
            "![{}]({})\n\n",
            record.sequence_id, record.strip_path
        ));
        md.push_str(&format!("- model: {}\n", record.variant));
        md.push_str(&format!("- backend: {}\n", record.backend));
        match record.certainty {
            Some(c) => md.push_str(&format!("- certainty: {c:.4}\n")),
            None => md.push_str("- certainty: unavailable\n"),
        }
        match (&record.displayed, &record.error) {
            (Some(text), _) => md.push_str(&format!("- displayed: {text}\n")),
            (None, Some(err)) => md.push_str(&format!("- error: {err}\n")),
            (None, None) => md.push_str("- displayed: (not selected)\n"),
        }
    }
    if let Ok(csv) = fs::read_to_string(run.calibration_csv()) {
        md.push_str("\n## Calibration\n\n");
        md.push_str(&markdown_table_from_csv(&csv));
    }
    if let Ok(csv) = fs::read_to_string(run.metrics_csv()) {
        md.push_str("\n## Evaluation\n\n");
        md.push_str(&markdown_table_from_csv(&csv));
    }
    write_bytes(&run.report_md(), md.as_bytes())?;
    Ok(md)
}
