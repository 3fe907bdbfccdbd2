//! Offline end-to-end runs over temp directories: training artifacts,
//! explanation records, scripted clear/unclear selection, calibration and
//! evaluation files, reporting, and byte-level determinism.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latent_lens::explainers::{BackendKind, ExplainerConfig, ScriptedScenario};
use latent_lens::pipeline::{
    cmd_calibrate, cmd_evaluate, cmd_explain, cmd_report, cmd_select, cmd_train, AnnotationRecord,
    DatasetSource, EpsilonConfig, RunConfig, RunDir, SequenceRecord,
};
use latent_lens::similarity::NO_CLEAR_EXPLANATION;
use latent_lens::tinyvae::{self, TrainingConfig, Variant};

fn tiny_config(out_dir: &Path) -> RunConfig {
    let training = TrainingConfig {
        epochs: 2,
        batch_size: 16,
        hidden_sizes: vec![16],
        latent_dim: 3,
        learning_rate: 2e-3,
        ..TrainingConfig::default()
    };
    RunConfig {
        dataset: DatasetSource::Procedural { count: 48, side: 16 },
        variants: vec![Variant::Vae],
        training: latent_lens::pipeline::TrainingMatrix {
            vae: TrainingConfig {
                variant: Variant::Vae,
                ..training.clone()
            },
            beta_vae: TrainingConfig {
                variant: Variant::BetaVae,
                beta: 4.0,
                ..training.clone()
            },
            beta_tcvae: TrainingConfig {
                variant: Variant::BetaTcvae,
                beta: 6.0,
                ..training
            },
        },
        explainer: ExplainerConfig {
            backend: BackendKind::Heuristic,
            samples_n: 4,
            ..ExplainerConfig::default()
        },
        out_dir: out_dir.to_path_buf(),
        seed: 5,
        ..RunConfig::default()
    }
}

#[test]
fn train_writes_loadable_params_and_decreasing_history() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let written = cmd_train(&config).unwrap();
    assert_eq!(written.len(), 1);
    let bytes = fs::read(&written[0]).unwrap();
    let params = tinyvae::load_params(&bytes).unwrap();
    assert_eq!(params.latent_dim, 3);
    assert_eq!(params.input_dim(), 256);

    let history = fs::read_to_string(RunDir::new(dir.path()).history_file(Variant::Vae)).unwrap();
    let totals: Vec<f64> = history
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 2);
    assert!(totals[1] < totals[0], "history not improving: {totals:?}");

    // Retraining with the same seed reproduces the parameter file exactly.
    let again = cmd_train(&config).unwrap();
    assert_eq!(fs::read(&again[0]).unwrap(), bytes);
}

#[test]
fn heuristic_explain_is_fully_offline_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_train(&config).unwrap();
    let outcome = cmd_explain(&config).unwrap();
    assert_eq!(outcome.records.len(), 3); // one per latent dimension
    let run = RunDir::new(dir.path());
    for record in &outcome.records {
        assert!(record.error.is_none(), "unexpected error: {:?}", record.error);
        assert!(record.certainty.is_some());
        assert!(record.displayed.is_some());
        assert!(run.root.join(&record.strip_path).exists());
        assert!(run
            .responses_dir()
            .join(format!("{}.jsonl", record.sequence_id))
            .exists());
    }
    assert!(run.certainty_jsonl().exists());
    assert!(run.records_jsonl().exists());
}

fn scenario_file(dir: &Path) -> PathBuf {
    let scenarios = vec![
        ScriptedScenario {
            scenario_id: "clear".to_string(),
            on_topic_pool: vec![
                "The square moves from left to right.".to_string(),
                "The square moves steadily from left to right.".to_string(),
                "The square shifts from the left to the right.".to_string(),
            ],
            off_topic_pool: vec![
                "Clouds drift over a quiet valley.".to_string(),
                "The recipe calls for two fresh eggs.".to_string(),
                "Trains run late on winter mornings.".to_string(),
            ],
            noise_p: 0.0,
        },
        ScriptedScenario {
            scenario_id: "unclear".to_string(),
            on_topic_pool: vec![
                "The square moves from left to right.".to_string(),
                "The square moves steadily from left to right.".to_string(),
                "The square shifts from the left to the right.".to_string(),
            ],
            off_topic_pool: vec![
                "Blue herons wade through the marsh.".to_string(),
                "Violins need new strings every season.".to_string(),
                "Deserts cool quickly after sunset.".to_string(),
                "The printer jammed on page forty.".to_string(),
            ],
            noise_p: 1.0,
        },
    ];
    let path = dir.join("scenarios.json");
    fs::write(&path, serde_json::to_string_pretty(&scenarios).unwrap()).unwrap();
    path
}

fn scripted_config(dir: &Path) -> RunConfig {
    let mut config = tiny_config(dir);
    config.explainer.backend = BackendKind::Scripted;
    config.explainer.samples_n = 5;
    config.scenarios_path = Some(scenario_file(dir));
    config
}

#[test]
fn scripted_clear_and_unclear_scenarios_select_and_suppress() {
    let dir = tempfile::tempdir().unwrap();
    let config = scripted_config(dir.path());
    cmd_train(&config).unwrap();
    let outcome = cmd_explain(&config).unwrap();

    // Sequences alternate scenarios: dims 0 and 2 are clear, dim 1 unclear.
    let displayed: Vec<&str> = outcome
        .records
        .iter()
        .map(|r| r.displayed.as_deref().unwrap())
        .collect();
    assert_ne!(displayed[0], NO_CLEAR_EXPLANATION);
    assert!(displayed[0].contains("left to right"));
    assert_eq!(displayed[1], NO_CLEAR_EXPLANATION);
    assert_ne!(displayed[2], NO_CLEAR_EXPLANATION);

    // Suppression consistency: sentinel exactly when certainty < epsilon.
    for record in &outcome.records {
        let suppressed = record.displayed.as_deref() == Some(NO_CLEAR_EXPLANATION);
        assert_eq!(suppressed, record.certainty.unwrap() < outcome.epsilon);
    }
}

fn annotations_for(records: &[SequenceRecord], dir: &Path) -> PathBuf {
    let rows: Vec<AnnotationRecord> = records
        .iter()
        .enumerate()
        .map(|(i, r)| AnnotationRecord {
            sequence_id: r.sequence_id.clone(),
            label: u8::from(i % 2 == 0),
            references: vec![
                "The square moves from left to right.".to_string(),
                "A square travels left to right across the row.".to_string(),
            ],
        })
        .collect();
    let path = dir.join("annotations.jsonl");
    let text: String = rows
        .iter()
        .map(|r| format!("{}\n", serde_json::to_string(r).unwrap()))
        .collect();
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn calibrate_evaluate_and_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let config = scripted_config(dir.path());
    cmd_train(&config).unwrap();
    let outcome = cmd_explain(&config).unwrap();
    let annotations = annotations_for(&outcome.records, dir.path());

    let results = cmd_calibrate(&config, Some(&annotations), None).unwrap();
    assert_eq!(results.len(), 1);
    let (kind, calibration) = &results[0];
    assert_eq!(kind.as_str(), "lexical_rougeL");
    assert_eq!(calibration.auc, 1.0, "clear/unclear should separate");
    assert_eq!(calibration.f1, 1.0);
    let run = RunDir::new(dir.path());
    let csv = fs::read_to_string(run.calibration_csv()).unwrap();
    assert!(csv.starts_with("uncertainty_estimate,auc,f1_score,precision,recall\n"));
    assert!(csv.contains("lexical similarity"));

    let rows = cmd_evaluate(&config, None, Some(&annotations)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].dataset, "procedural");
    assert_eq!(rows[0].vae_variant, "vae");
    assert!(rows[0].rouge_l > 0.3, "rouge {:?}", rows[0].rouge_l);
    let metrics = fs::read_to_string(run.metrics_csv()).unwrap();
    assert!(metrics.starts_with("dataset,vae_variant,backend,bleu,rouge_l,meteor,embed_f1\n"));

    let report = cmd_report(&config).unwrap();
    assert!(report.contains("## vae-s5-z0"));
    assert!(report.contains(NO_CLEAR_EXPLANATION));
    assert!(report.contains("## Calibration"));
    assert!(report.contains("## Evaluation"));
    let on_disk = fs::read_to_string(run.report_md()).unwrap();
    assert_eq!(report, on_disk);

    // Regeneration over an unchanged run directory is byte-identical.
    let second = cmd_report(&config).unwrap();
    assert_eq!(report, second);
}

#[test]
fn epsilon_calibration_inside_explain() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = scripted_config(dir.path());
    cmd_train(&config).unwrap();
    // First pass with fixed epsilon to learn the ids, then rerun with
    // calibration from labels.
    let first = cmd_explain(&config).unwrap();
    let annotations = annotations_for(&first.records, dir.path());
    config.epsilon = EpsilonConfig::Calibrate {
        annotations: annotations.clone(),
    };
    let outcome = cmd_explain(&config).unwrap();
    let calibration = outcome.calibration.expect("calibration ran");
    assert_eq!(calibration.f1, 1.0);
    assert_eq!(outcome.epsilon, calibration.epsilon);
}

#[test]
fn select_rewrites_displayed_fields() {
    let dir = tempfile::tempdir().unwrap();
    let config = scripted_config(dir.path());
    cmd_train(&config).unwrap();
    cmd_explain(&config).unwrap();

    let everything = cmd_select(&config, 0.0).unwrap();
    assert!(everything
        .iter()
        .all(|r| r.displayed.as_deref() != Some(NO_CLEAR_EXPLANATION)));

    let nothing = cmd_select(&config, 1.5).unwrap();
    assert!(nothing
        .iter()
        .filter(|r| r.certainty.is_some())
        .all(|r| r.displayed.as_deref() == Some(NO_CLEAR_EXPLANATION)));
}

#[test]
fn idx_dataset_source_trains() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng_state = 1234u64;
    let mut images = Vec::new();
    for _ in 0..12 {
        let img: Vec<u8> = (0..64)
            .map(|_| {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (rng_state >> 56) as u8
            })
            .collect();
        images.push(img);
    }
    let images_path = dir.path().join("images.idx3");
    fs::write(&images_path, common::write_idx3(&images, 8, 8)).unwrap();
    let labels_path = dir.path().join("labels.idx1");
    fs::write(&labels_path, common::write_idx1(&[1u8; 12])).unwrap();

    let mut config = tiny_config(&dir.path().join("run"));
    config.dataset = DatasetSource::Idx {
        images: images_path,
        labels: Some(labels_path),
    };
    config.training.vae.batch_size = 6;
    config.training.vae.hidden_sizes = vec![8];
    let written = cmd_train(&config).unwrap();
    let params = tinyvae::load_params(&fs::read(&written[0]).unwrap()).unwrap();
    assert_eq!(params.input_dim(), 64);
    assert_eq!(config.dataset_label(), "mnist");
}

#[test]
fn calibrate_orders_multiple_similarity_kinds() {
    use latent_lens::similarity::{CertaintyReport, SimilarityKind};
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run = RunDir::new(dir.path());
    fs::create_dir_all(&run.root).unwrap();

    // Cosine certainty separates the classes perfectly; lexical overlaps.
    let mut lines = String::new();
    for i in 0..6 {
        let positive = i % 2 == 0;
        let cosine = if positive { 0.9 } else { 0.1 };
        let lexical = if positive { 0.5 + 0.1 * i as f64 / 6.0 } else { 0.5 };
        for (kind, value) in [
            (SimilarityKind::CosineEmbedding, cosine),
            (SimilarityKind::LexicalRougeL, lexical),
        ] {
            let report = CertaintyReport {
                sequence_id: format!("seq{i}"),
                similarity_kind: kind,
                pairwise: vec![vec![1.0, value], vec![value, 1.0]],
                certainty: value,
                per_response_mean: vec![value, value],
                selected_index: 0,
            };
            lines.push_str(&serde_json::to_string(&report).unwrap());
            lines.push('\n');
        }
    }
    fs::write(run.certainty_jsonl(), lines).unwrap();

    let annotations: String = (0..6)
        .map(|i| {
            format!(
                "{}\n",
                serde_json::to_string(&AnnotationRecord {
                    sequence_id: format!("seq{i}"),
                    label: u8::from(i % 2 == 0),
                    references: Vec::new(),
                })
                .unwrap()
            )
        })
        .collect();
    let annotations_path = dir.path().join("labels.jsonl");
    fs::write(&annotations_path, annotations).unwrap();

    let results = cmd_calibrate(&config, Some(&annotations_path), None).unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0].0.as_str(), "cosine_embedding");
    assert_eq!(results[1].0.as_str(), "lexical_rougeL");
    assert!(results[0].1.auc > results[1].1.auc, "cosine should separate better");
    let csv = fs::read_to_string(run.calibration_csv()).unwrap();
    assert!(csv.contains("cosine similarity"));
    assert!(csv.contains("lexical similarity"));
}

#[test]
fn evaluate_emits_one_row_per_backend() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let run = RunDir::new(dir.path());
    fs::create_dir_all(&run.root).unwrap();

    let mut records = String::new();
    for (i, backend) in ["heuristic", "heuristic", "scripted", "scripted"]
        .iter()
        .enumerate()
    {
        let record = SequenceRecord {
            sequence_id: format!("seq{i}"),
            dataset: "procedural".to_string(),
            variant: "vae".to_string(),
            backend: backend.to_string(),
            dim_index: i,
            strip_path: format!("strips/seq{i}.png"),
            certainty: Some(0.9),
            selected: Some("The shape moves from left to right.".to_string()),
            displayed: Some("The shape moves from left to right.".to_string()),
            error: None,
        };
        records.push_str(&serde_json::to_string(&record).unwrap());
        records.push('\n');
    }
    fs::write(run.records_jsonl(), records).unwrap();

    let annotations: String = (0..4)
        .map(|i| {
            format!(
                "{}\n",
                serde_json::to_string(&AnnotationRecord {
                    sequence_id: format!("seq{i}"),
                    label: 1,
                    references: vec!["The shape moves from left to right.".to_string()],
                })
                .unwrap()
            )
        })
        .collect();
    let annotations_path = dir.path().join("refs.jsonl");
    fs::write(&annotations_path, annotations).unwrap();

    let rows = cmd_evaluate(&config, None, Some(&annotations_path)).unwrap();
    assert_eq!(rows.len(), 2, "one row per (dataset, variant, backend)");
    assert_eq!(rows[0].backend, "heuristic");
    assert_eq!(rows[1].backend, "scripted");
    for row in &rows {
        assert!((row.bleu - 1.0).abs() < 1e-9);
        assert!((row.rouge_l - 1.0).abs() < 1e-9);
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().to_string();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn two_identical_offline_runs_are_byte_identical_except_manifest() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [dir_a.path(), dir_b.path()] {
        let config = tiny_config(dir);
        cmd_train(&config).unwrap();
        latent_lens::pipeline::cmd_traverse(&config).unwrap();
        cmd_explain(&config).unwrap();
        cmd_report(&config).unwrap();
    }
    let mut a = snapshot(dir_a.path());
    let mut b = snapshot(dir_b.path());
    a.remove("manifest.json");
    b.remove("manifest.json");
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    for (path, bytes) in &a {
        assert_eq!(bytes, &b[path], "file {path} differs between runs");
    }
}
