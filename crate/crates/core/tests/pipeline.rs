//! End-to-end pipeline tests over the bundled synthetic capture: stage
//! wiring, artifact determinism, leakage guards, and the CLI binary.

mod common;

use common::{fixture_config, synthetic_attack_log, synthetic_capture, testdata_dir, write_fixtures};
use modaudit::artifact::{self, ArtifactError, ArtifactHeader};
use modaudit::classify::{Classifier, RuleClassifier};
use modaudit::config::Backend;
use modaudit::encode::{encode_token_string, parse_token_string};
use modaudit::ingest::{self, compute_iat, export_frames_csv, CaptureFormat, Frame};
use modaudit::stage::{self, files, load_split, run_stage, Stage, StageError};
use modaudit::types::{Label, Partition};
use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn run_all(cfg: &modaudit::RunConfig) {
    for stage in Stage::PIPELINE_ORDER {
        run_stage(stage, cfg).unwrap_or_else(|e| panic!("stage {stage} failed: {e}"));
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.path().is_file() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).unwrap(),
            );
        }
    }
    out
}

#[test]
fn full_pipeline_is_deterministic_and_leak_free() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    let dir = cfg.artifact_dir();

    run_all(&cfg);
    let first = snapshot(&dir);
    assert!(first.contains_key(files::REPORT));
    assert!(first.contains_key(files::METRICS_CSV));

    // Re-running every stage rewrites byte-identical artifacts.
    run_all(&cfg);
    let second = snapshot(&dir);
    assert_eq!(first.len(), second.len());
    for (name, bytes) in &first {
        assert_eq!(bytes, &second[name], "artifact {name} changed between runs");
    }

    // The split carries both classes in every partition and passes the
    // leakage audit together with the fitted bins.
    let (_, frames) = artifact::read_jsonl::<Frame>(&dir.join(files::FRAMES), "ingest", &cfg).unwrap();
    let split = load_split(&dir, &cfg).unwrap();
    let (_, bins) = artifact::read_json::<modaudit::encode::BinBoundaries>(
        &dir.join(files::BINS),
        "fit-bins",
        &cfg,
    )
    .unwrap();
    let report = modaudit::labelsplit::verify_no_leakage(&split, &frames, Some(&bins));
    assert!(report.pass, "{:?}", report.violations);

    let (_, labels_rows) = artifact::read_csv(&dir.join(files::LABELS), "label", &cfg).unwrap();
    let labels: BTreeMap<&str, &str> = labels_rows
        .iter()
        .map(|row| row.rsplit_once(',').unwrap())
        .collect();
    let mut class_by_partition: BTreeMap<Partition, (u64, u64)> = BTreeMap::new();
    for (id, partition) in &split.assignment {
        let entry = class_by_partition.entry(*partition).or_default();
        match labels[id.as_str()] {
            "critical" => entry.1 += 1,
            _ => entry.0 += 1,
        }
    }
    for partition in [Partition::Train, Partition::Validation, Partition::Test] {
        let (normal, critical) = class_by_partition[&partition];
        assert!(normal > 0 && critical > 0, "partition {partition} lacks a class: {normal}/{critical}");
    }
}

#[test]
fn ingest_counters_capture_fixture_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    run_stage(Stage::Ingest, &cfg).unwrap();
    let (_, stats) = artifact::read_json::<ingest::IngestStats>(
        &cfg.artifact_dir().join(files::INGEST_STATS),
        "ingest",
        &cfg,
    )
    .unwrap();
    assert_eq!(stats.dedup_removed, 2, "replayed duplicates should collapse");
    assert_eq!(stats.non_modbus_skipped, 1);
    assert_eq!(stats.parse_warnings, 1);
    assert_eq!(stats.clock_regressions, 0);
}

#[test]
fn token_artifact_has_input_parity_with_reencoding() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    for stage in [Stage::Ingest, Stage::Label, Stage::Split, Stage::FitBins, Stage::Classify] {
        run_stage(stage, &cfg).unwrap();
    }
    let dir = cfg.artifact_dir();
    let (_, frames) = artifact::read_jsonl::<Frame>(&dir.join(files::FRAMES), "ingest", &cfg).unwrap();
    let (_, bins) = artifact::read_json::<modaudit::encode::BinBoundaries>(
        &dir.join(files::BINS),
        "fit-bins",
        &cfg,
    )
    .unwrap();
    let (_, tokens) = artifact::read_jsonl::<stage::TokenRecord>(
        &dir.join(files::TOKENS),
        "classify",
        &cfg,
    )
    .unwrap();
    assert_eq!(frames.len(), tokens.len());
    for (frame, token) in frames.iter().zip(&tokens) {
        assert_eq!(frame.id(), token.id);
        assert_eq!(encode_token_string(frame, &bins).text, token.text);
        parse_token_string(&token.text).expect("artifact token strings stay grammar-valid");
    }
}

#[test]
fn rule_predictions_replay_the_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    for stage in [Stage::Ingest, Stage::Label, Stage::Split, Stage::FitBins, Stage::Classify] {
        run_stage(stage, &cfg).unwrap();
    }
    let dir = cfg.artifact_dir();
    let (_, tokens) = artifact::read_jsonl::<stage::TokenRecord>(
        &dir.join(files::TOKENS),
        "classify",
        &cfg,
    )
    .unwrap();
    let text_by_id: BTreeMap<_, _> = tokens.iter().map(|t| (t.id.clone(), &t.text)).collect();
    let (_, predictions) = artifact::read_jsonl::<stage::PredictionRecord>(
        &dir.join(files::PREDICTIONS),
        "classify",
        &cfg,
    )
    .unwrap();
    assert!(!predictions.is_empty());

    let clf = RuleClassifier::new(cfg.rules.clone());
    for pred in &predictions {
        let oracle = clf.classify_text(text_by_id[&pred.id]).unwrap();
        assert_eq!(pred.label, oracle.label, "label mismatch for {}", pred.id);
        assert_eq!(pred.confidence, oracle.confidence);
        assert_eq!(pred.rationale, oracle.rationale);
        assert_eq!(pred.latency_ms, 0.0);
    }
}

#[test]
fn audit_pass_never_touches_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    for stage in [Stage::Ingest, Stage::Label, Stage::Split, Stage::FitBins, Stage::Classify] {
        run_stage(stage, &cfg).unwrap();
    }
    let predictions_path = cfg.artifact_dir().join(files::PREDICTIONS);
    let before = artifact::file_checksum(&predictions_path).unwrap();
    run_stage(Stage::Audit, &cfg).unwrap();
    assert_eq!(before, artifact::file_checksum(&predictions_path).unwrap());

    let (_, audits) = artifact::read_jsonl::<stage::AuditRow>(
        &cfg.artifact_dir().join(files::AUDITS),
        "audit",
        &cfg,
    )
    .unwrap();
    let (_, predictions) = artifact::read_jsonl::<stage::PredictionRecord>(
        &predictions_path,
        "classify",
        &cfg,
    )
    .unwrap();
    assert_eq!(audits.len(), predictions.len());
    for (audit, pred) in audits.iter().zip(&predictions) {
        assert_eq!(audit.id, pred.id);
        assert_eq!(audit.label_explained, pred.label);
        assert!(audit.validity.json_well_formed && audit.validity.spans_valid);
    }
}

#[test]
fn missing_dependency_names_producing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    match run_stage(Stage::FitBins, &cfg) {
        Err(StageError::Artifact(ArtifactError::MissingDependency { produced_by, .. })) => {
            assert_eq!(produced_by, "ingest");
        }
        other => panic!("expected missing-dependency error, got {other:?}"),
    }
    run_stage(Stage::Ingest, &cfg).unwrap();
    run_stage(Stage::Label, &cfg).unwrap();
    match run_stage(Stage::FitBins, &cfg) {
        Err(StageError::Artifact(ArtifactError::MissingDependency { produced_by, artifact })) => {
            assert_eq!(produced_by, "split");
            assert_eq!(artifact, files::SPLIT);
        }
        other => panic!("expected missing-dependency error, got {other:?}"),
    }
}

#[test]
fn artifact_hash_mismatch_refuses_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg_a = fixture_config(&capture, &log, &tmp.path().join("runs"));
    let mut cfg_b = cfg_a.clone();
    cfg_b.modbus_port = 5020;

    let path = tmp.path().join("bins.json");
    let bins = modaudit::encode::BinBoundaries {
        len_edges: vec![1, 2, 3],
        iat_edges: vec![1, 2, 3, 4],
        fit_split_id: "s".into(),
        version: 1,
    };
    artifact::write_json(&path, &ArtifactHeader::new("bins.json", "fit-bins", &cfg_a), &bins)
        .unwrap();
    match artifact::read_json::<modaudit::encode::BinBoundaries>(&path, "fit-bins", &cfg_b) {
        Err(ArtifactError::HashMismatch { .. }) => {}
        other => panic!("expected hash mismatch, got {other:?}"),
    }
    assert!(artifact::read_json::<modaudit::encode::BinBoundaries>(&path, "fit-bins", &cfg_a).is_ok());
}

#[test]
fn baseline_backend_classifies_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let mut cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    cfg.backend = Backend::Baseline;

    for stage in [
        Stage::Ingest,
        Stage::Label,
        Stage::Split,
        Stage::FitBins,
        Stage::Classify,
        Stage::Report,
    ] {
        run_stage(stage, &cfg).unwrap();
    }
    let dir = cfg.artifact_dir();
    assert!(dir.join(files::BASELINE).exists());
    let (_, predictions) = artifact::read_jsonl::<stage::PredictionRecord>(
        &dir.join(files::PREDICTIONS),
        "classify",
        &cfg,
    )
    .unwrap();
    assert!(predictions.iter().any(|p| p.label == Label::Critical));
    assert!(predictions.iter().any(|p| p.label == Label::Normal));

    // The audit and probe stages are defined for token-scoring back ends.
    match run_stage(Stage::Audit, &cfg) {
        Err(StageError::UnsupportedBackend { backend, .. }) => assert_eq!(backend, "baseline"),
        other => panic!("expected unsupported-backend error, got {other:?}"),
    }
}

#[test]
fn csv_export_roundtrip_preserves_all_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    run_stage(Stage::Ingest, &cfg).unwrap();
    let (_, frames) = artifact::read_jsonl::<Frame>(
        &cfg.artifact_dir().join(files::FRAMES),
        "ingest",
        &cfg,
    )
    .unwrap();

    let mut out = Vec::new();
    export_frames_csv(&frames, &mut out).unwrap();
    let csv_path = tmp.path().join("frames.csv");
    std::fs::write(&csv_path, &out).unwrap();

    let parsed = ingest::parse_capture(&csv_path, CaptureFormat::Csv, cfg.modbus_port).unwrap();
    let mut reingested = parsed.frames;
    compute_iat(&mut reingested, cfg.flow_key);

    // The CSV schema does not carry the parse-warning flag; everything else
    // (including recomputed inter-arrival times) must round-trip exactly.
    assert_eq!(frames.len(), reingested.len());
    for (a, b) in frames.iter().zip(&reingested) {
        let mut b = b.clone();
        b.parse_warning = a.parse_warning;
        assert_eq!(*a, b);
    }
}

#[test]
fn committed_fixtures_match_generator() {
    let testdata = testdata_dir();
    let capture = std::fs::read(testdata.join("synthetic.pcap")).expect("bundled capture exists");
    assert_eq!(capture, synthetic_capture(), "bundled pcap is stale; regenerate testdata");
    let log = std::fs::read_to_string(testdata.join("attacks.csv")).expect("bundled log exists");
    assert_eq!(log, synthetic_attack_log(), "bundled attack log is stale; regenerate testdata");
}

/// Maintenance helper: `cargo test -p modaudit --test pipeline -- --ignored regenerate`.
#[test]
#[ignore]
fn regenerate_testdata() {
    let testdata = testdata_dir();
    std::fs::create_dir_all(&testdata).unwrap();
    std::fs::write(testdata.join("synthetic.pcap"), synthetic_capture()).unwrap();
    std::fs::write(testdata.join("attacks.csv"), synthetic_attack_log()).unwrap();
}

#[test]
fn cli_runs_the_full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (capture, log) = write_fixtures(tmp.path());
    let cfg = fixture_config(&capture, &log, &tmp.path().join("runs"));
    let config_path = tmp.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let bin = env!("CARGO_BIN_EXE_modaudit");
    let dry = Command::new(bin)
        .args(["run-all", "--config"])
        .arg(&config_path)
        .arg("--dry-run")
        .output()
        .unwrap();
    assert!(dry.status.success(), "dry run failed: {}", String::from_utf8_lossy(&dry.stderr));
    assert!(String::from_utf8_lossy(&dry.stdout).contains("config hash"));

    let out = Command::new(bin)
        .args(["run-all", "--config"])
        .arg(&config_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "run-all failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("evaluation report"));
    assert!(cfg.artifact_dir().join(files::REPORT).exists());

    // A stage whose dependencies are missing exits nonzero naming the
    // producing stage.
    let tmp2 = tempfile::tempdir().unwrap();
    let cfg2 = fixture_config(&capture, &log, &tmp2.path().join("runs"));
    let config2 = tmp2.path().join("config.json");
    std::fs::write(&config2, serde_json::to_string_pretty(&cfg2).unwrap()).unwrap();
    let out = Command::new(bin)
        .args(["probe", "--config"])
        .arg(&config2)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("classify"));
}
