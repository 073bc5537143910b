//! Pipeline stages over a run directory named by the config hash. Outputs
//! are written atomically with embedded config headers; each stage enforces
//! its dependency artifacts and refuses hash mismatches.

use crate::artifact::{self, ArtifactError, ArtifactHeader};
use crate::audit::{validate_record, AuditOutcome, AuditRecord, Auditor, CounterfactualEdit,
                   LlmAuditor, RecordValidity, RuleAuditor};
use crate::classify::llm::{HttpTransport, LlmClassifier, PromptConfig};
use crate::classify::{classify, sweep_threshold, Classifier, ClassifyError, Prediction,
                      RuleClassifier, ScoredBaseline, ThresholdSweep, TokenUsage};
use crate::config::{Backend, ConfigError, RunConfig};
use crate::encode::{encode_numeric, encode_token_string, fit_bins, parse_token_string,
                    BinBoundaries, EncodeError};
use crate::ingest::{self, compute_iat, dedup_normalize, Frame, IngestError, IngestStats};
use crate::labelsplit::{build_windows, label_frames, make_split, verify_no_leakage, AttackWindow,
                        Split, SplitError, SplitPolicy};
use crate::probes::{counterfactual_flip_rate, counterfactual_probe, necessity_decomposition,
                    necessity_probe, pass_curve, sufficiency_probe, BootstrapCfg, PassCurve,
                    ProbeError, ProbeKind, ProbeResult};
use crate::report::{compute_metrics, latency_summary, metrics_csv_row, render_text_summary,
                    MetricsSummary, Prices, ReportBundle, ReportError, UsageTotals};
use crate::types::{FrameId, Label, Partition};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Artifact file names inside a run directory.
pub mod files {
    pub const FRAMES: &str = "frames.jsonl";
    pub const INGEST_STATS: &str = "ingest_stats.json";
    pub const WINDOWS: &str = "windows.json";
    pub const LABELS: &str = "labels.csv";
    pub const SPLIT: &str = "split.csv";
    pub const BINS: &str = "bins.json";
    pub const TOKENS: &str = "tokens.jsonl";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const BASELINE: &str = "baseline.json";
    pub const AUDITS: &str = "audits.jsonl";
    pub const PROBES: &str = "probes.jsonl";
    pub const SUFFICIENCY_CURVE: &str = "sufficiency_curve.csv";
    pub const NECESSITY_CURVE: &str = "necessity_curve.csv";
    pub const FLIP_BASELINE: &str = "flip_baseline.json";
    pub const REPORT: &str = "report.json";
    pub const METRICS_CSV: &str = "metrics.csv";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    Label,
    Split,
    FitBins,
    Classify,
    Audit,
    Probe,
    Report,
}

impl Stage {
    /// Dependency-respecting execution order.
    pub const PIPELINE_ORDER: [Stage; 8] = [
        Stage::Ingest,
        Stage::Label,
        Stage::Split,
        Stage::FitBins,
        Stage::Classify,
        Stage::Audit,
        Stage::Probe,
        Stage::Report,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Label => "label",
            Stage::Split => "split",
            Stage::FitBins => "fit-bins",
            Stage::Classify => "classify",
            Stage::Audit => "audit",
            Stage::Probe => "probe",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ingest" => Ok(Stage::Ingest),
            "label" => Ok(Stage::Label),
            "split" => Ok(Stage::Split),
            "fit-bins" => Ok(Stage::FitBins),
            "classify" => Ok(Stage::Classify),
            "audit" => Ok(Stage::Audit),
            "probe" => Ok(Stage::Probe),
            "report" => Ok(Stage::Report),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("leakage guard: {0}")]
    LeakageGuard(String),
    #[error("fit-bins refuses frame {0}: not tagged train by the split")]
    NonTrainInput(FrameId),
    #[error("backend {backend} does not support the {stage} stage")]
    UnsupportedBackend { stage: &'static str, backend: &'static str },
    #[error("prompt configuration: {0}")]
    Prompt(String),
    #[error("artifact {artifact} is inconsistent: {reason}")]
    Inconsistent { artifact: String, reason: String },
}

/// Output of one stage run: artifacts written plus optional text for
/// standard output.
#[derive(Debug, Default)]
pub struct StageOutput {
    pub artifacts: Vec<PathBuf>,
    pub stdout: Option<String>,
}

fn thread_pool(cfg: &RunConfig) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .expect("thread pool builds")
}

// ---------------------------------------------------------------------------
// Artifact record schemas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: FrameId,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: FrameId,
    pub label: Label,
    pub confidence: f64,
    pub rationale: String,
    pub latency_ms: f64,
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
    pub attempts: u32,
}

impl PredictionRecord {
    fn from_prediction(id: FrameId, p: &Prediction) -> Self {
        PredictionRecord {
            id,
            label: p.label,
            confidence: p.confidence,
            rationale: p.rationale.clone(),
            latency_ms: p.latency_ms,
            input_tokens: p.token_usage.map(|u| u.input_tokens),
            output_tokens: p.token_usage.map(|u| u.output_tokens),
            attempts: p.attempts,
        }
    }

    fn to_prediction(&self) -> Prediction {
        Prediction {
            label: self.label,
            confidence: self.confidence,
            rationale: self.rationale.clone(),
            latency_ms: self.latency_ms,
            token_usage: match (self.input_tokens, self.output_tokens) {
                (Some(input_tokens), Some(output_tokens)) => Some(TokenUsage {
                    input_tokens,
                    output_tokens,
                }),
                _ => None,
            },
            attempts: self.attempts,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: FrameId,
    pub label_explained: Label,
    pub evidence: Vec<String>,
    pub risk_tags: std::collections::BTreeSet<crate::classify::RiskTag>,
    pub counterfactual: Option<CounterfactualEdit>,
    pub validity: RecordValidity,
    pub attempts: u32,
}

impl AuditRow {
    pub fn to_record(&self) -> AuditRecord {
        AuditRecord {
            frame_id: self.id.clone(),
            label_explained: self.label_explained,
            evidence: self.evidence.clone(),
            risk_tags: self.risk_tags.clone(),
            counterfactual: self.counterfactual.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WindowsArtifact {
    policy: SplitPolicy,
    event_count: u64,
    log_warnings: u64,
    windows: Vec<AttackWindow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BaselineArtifact {
    model: ScoredBaseline,
    sweep: ThresholdSweep,
    train_size: u64,
    validation_size: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlipBaselineArtifact {
    necessity_flip_baseline: Option<f64>,
    counterfactual_flip_rate: Option<f64>,
    counterfactual_counted: u64,
    classifier_config_hash: String,
}

// ---------------------------------------------------------------------------
// Shared loaders
// ---------------------------------------------------------------------------

fn load_frames(dir: &Path, cfg: &RunConfig) -> Result<Vec<Frame>, StageError> {
    let (_, frames) = artifact::read_jsonl::<Frame>(&dir.join(files::FRAMES), "ingest", cfg)?;
    Ok(frames)
}

fn load_labels(dir: &Path, cfg: &RunConfig) -> Result<BTreeMap<FrameId, Label>, StageError> {
    let (_, rows) = artifact::read_csv(&dir.join(files::LABELS), "label", cfg)?;
    let mut labels = BTreeMap::new();
    for row in rows {
        let (id, label) = row.rsplit_once(',').ok_or_else(|| StageError::Inconsistent {
            artifact: files::LABELS.into(),
            reason: format!("bad row {row:?}"),
        })?;
        labels.insert(
            FrameId::from(id),
            label.parse::<Label>().map_err(|e| StageError::Inconsistent {
                artifact: files::LABELS.into(),
                reason: e,
            })?,
        );
    }
    Ok(labels)
}

fn load_windows(dir: &Path, cfg: &RunConfig) -> Result<WindowsArtifact, StageError> {
    let (_, data) =
        artifact::read_json::<WindowsArtifact>(&dir.join(files::WINDOWS), "label", cfg)?;
    Ok(data)
}

/// Reassemble the Split from split.csv plus the windows manifest.
pub fn load_split(dir: &Path, cfg: &RunConfig) -> Result<Split, StageError> {
    let (comments, rows) = artifact::read_csv(&dir.join(files::SPLIT), "split", cfg)?;
    let split_id = comments
        .get("split_id")
        .cloned()
        .ok_or_else(|| StageError::Inconsistent {
            artifact: files::SPLIT.into(),
            reason: "missing split_id comment".into(),
        })?;
    let policy: SplitPolicy = serde_json::from_str(
        comments.get("policy").ok_or_else(|| StageError::Inconsistent {
            artifact: files::SPLIT.into(),
            reason: "missing policy comment".into(),
        })?,
    )
    .map_err(|e| StageError::Inconsistent {
        artifact: files::SPLIT.into(),
        reason: format!("bad policy json: {e}"),
    })?;
    let mut assignment = BTreeMap::new();
    for row in rows {
        let (id, partition) = row.rsplit_once(',').ok_or_else(|| StageError::Inconsistent {
            artifact: files::SPLIT.into(),
            reason: format!("bad row {row:?}"),
        })?;
        assignment.insert(
            FrameId::from(id),
            partition
                .parse::<Partition>()
                .map_err(|e| StageError::Inconsistent {
                    artifact: files::SPLIT.into(),
                    reason: e,
                })?,
        );
    }
    let windows = load_windows(dir, cfg)?;
    let n = assignment.len().max(1) as f64;
    let count = |p: Partition| assignment.values().filter(|&&q| q == p).count() as f64 / n;
    Ok(Split {
        split_id,
        policy,
        achieved: crate::labelsplit::SplitRatios {
            train: count(Partition::Train),
            validation: count(Partition::Validation),
            test: count(Partition::Test),
        },
        assignment,
        window_manifest: windows.windows,
        warnings: Vec::new(),
    })
}

fn load_bins(dir: &Path, cfg: &RunConfig) -> Result<BinBoundaries, StageError> {
    let (_, bins) = artifact::read_json::<BinBoundaries>(&dir.join(files::BINS), "fit-bins", cfg)?;
    bins.validate()?;
    Ok(bins)
}

fn load_tokens(dir: &Path, cfg: &RunConfig) -> Result<Vec<TokenRecord>, StageError> {
    let (_, tokens) =
        artifact::read_jsonl::<TokenRecord>(&dir.join(files::TOKENS), "classify", cfg)?;
    Ok(tokens)
}

fn load_predictions(dir: &Path, cfg: &RunConfig) -> Result<Vec<PredictionRecord>, StageError> {
    let (_, preds) =
        artifact::read_jsonl::<PredictionRecord>(&dir.join(files::PREDICTIONS), "classify", cfg)?;
    Ok(preds)
}

fn load_audits(dir: &Path, cfg: &RunConfig) -> Result<Vec<AuditRow>, StageError> {
    let (_, audits) = artifact::read_jsonl::<AuditRow>(&dir.join(files::AUDITS), "audit", cfg)?;
    Ok(audits)
}

// ---------------------------------------------------------------------------
// Prompt loading
// ---------------------------------------------------------------------------

fn read_prompt_file(dir: &Path, name: &str) -> Result<String, StageError> {
    std::fs::read_to_string(dir.join(name))
        .map_err(|e| StageError::Prompt(format!("{}: {e}", dir.join(name).display())))
}

#[derive(Debug, Deserialize)]
struct ExemplarRow {
    text: String,
    label: Label,
}

fn load_exemplars(dir: &Path) -> Result<Vec<(String, Label)>, StageError> {
    let raw = read_prompt_file(dir, "classifier_exemplars.jsonl")?;
    let mut exemplars = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ExemplarRow = serde_json::from_str(line)
            .map_err(|e| StageError::Prompt(format!("classifier_exemplars.jsonl:{}: {e}", i + 1)))?;
        exemplars.push((row.text, row.label));
    }
    Ok(exemplars)
}

fn load_cues(dir: &Path) -> Result<Vec<String>, StageError> {
    Ok(read_prompt_file(dir, "cues.txt")?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Classifier prompt configuration loaded verbatim from the prompts
/// directory.
pub fn load_classifier_prompt(cfg: &RunConfig) -> Result<PromptConfig, StageError> {
    let dir = &cfg.llm.prompt_dir;
    let prompt = PromptConfig {
        system_text: read_prompt_file(dir, "classifier_system.txt")?,
        schema_legend_text: read_prompt_file(dir, "legend.txt")?,
        exemplars: load_exemplars(dir)?,
        safety_cues: load_cues(dir)?,
        decoding: cfg.llm.decoding.clone(),
    };
    prompt.validate()?;
    Ok(prompt)
}

/// Auditor prompt configuration; a distinct system prompt from the
/// classifier's, with no few-shot exemplars.
pub fn load_auditor_prompt(cfg: &RunConfig) -> Result<PromptConfig, StageError> {
    let dir = &cfg.llm.prompt_dir;
    let prompt = PromptConfig {
        system_text: read_prompt_file(dir, "auditor_system.txt")?,
        schema_legend_text: read_prompt_file(dir, "legend.txt")?,
        exemplars: Vec::new(),
        safety_cues: load_cues(dir)?,
        decoding: cfg.llm.decoding.clone(),
    };
    prompt.validate()?;
    Ok(prompt)
}

fn build_classifier(cfg: &RunConfig) -> Result<Box<dyn Classifier>, StageError> {
    match cfg.backend {
        Backend::Rule => Ok(Box::new(RuleClassifier::new(cfg.rules.clone()))),
        Backend::Llm => {
            let prompt = load_classifier_prompt(cfg)?;
            let transport = HttpTransport::new(&cfg.llm.endpoint, &cfg.llm.api_key_env)?;
            Ok(Box::new(LlmClassifier::new(
                transport,
                prompt,
                &cfg.llm.model,
                cfg.llm.max_attempts,
            )?))
        }
        Backend::Baseline => Err(StageError::UnsupportedBackend {
            stage: "probe",
            backend: "baseline",
        }),
    }
}

fn build_auditor(cfg: &RunConfig) -> Result<Box<dyn Auditor>, StageError> {
    match cfg.backend {
        Backend::Rule => Ok(Box::new(RuleAuditor::new(cfg.rules.clone()))),
        Backend::Llm => {
            let prompt = load_auditor_prompt(cfg)?;
            let transport = HttpTransport::new(&cfg.llm.endpoint, &cfg.llm.api_key_env)?;
            Ok(Box::new(LlmAuditor::new(
                transport,
                prompt,
                &cfg.llm.model,
                cfg.llm.max_attempts,
            )?))
        }
        Backend::Baseline => Err(StageError::UnsupportedBackend {
            stage: "audit",
            backend: "baseline",
        }),
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn stage_ingest(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let pool = thread_pool(cfg);
    let parsed: Result<Vec<_>, IngestError> = pool.install(|| {
        cfg.inputs
            .captures
            .par_iter()
            .map(|input| ingest::parse_capture(&input.path, input.format, cfg.modbus_port))
            .collect()
    });
    let parsed = parsed?;

    let mut stats = IngestStats::default();
    let mut frames = Vec::new();
    for capture in parsed {
        stats.merge(&capture.stats);
        frames.extend(capture.frames);
    }
    let (mut frames, removed) = dedup_normalize(frames);
    stats.dedup_removed = removed;
    stats.clock_regressions = compute_iat(&mut frames, cfg.flow_key);
    stats.frames_parsed = frames.len() as u64;

    let frames_path = dir.join(files::FRAMES);
    artifact::write_jsonl(
        &frames_path,
        &ArtifactHeader::new(files::FRAMES, "ingest", cfg),
        &frames,
    )?;
    let stats_path = dir.join(files::INGEST_STATS);
    artifact::write_json(
        &stats_path,
        &ArtifactHeader::new(files::INGEST_STATS, "ingest", cfg),
        &stats,
    )?;
    Ok(StageOutput {
        artifacts: vec![frames_path, stats_path],
        stdout: None,
    })
}

fn stage_label(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let frames = load_frames(dir, cfg)?;
    let (events, log_warnings) = match &cfg.inputs.attack_log {
        Some(path) => {
            let result = ingest::parse_attack_log(path)?;
            (result.events, result.warnings)
        }
        None => (Vec::new(), 0),
    };
    let windows = build_windows(&events, cfg.windows.merge_gap_s, cfg.windows.tail_s);
    let labels = label_frames(&frames, &windows);

    let windows_path = dir.join(files::WINDOWS);
    artifact::write_json(
        &windows_path,
        &ArtifactHeader::new(files::WINDOWS, "label", cfg),
        &WindowsArtifact {
            policy: cfg.split_policy(),
            event_count: events.len() as u64,
            log_warnings,
            windows,
        },
    )?;

    let labels_path = dir.join(files::LABELS);
    let rows: Vec<String> = labels
        .iter()
        .map(|(id, label)| format!("{id},{label}"))
        .collect();
    artifact::write_csv(&labels_path, cfg, &[], "frame_id,label", &rows)?;
    Ok(StageOutput {
        artifacts: vec![windows_path, labels_path],
        stdout: None,
    })
}

fn stage_split(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let frames = load_frames(dir, cfg)?;
    let labels = load_labels(dir, cfg)?;
    let windows = load_windows(dir, cfg)?;
    let split = make_split(&frames, &labels, &windows.windows, &cfg.split_policy())?;

    let report = verify_no_leakage(&split, &frames, None);
    if !report.pass {
        return Err(StageError::LeakageGuard(report.violations.join("; ")));
    }

    let rows: Vec<String> = split
        .assignment
        .iter()
        .map(|(id, partition)| format!("{id},{partition}"))
        .collect();
    let comments = [
        ("split_id", split.split_id.clone()),
        (
            "policy",
            serde_json::to_string(&split.policy).expect("policy serializes"),
        ),
        (
            "achieved",
            serde_json::to_string(&split.achieved).expect("ratios serialize"),
        ),
        ("warnings", split.warnings.join(" | ")),
    ];
    let split_path = dir.join(files::SPLIT);
    artifact::write_csv(&split_path, cfg, &comments, "frame_id,partition", &rows)?;
    Ok(StageOutput {
        artifacts: vec![split_path],
        stdout: None,
    })
}

/// Fit bins over the given frames, refusing any frame the split does not
/// tag as train. This is the leakage guard: test-time refits are impossible.
pub fn fit_bins_train_only(
    frames: &[Frame],
    split: &Split,
    cfg: &RunConfig,
) -> Result<BinBoundaries, StageError> {
    for frame in frames {
        if split.assignment.get(&frame.id()) != Some(&Partition::Train) {
            return Err(StageError::NonTrainInput(frame.id()));
        }
    }
    Ok(fit_bins(
        frames,
        &split.split_id,
        cfg.bins.version,
        cfg.bins.degenerate_policy,
    )?)
}

fn stage_fit_bins(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let frames = load_frames(dir, cfg)?;
    let split = load_split(dir, cfg)?;
    let train: Vec<Frame> = frames
        .iter()
        .filter(|f| split.assignment.get(&f.id()) == Some(&Partition::Train))
        .cloned()
        .collect();
    let bins = fit_bins_train_only(&train, &split, cfg)?;
    let bins_path = dir.join(files::BINS);
    artifact::write_json(
        &bins_path,
        &ArtifactHeader::new(files::BINS, "fit-bins", cfg),
        &bins,
    )?;
    Ok(StageOutput {
        artifacts: vec![bins_path],
        stdout: None,
    })
}

fn classify_batch(
    cfg: &RunConfig,
    clf: &dyn Classifier,
    inputs: &[(FrameId, String)],
) -> Result<Vec<PredictionRecord>, StageError> {
    let pool = thread_pool(cfg);
    let results: Result<Vec<PredictionRecord>, ClassifyError> = pool.install(|| {
        inputs
            .par_iter()
            .map(|(id, text)| {
                classify(clf, text).map(|p| PredictionRecord::from_prediction(id.clone(), &p))
            })
            .collect()
    });
    Ok(results?)
}

fn stage_classify(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let frames = load_frames(dir, cfg)?;
    let labels = load_labels(dir, cfg)?;
    let split = load_split(dir, cfg)?;
    let bins = load_bins(dir, cfg)?;

    // Leakage guard: the bins must have been fitted under this very split.
    if bins.fit_split_id != split.split_id {
        return Err(StageError::LeakageGuard(format!(
            "bins.json was fitted under split {} but split.csv is {}",
            bins.fit_split_id, split.split_id
        )));
    }

    let bins_checksum = bins.checksum();
    let tokens: Vec<TokenRecord> = frames
        .iter()
        .map(|f| {
            let id = f.id();
            TokenRecord {
                label: labels.get(&id).copied(),
                text: encode_token_string(f, &bins).text,
                id,
            }
        })
        .collect();
    if bins.checksum() != bins_checksum {
        return Err(StageError::LeakageGuard(
            "bin boundaries mutated during encoding".into(),
        ));
    }
    let tokens_path = dir.join(files::TOKENS);
    artifact::write_jsonl(
        &tokens_path,
        &ArtifactHeader::new(files::TOKENS, "classify", cfg),
        &tokens,
    )?;

    let eval_ids: Vec<usize> = frames
        .iter()
        .enumerate()
        .filter(|(_, f)| split.assignment.get(&f.id()) == Some(&cfg.eval_partition))
        .map(|(i, _)| i)
        .collect();

    let mut artifacts = vec![tokens_path];
    let predictions: Vec<PredictionRecord> = match cfg.backend {
        Backend::Rule | Backend::Llm => {
            let clf = build_classifier(cfg)?;
            // Input parity: the text sent to the back end is exactly the
            // artifact token text.
            let inputs: Vec<(FrameId, String)> = eval_ids
                .iter()
                .map(|&i| (tokens[i].id.clone(), tokens[i].text.clone()))
                .collect();
            classify_batch(cfg, clf.as_ref(), &inputs)?
        }
        Backend::Baseline => {
            let views: Vec<_> = frames.iter().map(|f| encode_numeric(f, &bins)).collect();
            let part_of = |i: usize| split.assignment.get(&frames[i].id()).copied();
            let gold = |i: usize| labels.get(&frames[i].id()).copied();

            let mut train_views = Vec::new();
            let mut train_labels = Vec::new();
            let mut val_scores = Vec::new();
            for i in 0..frames.len() {
                match (part_of(i), gold(i)) {
                    (Some(Partition::Train), Some(label)) => {
                        train_views.push(views[i]);
                        train_labels.push(label);
                    }
                    _ => {}
                }
            }
            let mut model = ScoredBaseline::train(
                &train_views,
                &train_labels,
                &split.split_id,
                cfg.baseline.epochs,
                cfg.baseline.learning_rate,
            )?;
            for i in 0..frames.len() {
                if let (Some(Partition::Validation), Some(label)) = (part_of(i), gold(i)) {
                    val_scores.push((model.score(&views[i]), label));
                }
            }
            // Freeze the threshold before any test scoring.
            let sweep = sweep_threshold(&val_scores)?;
            model.threshold = sweep.tau;

            let baseline_path = dir.join(files::BASELINE);
            artifact::write_json(
                &baseline_path,
                &ArtifactHeader::new(files::BASELINE, "classify", cfg),
                &BaselineArtifact {
                    model: model.clone(),
                    sweep,
                    train_size: train_views.len() as u64,
                    validation_size: val_scores.len() as u64,
                },
            )?;
            artifacts.push(baseline_path);

            eval_ids
                .iter()
                .map(|&i| {
                    PredictionRecord::from_prediction(frames[i].id(), &model.predict(&views[i]))
                })
                .collect()
        }
    };

    let predictions_path = dir.join(files::PREDICTIONS);
    artifact::write_jsonl(
        &predictions_path,
        &ArtifactHeader::new(files::PREDICTIONS, "classify", cfg),
        &predictions,
    )?;
    artifacts.push(predictions_path);
    Ok(StageOutput {
        artifacts,
        stdout: None,
    })
}

fn stage_audit(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let tokens = load_tokens(dir, cfg)?;
    let predictions = load_predictions(dir, cfg)?;
    let predictions_path = dir.join(files::PREDICTIONS);
    let checksum_before = artifact::file_checksum(&predictions_path)?;

    let auditor = build_auditor(cfg)?;
    let token_by_id: BTreeMap<&FrameId, &TokenRecord> =
        tokens.iter().map(|t| (&t.id, t)).collect();

    let pool = thread_pool(cfg);
    let rows: Result<Vec<AuditRow>, StageError> = pool.install(|| {
        predictions
            .par_iter()
            .map(|pred| {
                let token = token_by_id.get(&pred.id).ok_or_else(|| {
                    StageError::Inconsistent {
                        artifact: files::TOKENS.into(),
                        reason: format!("no token string for prediction {}", pred.id),
                    }
                })?;
                let x = parse_token_string(&token.text).map_err(StageError::Encode)?;
                let row = match auditor.audit(&pred.id, &x, pred.label) {
                    AuditOutcome::Record(record) => {
                        let validity = validate_record(&x, &record, &cfg.rules);
                        AuditRow {
                            id: pred.id.clone(),
                            label_explained: record.label_explained,
                            evidence: record.evidence,
                            risk_tags: record.risk_tags,
                            counterfactual: record.counterfactual,
                            validity,
                            attempts: 1,
                        }
                    }
                    AuditOutcome::Malformed {
                        label_explained,
                        attempts,
                        error,
                        ..
                    } => {
                        log::warn!("audit for {} stayed malformed: {error}", pred.id);
                        AuditRow {
                            id: pred.id.clone(),
                            label_explained,
                            evidence: Vec::new(),
                            risk_tags: Default::default(),
                            counterfactual: None,
                            validity: RecordValidity::malformed(label_explained),
                            attempts,
                        }
                    }
                };
                Ok(row)
            })
            .collect()
    });
    let rows = rows?;

    // Auditor non-interference: the prediction store is untouched.
    let checksum_after = artifact::file_checksum(&predictions_path)?;
    if checksum_before != checksum_after {
        return Err(StageError::Inconsistent {
            artifact: files::PREDICTIONS.into(),
            reason: "prediction store changed during the audit pass".into(),
        });
    }

    let audits_path = dir.join(files::AUDITS);
    artifact::write_jsonl(
        &audits_path,
        &ArtifactHeader::new(files::AUDITS, "audit", cfg),
        &rows,
    )?;
    Ok(StageOutput {
        artifacts: vec![audits_path],
        stdout: None,
    })
}

fn curve_rows(curve: &PassCurve) -> Vec<String> {
    curve
        .epsilons
        .iter()
        .enumerate()
        .map(|(i, eps)| {
            format!(
                "{},{},{},{}",
                eps, curve.pass_rate[i], curve.ci_low[i], curve.ci_high[i]
            )
        })
        .collect()
}

fn stage_probe(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let tokens = load_tokens(dir, cfg)?;
    let predictions = load_predictions(dir, cfg)?;
    let audits = load_audits(dir, cfg)?;
    let clf = build_classifier(cfg)?;

    let token_by_id: BTreeMap<&FrameId, &TokenRecord> =
        tokens.iter().map(|t| (&t.id, t)).collect();
    let pred_by_id: BTreeMap<&FrameId, &PredictionRecord> =
        predictions.iter().map(|p| (&p.id, p)).collect();

    let pool = thread_pool(cfg);
    let results: Result<Vec<Vec<ProbeResult>>, StageError> = pool.install(|| {
        audits
            .par_iter()
            .map(|row| {
                let pred = pred_by_id
                    .get(&row.id)
                    .ok_or_else(|| StageError::Inconsistent {
                        artifact: files::AUDITS.into(),
                        reason: format!("no prediction for audit {}", row.id),
                    })?
                    .to_prediction();
                let token = token_by_id.get(&row.id).ok_or_else(|| {
                    StageError::Inconsistent {
                        artifact: files::TOKENS.into(),
                        reason: format!("no token string for audit {}", row.id),
                    }
                })?;
                let x = parse_token_string(&token.text).map_err(StageError::Encode)?;
                let record = row.to_record();
                let hash = clf.config_hash();

                let mut out = Vec::with_capacity(3);
                if row.validity.json_well_formed && row.validity.spans_valid {
                    let (s, _) = sufficiency_probe(&x, &pred, &record, clf.as_ref(), 0.0)?;
                    out.push(s);
                    let (n, _) = necessity_probe(&x, &pred, &record, clf.as_ref(), 0.0)?;
                    out.push(n);
                } else {
                    out.push(ProbeResult::not_applicable(
                        &row.id,
                        ProbeKind::Sufficiency,
                        &pred,
                        hash,
                    ));
                    out.push(ProbeResult::not_applicable(
                        &row.id,
                        ProbeKind::Necessity,
                        &pred,
                        hash,
                    ));
                }
                if row.validity.json_well_formed {
                    out.push(counterfactual_probe(&x, &pred, &record, clf.as_ref())?);
                } else {
                    out.push(ProbeResult::not_applicable(
                        &row.id,
                        ProbeKind::Counterfactual,
                        &pred,
                        hash,
                    ));
                }
                Ok(out)
            })
            .collect()
    });
    let results: Vec<ProbeResult> = results?.into_iter().flatten().collect();

    let probes_path = dir.join(files::PROBES);
    artifact::write_jsonl(
        &probes_path,
        &ArtifactHeader::new(files::PROBES, "probe", cfg),
        &results,
    )?;

    let bootstrap = BootstrapCfg {
        resamples: cfg.probes.bootstrap.resamples,
        seed: cfg.probes.bootstrap.seed,
    };
    let sufficiency = pass_curve(
        &results,
        ProbeKind::Sufficiency,
        &cfg.probes.epsilon_grid,
        &bootstrap,
    )?;
    let necessity = pass_curve(
        &results,
        ProbeKind::Necessity,
        &cfg.probes.epsilon_grid,
        &bootstrap,
    )?;

    let suff_path = dir.join(files::SUFFICIENCY_CURVE);
    artifact::write_csv(
        &suff_path,
        cfg,
        &[("probe", "sufficiency".into())],
        "epsilon,pass_rate,ci_low,ci_high",
        &curve_rows(&sufficiency),
    )?;
    let nec_path = dir.join(files::NECESSITY_CURVE);
    artifact::write_csv(
        &nec_path,
        cfg,
        &[("probe", "necessity".into())],
        "epsilon,pass_rate,ci_low,ci_high",
        &curve_rows(&necessity),
    )?;

    let counted = results
        .iter()
        .filter(|r| {
            r.kind == ProbeKind::Counterfactual && r.status == crate::probes::ProbeStatus::Scored
        })
        .count() as u64;
    let flip_path = dir.join(files::FLIP_BASELINE);
    artifact::write_json(
        &flip_path,
        &ArtifactHeader::new(files::FLIP_BASELINE, "probe", cfg),
        &FlipBaselineArtifact {
            necessity_flip_baseline: necessity.flip_baseline,
            counterfactual_flip_rate: counterfactual_flip_rate(&results),
            counterfactual_counted: counted,
            classifier_config_hash: clf.config_hash().to_string(),
        },
    )?;

    Ok(StageOutput {
        artifacts: vec![probes_path, suff_path, nec_path, flip_path],
        stdout: None,
    })
}

fn stage_report(cfg: &RunConfig, dir: &Path) -> Result<StageOutput, StageError> {
    let predictions = load_predictions(dir, cfg)?;
    let labels = load_labels(dir, cfg)?;

    let predicted: BTreeMap<FrameId, Label> =
        predictions.iter().map(|p| (p.id.clone(), p.label)).collect();
    let gold: BTreeMap<FrameId, Label> = predicted
        .keys()
        .filter_map(|id| labels.get(id).map(|l| (id.clone(), *l)))
        .collect();
    let metrics: MetricsSummary = compute_metrics(&predicted, &gold)?;

    let mut absent = Vec::new();

    let validity = if dir.join(files::AUDITS).exists() {
        let audits = load_audits(dir, cfg)?;
        let items: Vec<(Label, RecordValidity)> = audits
            .iter()
            .map(|a| (a.label_explained, a.validity))
            .collect();
        Some(crate::audit::validity_rates(&items))
    } else {
        absent.push("audit".to_string());
        None
    };

    let (curves, decomposition, necessity_flip, cf_flip) = if dir.join(files::PROBES).exists() {
        let (_, results) =
            artifact::read_jsonl::<ProbeResult>(&dir.join(files::PROBES), "probe", cfg)?;
        let bootstrap = BootstrapCfg {
            resamples: cfg.probes.bootstrap.resamples,
            seed: cfg.probes.bootstrap.seed,
        };
        let mut curves = Vec::new();
        let mut necessity_flip = None;
        for kind in [ProbeKind::Sufficiency, ProbeKind::Necessity] {
            match pass_curve(&results, kind, &cfg.probes.epsilon_grid, &bootstrap) {
                Ok(curve) => {
                    if kind == ProbeKind::Necessity {
                        necessity_flip = curve.flip_baseline;
                    }
                    curves.push(curve);
                }
                Err(ProbeError::NoResults(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let decomposition = necessity_decomposition(&results);
        let cf = counterfactual_flip_rate(&results);
        (curves, Some(decomposition), necessity_flip, cf)
    } else {
        absent.push("probes".to_string());
        (Vec::new(), None, None, None)
    };

    let latencies: Vec<f64> = predictions.iter().map(|p| p.latency_ms / 1000.0).collect();
    let usage = {
        let with_usage: Vec<&PredictionRecord> = predictions
            .iter()
            .filter(|p| p.input_tokens.is_some() && p.output_tokens.is_some())
            .collect();
        (!with_usage.is_empty()).then(|| UsageTotals {
            calls: with_usage.len() as u64,
            input_tokens: with_usage.iter().filter_map(|p| p.input_tokens).sum(),
            output_tokens: with_usage.iter().filter_map(|p| p.output_tokens).sum(),
        })
    };
    let prices = Prices {
        input_per_m: cfg.prices.input_per_m,
        output_per_m: cfg.prices.output_per_m,
    };
    let latency = if latencies.is_empty() {
        absent.push("latency".to_string());
        None
    } else {
        Some(latency_summary(
            &latencies,
            Some(&prices),
            usage.as_ref(),
            (cfg.prices.overhead_tokens_low, cfg.prices.overhead_tokens_high),
        )?)
    };

    let bundle = ReportBundle {
        backend: cfg.backend.as_str().to_string(),
        evaluated_frames: predictions.len() as u64,
        metrics: metrics.clone(),
        validity,
        curves,
        necessity_flip_baseline: necessity_flip,
        counterfactual_flip_rate: cf_flip,
        decomposition,
        latency,
        absent_sections: absent,
    };

    let report_path = dir.join(files::REPORT);
    artifact::write_json(
        &report_path,
        &ArtifactHeader::new(files::REPORT, "report", cfg),
        &bundle,
    )?;
    let metrics_path = dir.join(files::METRICS_CSV);
    artifact::write_csv(
        &metrics_path,
        cfg,
        &[],
        "method,accuracy,macro_f1,recall_critical,f1_critical",
        &[metrics_csv_row(cfg.backend.as_str(), &metrics)],
    )?;

    Ok(StageOutput {
        artifacts: vec![report_path, metrics_path],
        stdout: Some(render_text_summary(&bundle)),
    })
}

/// Dependency artifacts per stage, with the stage that produces each.
fn dependencies(stage: Stage) -> Vec<(&'static str, &'static str)> {
    match stage {
        Stage::Ingest => vec![],
        Stage::Label => vec![(files::FRAMES, "ingest")],
        Stage::Split => vec![
            (files::FRAMES, "ingest"),
            (files::WINDOWS, "label"),
            (files::LABELS, "label"),
        ],
        Stage::FitBins => vec![(files::FRAMES, "ingest"), (files::SPLIT, "split")],
        Stage::Classify => vec![
            (files::FRAMES, "ingest"),
            (files::LABELS, "label"),
            (files::SPLIT, "split"),
            (files::BINS, "fit-bins"),
        ],
        Stage::Audit => vec![
            (files::TOKENS, "classify"),
            (files::PREDICTIONS, "classify"),
        ],
        Stage::Probe => vec![
            (files::TOKENS, "classify"),
            (files::PREDICTIONS, "classify"),
            (files::AUDITS, "audit"),
        ],
        Stage::Report => vec![
            (files::PREDICTIONS, "classify"),
            (files::LABELS, "label"),
        ],
    }
}

/// Check that every artifact a stage depends on is present.
pub fn check_dependencies(stage: Stage, cfg: &RunConfig) -> Result<(), StageError> {
    let dir = cfg.artifact_dir();
    for (file, produced_by) in dependencies(stage) {
        artifact::require(&dir.join(file), produced_by)?;
    }
    Ok(())
}

/// Run one pipeline stage under the given configuration.
pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageOutput, StageError> {
    cfg.validate()?;
    check_dependencies(stage, cfg)?;
    let dir = cfg.artifact_dir();
    match stage {
        Stage::Ingest => stage_ingest(cfg, &dir),
        Stage::Label => stage_label(cfg, &dir),
        Stage::Split => stage_split(cfg, &dir),
        Stage::FitBins => stage_fit_bins(cfg, &dir),
        Stage::Classify => stage_classify(cfg, &dir),
        Stage::Audit => stage_audit(cfg, &dir),
        Stage::Probe => stage_probe(cfg, &dir),
        Stage::Report => stage_report(cfg, &dir),
    }
}

/// Validate the configuration and the stage dependency graph without
/// writing anything.
pub fn dry_run(cfg: &RunConfig) -> Result<String, StageError> {
    cfg.validate()?;
    let mut out = String::new();
    out.push_str(&format!("config hash: {}\n", cfg.config_hash()));
    out.push_str(&format!("run directory: {}\n", cfg.artifact_dir().display()));
    for input in &cfg.inputs.captures {
        let status = if input.path.exists() { "ok" } else { "MISSING" };
        out.push_str(&format!("capture {}: {status}\n", input.path.display()));
    }
    if let Some(log) = &cfg.inputs.attack_log {
        let status = if log.exists() { "ok" } else { "MISSING" };
        out.push_str(&format!("attack log {}: {status}\n", log.display()));
    }
    for stage in Stage::PIPELINE_ORDER {
        let ready = match check_dependencies(stage, cfg) {
            Ok(()) => "ready".to_string(),
            Err(e) => format!("blocked ({e})"),
        };
        out.push_str(&format!("stage {stage}: {ready}\n"));
    }
    Ok(out)
}
