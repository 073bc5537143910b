//! Intervention-based faithfulness probes: sufficiency, necessity, and the
//! single-edit counterfactual, with pass-rate curves and bootstrap CIs.

use crate::audit::{covering_token_indices, AuditRecord};
use crate::classify::{classify, Classifier, ClassifyError, Prediction};
use crate::encode::{parse_token, Token, TokenString};
use crate::types::{FrameId, Label};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no scored {0} results to aggregate")]
    NoResults(&'static str),
    #[error("evidence spans do not resolve against the input")]
    InvalidSpans,
    #[error("classifier error during probe rescoring: {0}")]
    Classify(#[from] ClassifyError),
    #[error("epsilon grid must be ascending values in [0, 1]")]
    BadEpsilonGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Sufficiency,
    Necessity,
    Counterfactual,
}

impl ProbeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeKind::Sufficiency => "sufficiency",
            ProbeKind::Necessity => "necessity",
            ProbeKind::Counterfactual => "counterfactual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStatus {
    Scored,
    NotApplicable,
}

/// One probe rescoring outcome. `delta_minus` is present only for necessity
/// (clamped at >= 0); `s_shift` records the counterfactual's directional
/// confidence change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub frame_id: FrameId,
    pub kind: ProbeKind,
    pub status: ProbeStatus,
    pub y_orig: Label,
    pub s_orig: f64,
    pub y_probe: Option<Label>,
    pub s_probe: Option<f64>,
    pub flipped: bool,
    pub delta_minus: Option<f64>,
    pub tokens_removed: Option<usize>,
    pub s_shift: Option<f64>,
    pub invalid_edit: bool,
    pub config_hash: String,
}

impl ProbeResult {
    /// A probe that could not run (invalid spans, missing edit, or a back
    /// end that rejects the constructed input).
    pub fn not_applicable(
        frame_id: &FrameId,
        kind: ProbeKind,
        pred: &Prediction,
        hash: &str,
    ) -> ProbeResult {
        ProbeResult::base(frame_id, kind, pred, hash)
    }

    fn base(frame_id: &FrameId, kind: ProbeKind, pred: &Prediction, hash: &str) -> ProbeResult {
        ProbeResult {
            frame_id: frame_id.clone(),
            kind,
            status: ProbeStatus::NotApplicable,
            y_orig: pred.label,
            s_orig: pred.confidence,
            y_probe: None,
            s_probe: None,
            flipped: false,
            delta_minus: None,
            tokens_removed: None,
            s_shift: None,
            invalid_edit: false,
            config_hash: hash.to_string(),
        }
    }

    /// Sufficiency pass under the per-case tolerance: label preserved and
    /// confidence drop at most `eps`.
    pub fn sufficiency_pass(&self, eps: f64) -> Option<bool> {
        if self.kind != ProbeKind::Sufficiency || self.status != ProbeStatus::Scored {
            return None;
        }
        Some(!self.flipped && quantize(self.s_probe? - self.s_orig) >= -eps)
    }

    /// Sufficiency pass at a required score-increase margin: label preserved
    /// and the score change is at least `eps`. At `eps` = 0 this is the
    /// no-decrease criterion; the pass-rate curve sweeps this margin so the
    /// curve is nonincreasing in epsilon.
    pub fn sufficiency_margin_pass(&self, eps: f64) -> Option<bool> {
        if self.kind != ProbeKind::Sufficiency || self.status != ProbeStatus::Scored {
            return None;
        }
        Some(!self.flipped && quantize(self.s_probe? - self.s_orig) >= eps)
    }

    /// Necessity pass: label flipped, or confidence decrease at least `eps`.
    pub fn necessity_pass(&self, eps: f64) -> Option<bool> {
        if self.kind != ProbeKind::Necessity || self.status != ProbeStatus::Scored {
            return None;
        }
        Some(self.flipped || self.delta_minus? >= eps)
    }

    /// Strict counterfactual success: the single edit flipped the label.
    /// Invalid edits are failures; absent edits are not counted.
    pub fn counterfactual_success(&self) -> Option<bool> {
        if self.kind != ProbeKind::Counterfactual || self.status != ProbeStatus::Scored {
            return None;
        }
        Some(self.flipped && !self.invalid_edit)
    }
}

/// Quantize a score difference to 12 decimal places. Confidence scores are
/// decimal-valued; without this, binary-float subtraction noise (for
/// example 0.7 - 0.6 < 0.1) makes decimal epsilon comparisons flaky.
fn quantize(diff: f64) -> f64 {
    (diff * 1e12).round() / 1e12
}

fn join_tokens(tokens: &[&Token]) -> String {
    tokens.iter().map(|t| t.text()).collect::<Vec<_>>().join(" ")
}

fn rescore(
    clf: &dyn Classifier,
    input: &str,
    result: &mut ProbeResult,
) -> Result<(), ProbeError> {
    let probe = if input.is_empty() {
        if !clf.accepts_empty_input() {
            // Remote back ends skip the empty input and mark not-applicable.
            result.status = ProbeStatus::NotApplicable;
            return Ok(());
        }
        clf.classify_text("")?
    } else {
        classify(clf, input)?
    };
    result.status = ProbeStatus::Scored;
    result.y_probe = Some(probe.label);
    result.s_probe = Some(probe.confidence);
    result.flipped = probe.label != result.y_orig;
    Ok(())
}

/// Sufficiency: rescore only the cited evidence tokens, concatenated with
/// single spaces in original order. Passes if the label survives with at
/// most `eps` confidence loss. Empty evidence is recorded not-applicable.
pub fn sufficiency_probe(
    x: &TokenString,
    pred: &Prediction,
    record: &AuditRecord,
    clf: &dyn Classifier,
    eps: f64,
) -> Result<(ProbeResult, Option<bool>), ProbeError> {
    let mut result = ProbeResult::base(&record.frame_id, ProbeKind::Sufficiency, pred, clf.config_hash());
    let covering = covering_token_indices(x, &record.evidence).ok_or(ProbeError::InvalidSpans)?;
    if covering.is_empty() {
        return Ok((result, None));
    }
    let kept: Vec<&Token> = covering.iter().map(|&i| &x.tokens[i]).collect();
    rescore(clf, &join_tokens(&kept), &mut result)?;
    let pass = result.sufficiency_pass(eps);
    Ok((result, pass))
}

/// Necessity: rescore with the covering tokens of all evidence removed,
/// preserving order and single spacing of the remainder. Passes on a label
/// flip or a confidence decrease of at least `eps`.
pub fn necessity_probe(
    x: &TokenString,
    pred: &Prediction,
    record: &AuditRecord,
    clf: &dyn Classifier,
    eps: f64,
) -> Result<(ProbeResult, Option<bool>), ProbeError> {
    let mut result = ProbeResult::base(&record.frame_id, ProbeKind::Necessity, pred, clf.config_hash());
    let covering = covering_token_indices(x, &record.evidence).ok_or(ProbeError::InvalidSpans)?;
    if covering.is_empty() {
        return Ok((result, None));
    }
    result.tokens_removed = Some(covering.len());
    let kept: Vec<&Token> = x
        .tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| !covering.contains(i))
        .map(|(_, t)| t)
        .collect();
    rescore(clf, &join_tokens(&kept), &mut result)?;
    if result.status == ProbeStatus::Scored {
        result.delta_minus = result.s_probe.map(|s| quantize(result.s_orig - s).max(0.0));
    }
    let pass = result.necessity_pass(eps);
    Ok((result, pass))
}

/// Counterfactual: apply the single token edit (first occurrence of the
/// from-token) and rescore. Success is strictly a label flip; an edit whose
/// from-token is absent or whose to-token is not grammar-valid for the same
/// field is an invalid edit, counted as a failure. Records without an edit
/// are not counted.
pub fn counterfactual_probe(
    x: &TokenString,
    pred: &Prediction,
    record: &AuditRecord,
    clf: &dyn Classifier,
) -> Result<ProbeResult, ProbeError> {
    let mut result = ProbeResult::base(&record.frame_id, ProbeKind::Counterfactual, pred, clf.config_hash());
    let Some(edit) = &record.counterfactual else {
        return Ok(result);
    };

    let from_index = x.tokens.iter().position(|t| t.text() == edit.from_token);
    let to_token = parse_token(&edit.to_token).ok();
    let valid = match (from_index, &to_token) {
        (Some(i), Some(to)) => x.tokens[i].field == to.field,
        _ => false,
    };
    if !valid {
        result.status = ProbeStatus::Scored;
        result.invalid_edit = true;
        return Ok(result);
    }

    let mut tokens = x.tokens.clone();
    tokens[from_index.unwrap()] = to_token.unwrap();
    let refs: Vec<&Token> = tokens.iter().collect();
    rescore(clf, &join_tokens(&refs), &mut result)?;
    if result.status == ProbeStatus::Scored {
        result.s_shift = result.s_probe.map(|s| quantize(s - result.s_orig));
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapCfg {
    pub resamples: u32,
    pub seed: u64,
}

impl Default for BootstrapCfg {
    fn default() -> Self {
        BootstrapCfg {
            resamples: 1000,
            seed: 17,
        }
    }
}

/// Pass rate per epsilon with 95% bootstrap confidence bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassCurve {
    pub kind: ProbeKind,
    pub epsilons: Vec<f64>,
    pub pass_rate: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    /// Strict label-flip fraction (necessity only): the dashed baseline.
    pub flip_baseline: Option<f64>,
}

fn curve_pass(result: &ProbeResult, kind: ProbeKind, eps: f64) -> Option<bool> {
    match kind {
        ProbeKind::Sufficiency => result.sufficiency_margin_pass(eps),
        ProbeKind::Necessity => result.necessity_pass(eps),
        ProbeKind::Counterfactual => result.counterfactual_success(),
    }
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Aggregate scored probe results into a pass-rate-vs-epsilon curve with
/// percentile-method bootstrap confidence intervals. Case resamples are
/// drawn once per bootstrap replicate and shared across the epsilon grid,
/// so identical seeds give identical intervals.
pub fn pass_curve(
    results: &[ProbeResult],
    kind: ProbeKind,
    eps_grid: &[f64],
    bootstrap: &BootstrapCfg,
) -> Result<PassCurve, ProbeError> {
    if eps_grid.is_empty()
        || eps_grid.windows(2).any(|w| w[0] >= w[1])
        || eps_grid.iter().any(|&e| !(0.0..=1.0).contains(&e))
    {
        return Err(ProbeError::BadEpsilonGrid);
    }
    let applicable: Vec<&ProbeResult> = results
        .iter()
        .filter(|r| r.kind == kind && r.status == ProbeStatus::Scored)
        .collect();
    if applicable.is_empty() {
        return Err(ProbeError::NoResults(kind.as_str()));
    }
    let n = applicable.len();

    // Precompute the pass matrix: case x epsilon.
    let pass: Vec<Vec<bool>> = applicable
        .iter()
        .map(|r| {
            eps_grid
                .iter()
                .map(|&e| curve_pass(r, kind, e).unwrap_or(false))
                .collect()
        })
        .collect();

    let pass_rate: Vec<f64> = (0..eps_grid.len())
        .map(|j| pass.iter().filter(|row| row[j]).count() as f64 / n as f64)
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(bootstrap.seed);
    let draws = bootstrap.resamples.max(1) as usize;
    let mut rates: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); eps_grid.len()];
    for _ in 0..draws {
        let mut counts = vec![0usize; eps_grid.len()];
        for _ in 0..n {
            let idx = (rng.next_u64() % n as u64) as usize;
            for (j, &ok) in pass[idx].iter().enumerate() {
                if ok {
                    counts[j] += 1;
                }
            }
        }
        for (j, &c) in counts.iter().enumerate() {
            rates[j].push(c as f64 / n as f64);
        }
    }

    let mut ci_low = Vec::with_capacity(eps_grid.len());
    let mut ci_high = Vec::with_capacity(eps_grid.len());
    for r in &mut rates {
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ci_low.push(percentile_sorted(r, 2.5));
        ci_high.push(percentile_sorted(r, 97.5));
    }

    let flip_baseline = (kind == ProbeKind::Necessity)
        .then(|| applicable.iter().filter(|r| r.flipped).count() as f64 / n as f64);

    Ok(PassCurve {
        kind,
        epsilons: eps_grid.to_vec(),
        pass_rate,
        ci_low,
        ci_high,
        flip_baseline,
    })
}

/// Counterfactual strict flip rate over counted (scored) edits.
pub fn counterfactual_flip_rate(results: &[ProbeResult]) -> Option<f64> {
    let counted: Vec<&ProbeResult> = results
        .iter()
        .filter(|r| r.kind == ProbeKind::Counterfactual && r.status == ProbeStatus::Scored)
        .collect();
    if counted.is_empty() {
        return None;
    }
    Some(
        counted
            .iter()
            .filter(|r| r.counterfactual_success() == Some(true))
            .count() as f64
            / counted.len() as f64,
    )
}

/// Per-class and per-token-count breakdown of the necessity results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub n: u64,
    pub flip_rate: f64,
    pub mean_delta_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub n: u64,
    pub mean_delta_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NecessityDecomposition {
    pub per_class: std::collections::BTreeMap<Label, ClassRow>,
    /// Keys "1", "2", "3+".
    pub per_tokens_removed: std::collections::BTreeMap<String, BucketRow>,
    /// Nearest-rank quartiles (Q1, median, Q3) of delta-minus overall.
    pub delta_quartiles: Option<[f64; 3]>,
    pub n: u64,
}

pub fn necessity_decomposition(results: &[ProbeResult]) -> NecessityDecomposition {
    let scored: Vec<&ProbeResult> = results
        .iter()
        .filter(|r| r.kind == ProbeKind::Necessity && r.status == ProbeStatus::Scored)
        .collect();

    let mut per_class = std::collections::BTreeMap::new();
    for label in [Label::Normal, Label::Critical] {
        let rows: Vec<&&ProbeResult> = scored.iter().filter(|r| r.y_orig == label).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as u64;
        let flips = rows.iter().filter(|r| r.flipped).count() as f64;
        let delta_sum: f64 = rows.iter().filter_map(|r| r.delta_minus).sum();
        per_class.insert(
            label,
            ClassRow {
                n,
                flip_rate: flips / n as f64,
                mean_delta_minus: delta_sum / n as f64,
            },
        );
    }

    let mut per_tokens_removed = std::collections::BTreeMap::new();
    for (key, min, max) in [("1", 1usize, 1usize), ("2", 2, 2), ("3+", 3, usize::MAX)] {
        let rows: Vec<&&ProbeResult> = scored
            .iter()
            .filter(|r| r.tokens_removed.map(|t| (min..=max).contains(&t)).unwrap_or(false))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let delta_sum: f64 = rows.iter().filter_map(|r| r.delta_minus).sum();
        per_tokens_removed.insert(
            key.to_string(),
            BucketRow {
                n: rows.len() as u64,
                mean_delta_minus: delta_sum / rows.len() as f64,
            },
        );
    }

    let mut deltas: Vec<f64> = scored.iter().filter_map(|r| r.delta_minus).collect();
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let delta_quartiles = (!deltas.is_empty()).then(|| {
        [
            percentile_sorted(&deltas, 25.0),
            percentile_sorted(&deltas, 50.0),
            percentile_sorted(&deltas, 75.0),
        ]
    });

    NecessityDecomposition {
        per_class,
        per_tokens_removed,
        delta_quartiles,
        n: scored.len() as u64,
    }
}
