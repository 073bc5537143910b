//! Second-pass auditor producing the structured incident record, plus the
//! structural validity checks over emitted records.

use crate::classify::llm::{parse_audit_payload, ChatMessage, ChatRequest, ChatTransport,
                           PromptConfig, TransportError};
use crate::classify::rules::{RiskTag, RuleSet};
use crate::encode::{parse_token, Token, TokenString};
use crate::types::{FrameId, Label};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;

/// A single what-if token edit `from_token -> to_token`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualEdit {
    pub from_token: String,
    pub to_token: String,
}

/// The structured incident record: verbatim evidence spans, risk-category
/// tags, and an optional counterfactual edit. The auditor never changes the
/// decision; `label_explained` always equals the stored prediction label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub frame_id: FrameId,
    pub label_explained: Label,
    pub evidence: Vec<String>,
    pub risk_tags: BTreeSet<RiskTag>,
    pub counterfactual: Option<CounterfactualEdit>,
}

/// Structural validity flags for one audit record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordValidity {
    pub json_well_formed: bool,
    pub spans_valid: bool,
    pub risk_citation_consistent: bool,
    pub contradiction_free: bool,
    pub unexplained_critical: bool,
}

impl RecordValidity {
    /// Validity for an auditor call that never produced a parseable record.
    pub fn malformed(label_explained: Label) -> Self {
        RecordValidity {
            json_well_formed: false,
            spans_valid: false,
            risk_citation_consistent: false,
            contradiction_free: false,
            unexplained_critical: label_explained == Label::Critical,
        }
    }
}

/// Result of one auditor call. Audit failures never block predictions; a
/// malformed outcome is recorded and the pipeline continues.
#[derive(Debug, Clone)]
pub enum AuditOutcome {
    Record(AuditRecord),
    Malformed {
        frame_id: FrameId,
        label_explained: Label,
        attempts: u32,
        error: String,
    },
}

/// An auditor back end: given the input and the fixed decision, produce an
/// incident record. Must never alter the label.
pub trait Auditor: Send + Sync {
    fn auditor_name(&self) -> &'static str;
    fn config_hash(&self) -> &str;
    fn audit(&self, frame_id: &FrameId, x: &TokenString, y_hat: Label) -> AuditOutcome;
}

/// Map each evidence item to the indices of the tokens it covers, in token
/// order without duplicates. Items are matched at their first occurrence in
/// `x.text`; sub-token substrings are normalized to their covering tokens.
/// Returns `None` if any non-empty item is not a substring of the input.
pub fn covering_token_indices(x: &TokenString, evidence: &[String]) -> Option<Vec<usize>> {
    // Byte ranges of each token inside x.text (single-space joined).
    let mut ranges = Vec::with_capacity(x.tokens.len());
    let mut pos = 0usize;
    for token in &x.tokens {
        let text = token.text();
        ranges.push((pos, pos + text.len()));
        pos += text.len() + 1;
    }

    let mut covered = BTreeSet::new();
    for item in evidence {
        if item.is_empty() {
            return None;
        }
        let start = x.text.find(item.as_str())?;
        let end = start + item.len();
        for (i, &(a, b)) in ranges.iter().enumerate() {
            if start < b && end > a {
                covered.insert(i);
            }
        }
    }
    Some(covered.into_iter().collect())
}

/// Deterministic auditor paired with the rule classifier: evidence is
/// exactly the rule-triggering tokens, and the counterfactual is a single
/// edit that clears every rule when one exists.
#[derive(Debug, Clone)]
pub struct RuleAuditor {
    rules: RuleSet,
    hash: String,
}

impl RuleAuditor {
    pub fn new(rules: RuleSet) -> Self {
        let hash = rules.config_hash();
        RuleAuditor { rules, hash }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }

    fn clearing_edit(&self, x: &TokenString) -> Option<CounterfactualEdit> {
        let triggers = self.rules.triggers(&x.tokens);
        for trigger in &triggers {
            let Some(replacement) = self.rules.benign_replacement(trigger.tag) else {
                continue;
            };
            let mut tokens: Vec<Token> = x.tokens.clone();
            tokens[trigger.token_index] = parse_token(replacement).expect("benign token parses");
            if self.rules.triggers(&tokens).is_empty() {
                return Some(CounterfactualEdit {
                    from_token: trigger.token_text.clone(),
                    to_token: replacement.to_string(),
                });
            }
        }
        None
    }
}

impl Default for RuleAuditor {
    fn default() -> Self {
        RuleAuditor::new(RuleSet::default())
    }
}

impl Auditor for RuleAuditor {
    fn auditor_name(&self) -> &'static str {
        "rule"
    }

    fn config_hash(&self) -> &str {
        &self.hash
    }

    fn audit(&self, frame_id: &FrameId, x: &TokenString, y_hat: Label) -> AuditOutcome {
        let record = match y_hat {
            Label::Critical => {
                let triggers = self.rules.triggers(&x.tokens);
                AuditRecord {
                    frame_id: frame_id.clone(),
                    label_explained: y_hat,
                    evidence: triggers.iter().map(|t| t.token_text.clone()).collect(),
                    risk_tags: triggers.iter().map(|t| t.tag).collect(),
                    counterfactual: self.clearing_edit(x),
                }
            }
            Label::Normal => {
                // Benign FC and EX tokens in input order; the constructed
                // flip rewrites the EX token to a nonzero value.
                let evidence: Vec<String> = x
                    .tokens
                    .iter()
                    .filter(|t| {
                        matches!(t.field, crate::encode::TokenField::Fc | crate::encode::TokenField::Ex)
                    })
                    .map(Token::text)
                    .collect();
                let counterfactual = x
                    .tokens
                    .iter()
                    .find(|t| t.field == crate::encode::TokenField::Ex)
                    .map(|t| CounterfactualEdit {
                        from_token: t.text(),
                        to_token: "EX:1".to_string(),
                    });
                AuditRecord {
                    frame_id: frame_id.clone(),
                    label_explained: y_hat,
                    evidence,
                    risk_tags: BTreeSet::new(),
                    counterfactual,
                }
            }
        };
        AuditOutcome::Record(record)
    }
}

/// LLM auditor: a second pass with its own prompt configuration, never
/// permitted to change the label.
pub struct LlmAuditor<T: ChatTransport> {
    transport: T,
    cfg: PromptConfig,
    model: String,
    max_attempts: u32,
    hash: String,
}

impl<T: ChatTransport> LlmAuditor<T> {
    pub fn new(
        transport: T,
        cfg: PromptConfig,
        model: &str,
        max_attempts: u32,
    ) -> Result<Self, crate::classify::ClassifyError> {
        cfg.validate()?;
        let mut hasher = Sha256::new();
        hasher.update(cfg.config_hash().as_bytes());
        hasher.update(model.as_bytes());
        let hash = hex::encode(&hasher.finalize()[..8]);
        Ok(LlmAuditor {
            transport,
            cfg,
            model: model.to_string(),
            max_attempts: max_attempts.max(1),
            hash,
        })
    }

    fn build_request(&self, x: &TokenString, y_hat: Label) -> ChatRequest {
        let mut system = self.cfg.system_text.clone();
        if !self.cfg.schema_legend_text.is_empty() {
            system.push_str("\n\n");
            system.push_str(&self.cfg.schema_legend_text);
        }
        ChatRequest {
            model: self.model.clone(),
            temperature: self.cfg.decoding.temperature,
            top_p: self.cfg.decoding.top_p,
            seed: self.cfg.decoding.seed,
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: system,
                },
                ChatMessage {
                    role: "user".into(),
                    content: format!("Input: {}\nDecision: {}", x.text, y_hat),
                },
            ],
        }
    }
}

impl<T: ChatTransport> Auditor for LlmAuditor<T> {
    fn auditor_name(&self) -> &'static str {
        "llm"
    }

    fn config_hash(&self) -> &str {
        &self.hash
    }

    fn audit(&self, frame_id: &FrameId, x: &TokenString, y_hat: Label) -> AuditOutcome {
        let request = self.build_request(x, y_hat);
        let mut last_error = String::from("no attempt made");

        for attempt in 1..=self.max_attempts {
            match self.transport.complete(&request) {
                Err(TransportError(e)) => {
                    log::warn!("audit {frame_id} attempt {attempt}: transport failure: {e}");
                    last_error = e;
                }
                Ok(response) => match parse_audit_payload(&response.content) {
                    Ok((evidence, raw_tags, counterfactual)) => {
                        let mut risk_tags = BTreeSet::new();
                        let mut bad_tag = None;
                        for raw in &raw_tags {
                            match raw.parse::<RiskTag>() {
                                Ok(tag) => {
                                    risk_tags.insert(tag);
                                }
                                Err(e) => bad_tag = Some(e),
                            }
                        }
                        if let Some(e) = bad_tag {
                            log::warn!("audit {frame_id} attempt {attempt}: {e}");
                            last_error = e;
                            continue;
                        }
                        return AuditOutcome::Record(AuditRecord {
                            frame_id: frame_id.clone(),
                            label_explained: y_hat,
                            evidence,
                            risk_tags,
                            counterfactual: counterfactual.map(|(from_token, to_token)| {
                                CounterfactualEdit {
                                    from_token,
                                    to_token,
                                }
                            }),
                        });
                    }
                    Err(reason) => {
                        log::warn!("audit {frame_id} attempt {attempt}: malformed payload: {reason}");
                        last_error = reason;
                    }
                },
            }
        }

        AuditOutcome::Malformed {
            frame_id: frame_id.clone(),
            label_explained: y_hat,
            attempts: self.max_attempts,
            error: last_error,
        }
    }
}

/// Run the syntactic grounding checks for one record against its input.
pub fn validate_record(x: &TokenString, rec: &AuditRecord, rules: &RuleSet) -> RecordValidity {
    let covering = covering_token_indices(x, &rec.evidence);
    let spans_valid = covering.is_some();

    // Coverage over the items that do resolve, so one fabricated span does
    // not mask the grounding of the others.
    let resolved: Vec<String> = rec
        .evidence
        .iter()
        .filter(|e| !e.is_empty() && x.text.contains(e.as_str()))
        .cloned()
        .collect();
    let cited: BTreeSet<usize> = covering_token_indices(x, &resolved)
        .unwrap_or_default()
        .into_iter()
        .collect();

    let triggers = rules.triggers(&x.tokens);
    let trigger_indices: BTreeSet<usize> = triggers.iter().map(|t| t.token_index).collect();

    let risk_citation_consistent = triggers
        .iter()
        .all(|t| cited.contains(&t.token_index) && rec.risk_tags.contains(&t.tag));

    let contradiction_free = !(rec.label_explained == Label::Normal
        && !cited.is_empty()
        && cited.iter().all(|i| trigger_indices.contains(i)));

    let unexplained_critical = rec.label_explained == Label::Critical
        && cited.iter().all(|i| !trigger_indices.contains(i));

    RecordValidity {
        json_well_formed: true,
        spans_valid,
        risk_citation_consistent,
        contradiction_free,
        unexplained_critical,
    }
}

/// Rates over a set of validity flags. `unexplained_critical` is computed
/// over critical predictions only; empty denominators report as absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValiditySummary {
    pub total: u64,
    pub critical_total: u64,
    pub json_well_formed_pct: Option<f64>,
    pub spans_valid_pct: Option<f64>,
    pub risk_citation_consistent_pct: Option<f64>,
    pub contradiction_free_pct: Option<f64>,
    pub unexplained_critical_count: u64,
    pub unexplained_critical_pct: Option<f64>,
}

pub fn validity_rates(items: &[(Label, RecordValidity)]) -> ValiditySummary {
    let total = items.len() as u64;
    let critical_total = items.iter().filter(|(l, _)| *l == Label::Critical).count() as u64;
    let pct = |count: u64, denom: u64| -> Option<f64> {
        (denom > 0).then(|| 100.0 * count as f64 / denom as f64)
    };
    let count = |f: fn(&RecordValidity) -> bool| items.iter().filter(|(_, v)| f(v)).count() as u64;

    let unexplained_critical_count = items
        .iter()
        .filter(|(l, v)| *l == Label::Critical && v.unexplained_critical)
        .count() as u64;

    ValiditySummary {
        total,
        critical_total,
        json_well_formed_pct: pct(count(|v| v.json_well_formed), total),
        spans_valid_pct: pct(count(|v| v.spans_valid), total),
        risk_citation_consistent_pct: pct(count(|v| v.risk_citation_consistent), total),
        contradiction_free_pct: pct(count(|v| v.contradiction_free), total),
        unexplained_critical_count,
        unexplained_critical_pct: pct(unexplained_critical_count, critical_total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::llm::test_support::{test_prompt_config, MockTransport};
    use crate::encode::parse_token_string;

    fn ts(text: &str) -> TokenString {
        parse_token_string(text).unwrap()
    }

    fn id() -> FrameId {
        FrameId::from("t:0")
    }

    fn record(outcome: AuditOutcome) -> AuditRecord {
        match outcome {
            AuditOutcome::Record(r) => r,
            AuditOutcome::Malformed { error, .. } => panic!("unexpected malformed: {error}"),
        }
    }

    #[test]
    fn rule_audit_two_triggers_no_single_clearing_edit() {
        let auditor = RuleAuditor::default();
        let x = ts("DIR:S2C FC:129 UNIT:U1 LEN:B1 IAT:B2 EX:1");
        let rec = record(auditor.audit(&id(), &x, Label::Critical));
        assert_eq!(rec.evidence, vec!["FC:129", "EX:1"]);
        assert_eq!(
            rec.risk_tags,
            BTreeSet::from([RiskTag::FunctionCode, RiskTag::Exception])
        );
        assert_eq!(rec.counterfactual, None);
    }

    #[test]
    fn rule_audit_single_trigger_gets_clearing_edit() {
        let auditor = RuleAuditor::default();
        let x = ts("DIR:C2S FC:06 UNIT:U1 LEN:B2 IAT:B3 EX:0");
        let rec = record(auditor.audit(&id(), &x, Label::Critical));
        assert_eq!(rec.evidence, vec!["FC:06"]);
        assert_eq!(
            rec.counterfactual,
            Some(CounterfactualEdit {
                from_token: "FC:06".into(),
                to_token: "FC:03".into()
            })
        );
    }

    #[test]
    fn rule_audit_normal_frame_flips_exception() {
        let auditor = RuleAuditor::default();
        let x = ts("DIR:C2S FC:03 UNIT:U1 LEN:B2 IAT:B4 EX:0");
        let rec = record(auditor.audit(&id(), &x, Label::Normal));
        assert_eq!(rec.evidence, vec!["FC:03", "EX:0"]);
        assert!(rec.risk_tags.is_empty());
        assert_eq!(
            rec.counterfactual,
            Some(CounterfactualEdit {
                from_token: "EX:0".into(),
                to_token: "EX:1".into()
            })
        );
    }

    #[test]
    fn paired_rule_record_passes_all_checks() {
        let rules = RuleSet::default();
        let auditor = RuleAuditor::new(rules.clone());
        let x = ts("DIR:S2C FC:131 UNIT:U2 LEN:B1 IAT:B0 EX:2");
        let rec = record(auditor.audit(&id(), &x, Label::Critical));
        let v = validate_record(&x, &rec, &rules);
        assert!(v.json_well_formed && v.spans_valid && v.risk_citation_consistent);
        assert!(v.contradiction_free);
        assert!(!v.unexplained_critical);
    }

    #[test]
    fn fabricated_span_fails_spans_valid() {
        let rules = RuleSet::default();
        let x = ts("DIR:C2S FC:03 UNIT:U1 LEN:B2 IAT:B4 EX:0");
        let rec = AuditRecord {
            frame_id: id(),
            label_explained: Label::Critical,
            evidence: vec!["FC:999".into()],
            risk_tags: BTreeSet::from([RiskTag::FunctionCode]),
            counterfactual: None,
        };
        let v = validate_record(&x, &rec, &rules);
        assert!(!v.spans_valid);
    }

    #[test]
    fn critical_with_empty_evidence_is_unexplained() {
        let rules = RuleSet::default();
        let x = ts("DIR:C2S FC:03 UNIT:U1 LEN:B2 IAT:B4 EX:0");
        let rec = AuditRecord {
            frame_id: id(),
            label_explained: Label::Critical,
            evidence: vec![],
            risk_tags: BTreeSet::new(),
            counterfactual: None,
        };
        let v = validate_record(&x, &rec, &rules);
        assert!(v.spans_valid);
        assert!(v.unexplained_critical);
    }

    #[test]
    fn normal_label_justified_only_by_risk_tokens_contradicts() {
        let rules = RuleSet::default();
        let x = ts("DIR:S2C FC:129 UNIT:U1 LEN:B1 IAT:B2 EX:1");
        let rec = AuditRecord {
            frame_id: id(),
            label_explained: Label::Normal,
            evidence: vec!["FC:129".into(), "EX:1".into()],
            risk_tags: BTreeSet::from([RiskTag::FunctionCode, RiskTag::Exception]),
            counterfactual: None,
        };
        let v = validate_record(&x, &rec, &rules);
        assert!(!v.contradiction_free);
    }

    #[test]
    fn sub_token_substring_normalizes_to_covering_token() {
        let x = ts("DIR:S2C FC:129 UNIT:U1 LEN:B1 IAT:B2 EX:1");
        let idxs = covering_token_indices(&x, &[String::from("129")]).unwrap();
        assert_eq!(idxs, vec![1]);
        let spanning = covering_token_indices(&x, &[String::from("FC:129 UNIT")]).unwrap();
        assert_eq!(spanning, vec![1, 2]);
        assert!(covering_token_indices(&x, &[String::from("FC:999")]).is_none());
        assert!(covering_token_indices(&x, &[String::new()]).is_none());
    }

    #[test]
    fn validity_rates_counts() {
        let valid = RecordValidity {
            json_well_formed: true,
            spans_valid: true,
            risk_citation_consistent: true,
            contradiction_free: true,
            unexplained_critical: false,
        };
        let mut items = vec![(Label::Critical, valid); 3];
        items.push((
            Label::Critical,
            RecordValidity {
                spans_valid: false,
                ..valid
            },
        ));
        let summary = validity_rates(&items);
        assert_eq!(summary.spans_valid_pct, Some(75.0));
        assert_eq!(summary.json_well_formed_pct, Some(100.0));
        assert_eq!(summary.unexplained_critical_count, 0);

        assert_eq!(validity_rates(&[]).spans_valid_pct, None);
    }

    #[test]
    fn llm_auditor_builds_record_and_survives_malformed() {
        let ok = r#"{"evidence":["FC:129","EX:1"],"risk_tags":["function_code","exception"],"counterfactual":{"from":"FC:129","to":"FC:03"}}"#;
        let transport = MockTransport::new(vec![
            MockTransport::ok(r#"{"evidence":"nope"}"#),
            MockTransport::ok(ok),
        ]);
        let auditor = LlmAuditor::new(transport, test_prompt_config(), "m", 3).unwrap();
        let x = ts("DIR:S2C FC:129 UNIT:U1 LEN:B1 IAT:B2 EX:1");
        let rec = record(auditor.audit(&id(), &x, Label::Critical));
        assert_eq!(rec.evidence, vec!["FC:129", "EX:1"]);
        assert_eq!(rec.label_explained, Label::Critical);

        let transport = MockTransport::new(vec![
            MockTransport::ok("not json"),
            MockTransport::ok("not json"),
            MockTransport::ok("not json"),
        ]);
        let auditor = LlmAuditor::new(transport, test_prompt_config(), "m", 3).unwrap();
        match auditor.audit(&id(), &x, Label::Critical) {
            AuditOutcome::Malformed { attempts, .. } => assert_eq!(attempts, 3),
            AuditOutcome::Record(_) => panic!("expected malformed outcome"),
        }
    }

    #[test]
    fn malformed_validity_flags() {
        let v = RecordValidity::malformed(Label::Critical);
        assert!(!v.json_well_formed);
        assert!(v.unexplained_critical);
        let v = RecordValidity::malformed(Label::Normal);
        assert!(!v.unexplained_critical);
    }
}
