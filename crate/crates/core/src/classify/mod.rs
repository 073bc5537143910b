//! The classifier contract: every back end maps a token string to a
//! label/confidence/rationale triple. Includes the deterministic rule-based
//! stand-in, the remote LLM client, and the scored-baseline threshold
//! protocol.

pub mod baseline;
pub mod llm;
pub mod rules;

pub use baseline::{sweep_threshold, ScoredBaseline, ThresholdSweep};
pub use llm::{ChatMessage, ChatRequest, ChatResponse, ChatTransport, Decoding, HttpTransport,
              LlmClassifier, PromptConfig, TransportError};
pub use rules::{RiskTag, RuleSet, Trigger};

use crate::encode::parse_fragment;
use crate::types::Label;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token counts reported by a remote transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// One classification decision. The label is always taken from the discrete
/// back-end output; the confidence is an uncalibrated auxiliary score
/// recorded for analysis and never used to choose the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub confidence: f64,
    pub rationale: String,
    pub latency_ms: f64,
    pub token_usage: Option<TokenUsage>,
    pub attempts: u32,
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("empty input string")]
    EmptyInput,
    #[error("input is not a valid token fragment: {0}")]
    InvalidInput(String),
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("backend returned {attempts} malformed response(s); retry budget exhausted")]
    MalformedResponseExhausted { attempts: u32 },
    #[error("missing API credential: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("invalid prompt configuration: {0}")]
    InvalidPromptConfig(String),
    #[error("validation split contains a single class; cannot sweep a threshold")]
    SingleClassValidation,
    #[error("score {0} is not a finite number in [0, 1]")]
    InvalidScore(f64),
}

/// A classifier back end over token text.
///
/// Implementations must be total (a `Prediction` or a typed error), never
/// mutate the input, and return the identical label for identical input and
/// configuration.
pub trait Classifier: Send + Sync {
    fn backend_name(&self) -> &'static str;
    /// Hash of everything that determines the decision function (rules or
    /// prompt text plus decoding settings); recorded on probe results.
    fn config_hash(&self) -> &str;
    /// Whether the back end accepts an empty input (used by the necessity
    /// probe when all tokens are removed).
    fn accepts_empty_input(&self) -> bool {
        false
    }
    fn classify_text(&self, input: &str) -> Result<Prediction, ClassifyError>;
}

/// Classify a token fragment after guarding the contract preconditions:
/// empty input is a precondition error (no back-end call) and the fragment
/// must be grammar-valid.
pub fn classify(clf: &dyn Classifier, input: &str) -> Result<Prediction, ClassifyError> {
    if input.trim().is_empty() {
        return Err(ClassifyError::EmptyInput);
    }
    parse_fragment(input).map_err(|e| ClassifyError::InvalidInput(e.to_string()))?;
    clf.classify_text(input)
}

/// Deterministic rule-based classifier standing in for the LLM so the audit
/// and probe harness is testable offline.
#[derive(Debug, Clone)]
pub struct RuleClassifier {
    rules: RuleSet,
    hash: String,
}

impl RuleClassifier {
    pub fn new(rules: RuleSet) -> Self {
        let hash = rules.config_hash();
        RuleClassifier { rules, hash }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }
}

impl Default for RuleClassifier {
    fn default() -> Self {
        RuleClassifier::new(RuleSet::default())
    }
}

impl Classifier for RuleClassifier {
    fn backend_name(&self) -> &'static str {
        "rule"
    }

    fn config_hash(&self) -> &str {
        &self.hash
    }

    fn accepts_empty_input(&self) -> bool {
        true
    }

    /// Label is critical iff any rule triggers. Confidence is the frozen
    /// stand-in formula 0.5 + 0.1 * (number of triggered rules), capped at
    /// 0.99; the rationale names the triggering tokens.
    fn classify_text(&self, input: &str) -> Result<Prediction, ClassifyError> {
        let tokens =
            parse_fragment(input).map_err(|e| ClassifyError::InvalidInput(e.to_string()))?;
        let triggers = self.rules.triggers(&tokens);
        let confidence = (0.5 + 0.1 * triggers.len() as f64).min(0.99);
        let (label, rationale) = if triggers.is_empty() {
            (Label::Normal, "no risk rules triggered".to_string())
        } else {
            let names: Vec<&str> = triggers.iter().map(|t| t.token_text.as_str()).collect();
            (
                Label::Critical,
                format!("risk rules triggered by {}", names.join(", ")),
            )
        };
        Ok(Prediction {
            label,
            confidence,
            rationale,
            latency_ms: 0.0,
            token_usage: None,
            attempts: 1,
        })
    }
}
