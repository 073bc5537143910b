//! Remote LLM classifier: prompt assembly, deterministic decoding settings,
//! strict JSON response parsing, and the silent-retry policy.

use super::{ClassifyError, Classifier, Prediction, TokenUsage};
use crate::types::Label;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::time::Instant;

/// Decoding settings; temperature must be 0 so identical inputs yield
/// identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            temperature: 0.0,
            top_p: 1.0,
            seed: 7,
        }
    }
}

/// The prompt configuration handed to a back end: system role text, token
/// schema legend, few-shot exemplars, generic safety cues, and decoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptConfig {
    pub system_text: String,
    pub schema_legend_text: String,
    pub exemplars: Vec<(String, Label)>,
    pub safety_cues: Vec<String>,
    pub decoding: Decoding,
}

impl PromptConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.decoding.temperature != 0.0 {
            return Err(ClassifyError::InvalidPromptConfig(format!(
                "decoding temperature must be 0, got {}",
                self.decoding.temperature
            )));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("prompt config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Option<TokenUsage>,
}

#[derive(Debug, Clone)]
pub struct TransportError(pub String);

/// A chat-completions endpoint. Mocked in tests; HTTPS in production.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError>;
}

/// HTTPS transport for an OpenAI-style chat-completions endpoint.
pub struct HttpTransport {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key_env: &str) -> Result<Self, ClassifyError> {
        let api_key = std::env::var(api_key_env)
            .map_err(|_| ClassifyError::MissingCredentials(api_key_env.to_string()))?;
        Ok(HttpTransport {
            endpoint: endpoint.to_string(),
            api_key,
            client: reqwest::blocking::Client::new(),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| TransportError(e.to_string()))?;
        if !response.status().is_success() {
            return Err(TransportError(format!("HTTP {}", response.status())));
        }
        let body: Value = response.json().map_err(|e| TransportError(e.to_string()))?;
        let content = body["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| TransportError("response lacks choices[0].message.content".into()))?
            .to_string();
        let usage = match (
            body["usage"]["prompt_tokens"].as_u64(),
            body["usage"]["completion_tokens"].as_u64(),
        ) {
            (Some(input_tokens), Some(output_tokens)) => Some(TokenUsage {
                input_tokens,
                output_tokens,
            }),
            _ => None,
        };
        Ok(ChatResponse { content, usage })
    }
}

/// Outcome of parsing one model payload.
struct ParsedPayload {
    label: Label,
    confidence: f64,
    rationale: String,
    lints: Vec<String>,
}

/// Parse a classifier payload: a top-level JSON object with exactly the
/// keys `label`, `confidence`, `rationale`. The label is constrained to
/// normal/critical; case variants are normalized with a lint warning. The
/// label is never derived from the confidence value.
fn parse_prediction_payload(content: &str) -> Result<ParsedPayload, String> {
    let value: Value =
        serde_json::from_str(content.trim()).map_err(|e| format!("not valid JSON: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| "payload is not a top-level object".to_string())?;
    if obj.len() != 3 || !["label", "confidence", "rationale"].iter().all(|k| obj.contains_key(*k))
    {
        return Err(format!(
            "payload must contain exactly label/confidence/rationale, found keys {:?}",
            obj.keys().collect::<Vec<_>>()
        ));
    }

    let mut lints = Vec::new();
    let raw_label = obj["label"]
        .as_str()
        .ok_or_else(|| "label is not a string".to_string())?;
    let label = match raw_label.parse::<Label>() {
        Ok(label) => label,
        Err(_) => {
            let folded = raw_label.to_ascii_lowercase();
            let label = folded
                .parse::<Label>()
                .map_err(|_| format!("label {raw_label:?} is not normal/critical"))?;
            lints.push(format!("label {raw_label:?} case-normalized to {label}"));
            label
        }
    };

    let confidence = obj["confidence"]
        .as_f64()
        .ok_or_else(|| "confidence is not a number".to_string())?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(format!("confidence {confidence} outside [0, 1]"));
    }
    let rationale = obj["rationale"]
        .as_str()
        .ok_or_else(|| "rationale is not a string".to_string())?
        .to_string();

    Ok(ParsedPayload {
        label,
        confidence,
        rationale,
        lints,
    })
}

/// Prompt-configured classifier over a chat transport.
pub struct LlmClassifier<T: ChatTransport> {
    transport: T,
    cfg: PromptConfig,
    model: String,
    max_attempts: u32,
    hash: String,
}

impl<T: ChatTransport> LlmClassifier<T> {
    pub fn new(
        transport: T,
        cfg: PromptConfig,
        model: &str,
        max_attempts: u32,
    ) -> Result<Self, ClassifyError> {
        cfg.validate()?;
        let mut hasher = Sha256::new();
        hasher.update(cfg.config_hash().as_bytes());
        hasher.update(model.as_bytes());
        let hash = hex::encode(&hasher.finalize()[..8]);
        Ok(LlmClassifier {
            transport,
            cfg,
            model: model.to_string(),
            max_attempts: max_attempts.max(1),
            hash,
        })
    }

    /// Assemble system + legend + cues + exemplars + input into one request.
    fn build_request(&self, input: &str) -> ChatRequest {
        let mut system = self.cfg.system_text.clone();
        if !self.cfg.schema_legend_text.is_empty() {
            system.push_str("\n\n");
            system.push_str(&self.cfg.schema_legend_text);
        }
        if !self.cfg.safety_cues.is_empty() {
            system.push_str("\n\n### SAFETY CUES\n");
            for cue in &self.cfg.safety_cues {
                system.push_str("- ");
                system.push_str(cue);
                system.push('\n');
            }
        }
        let mut messages = vec![ChatMessage {
            role: "system".into(),
            content: system,
        }];
        for (text, label) in &self.cfg.exemplars {
            messages.push(ChatMessage {
                role: "user".into(),
                content: text.clone(),
            });
            let rationale = match label {
                Label::Normal => "Routine polling pattern with no risk tokens.",
                Label::Critical => "High-risk token pattern warranting review.",
            };
            messages.push(ChatMessage {
                role: "assistant".into(),
                content: format!(
                    "{{\"label\": \"{label}\", \"confidence\": 0.9, \"rationale\": \"{rationale}\"}}"
                ),
            });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: input.to_string(),
        });
        ChatRequest {
            model: self.model.clone(),
            temperature: self.cfg.decoding.temperature,
            top_p: self.cfg.decoding.top_p,
            seed: self.cfg.decoding.seed,
            messages,
        }
    }
}

enum LastFailure {
    Transport(String),
    Malformed,
}

impl<T: ChatTransport> Classifier for LlmClassifier<T> {
    fn backend_name(&self) -> &'static str {
        "llm"
    }

    fn config_hash(&self) -> &str {
        &self.hash
    }

    /// One decision call with silent retries on malformed payloads or
    /// transport failures, recording the attempt count.
    fn classify_text(&self, input: &str) -> Result<Prediction, ClassifyError> {
        let request = self.build_request(input);
        let start = Instant::now();
        let mut last = LastFailure::Transport("no attempt made".into());

        for attempt in 1..=self.max_attempts {
            match self.transport.complete(&request) {
                Err(TransportError(e)) => {
                    log::warn!("attempt {attempt}: transport failure: {e}");
                    last = LastFailure::Transport(e);
                }
                Ok(response) => match parse_prediction_payload(&response.content) {
                    Ok(parsed) => {
                        for lint in &parsed.lints {
                            log::warn!("attempt {attempt}: {lint}");
                        }
                        return Ok(Prediction {
                            label: parsed.label,
                            confidence: parsed.confidence,
                            rationale: parsed.rationale,
                            latency_ms: start.elapsed().as_secs_f64() * 1000.0,
                            token_usage: response.usage,
                            attempts: attempt,
                        });
                    }
                    Err(reason) => {
                        log::warn!("attempt {attempt}: malformed payload: {reason}");
                        last = LastFailure::Malformed;
                    }
                },
            }
        }

        match last {
            LastFailure::Transport(last_error) => Err(ClassifyError::BackendUnavailable {
                attempts: self.max_attempts,
                last_error,
            }),
            LastFailure::Malformed => Err(ClassifyError::MalformedResponseExhausted {
                attempts: self.max_attempts,
            }),
        }
    }
}

/// Parse an auditor payload: a top-level JSON object with exactly the keys
/// `evidence`, `risk_tags`, `counterfactual`. Returns raw strings; semantic
/// validation happens in the audit module.
pub(crate) fn parse_audit_payload(
    content: &str,
) -> Result<(Vec<String>, Vec<String>, Option<(String, String)>), String> {
    let value: Value =
        serde_json::from_str(content.trim()).map_err(|e| format!("not valid JSON: {e}"))?;
    let obj = value
        .as_object()
        .ok_or_else(|| "payload is not a top-level object".to_string())?;
    if obj.len() != 3
        || !["evidence", "risk_tags", "counterfactual"].iter().all(|k| obj.contains_key(*k))
    {
        return Err(format!(
            "payload must contain exactly evidence/risk_tags/counterfactual, found keys {:?}",
            obj.keys().collect::<Vec<_>>()
        ));
    }
    let string_array = |key: &str| -> Result<Vec<String>, String> {
        obj[key]
            .as_array()
            .ok_or_else(|| format!("{key} is not an array"))?
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("{key} contains a non-string item"))
            })
            .collect()
    };
    let evidence = string_array("evidence")?;
    let risk_tags = string_array("risk_tags")?;
    let counterfactual = match &obj["counterfactual"] {
        Value::Null => None,
        Value::Object(edit) => {
            if edit.len() != 2 || !edit.contains_key("from") || !edit.contains_key("to") {
                return Err("counterfactual must be null or {from, to}".into());
            }
            let from = edit["from"]
                .as_str()
                .ok_or_else(|| "counterfactual.from is not a string".to_string())?;
            let to = edit["to"]
                .as_str()
                .ok_or_else(|| "counterfactual.to is not a string".to_string())?;
            Some((from.to_string(), to.to_string()))
        }
        _ => return Err("counterfactual must be null or {from, to}".into()),
    };
    Ok((evidence, risk_tags, counterfactual))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use std::sync::Mutex;

    /// Transport that replays a scripted sequence of outcomes.
    pub struct MockTransport {
        script: Mutex<Vec<Result<ChatResponse, TransportError>>>,
        pub requests: Mutex<Vec<ChatRequest>>,
    }

    impl MockTransport {
        pub fn new(script: Vec<Result<ChatResponse, TransportError>>) -> Self {
            MockTransport {
                script: Mutex::new(script),
                requests: Mutex::new(Vec::new()),
            }
        }

        pub fn ok(content: &str) -> Result<ChatResponse, TransportError> {
            Ok(ChatResponse {
                content: content.to_string(),
                usage: Some(TokenUsage {
                    input_tokens: 100,
                    output_tokens: 17,
                }),
            })
        }
    }

    impl ChatTransport for MockTransport {
        fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
            self.requests.lock().unwrap().push(request.clone());
            let mut script = self.script.lock().unwrap();
            if script.is_empty() {
                return Err(TransportError("script exhausted".into()));
            }
            script.remove(0)
        }
    }

    pub fn test_prompt_config() -> PromptConfig {
        PromptConfig {
            system_text: "You are an OT security analyst.".into(),
            schema_legend_text: "Tokens: DIR FC UNIT LEN IAT EX.".into(),
            exemplars: vec![
                ("DIR:C2S FC:03 UNIT:U1 LEN:B2 IAT:B4 EX:0".into(), Label::Normal),
                ("DIR:S2C FC:131 UNIT:U1 LEN:B1 IAT:B0 EX:2".into(), Label::Critical),
            ],
            safety_cues: vec!["Nonzero exception codes indicate faults or probing.".into()],
            decoding: Decoding::default(),
        }
    }
}
