//! Deterministic risk rules shared by the rule-based classifier, the paired
//! auditor, and the record-validity checks.

use crate::encode::{Token, TokenField};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

/// Risk categories cited in audit records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskTag {
    FunctionCode,
    Timing,
    Exception,
    Direction,
    Length,
    ProtocolCompliance,
}

impl RiskTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            RiskTag::FunctionCode => "function_code",
            RiskTag::Timing => "timing",
            RiskTag::Exception => "exception",
            RiskTag::Direction => "direction",
            RiskTag::Length => "length",
            RiskTag::ProtocolCompliance => "protocol_compliance",
        }
    }
}

impl fmt::Display for RiskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RiskTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "function_code" => Ok(RiskTag::FunctionCode),
            "timing" => Ok(RiskTag::Timing),
            "exception" => Ok(RiskTag::Exception),
            "direction" => Ok(RiskTag::Direction),
            "length" => Ok(RiskTag::Length),
            "protocol_compliance" => Ok(RiskTag::ProtocolCompliance),
            other => Err(format!("unknown risk tag: {other:?}")),
        }
    }
}

/// Public Modbus function codes defined by the protocol specification.
pub const DEFINED_FUNCTION_CODES: [u8; 19] = [
    1, 2, 3, 4, 5, 6, 7, 8, 11, 12, 15, 16, 17, 20, 21, 22, 23, 24, 43,
];

/// Versioned high-risk token rules: nonzero exception codes, exception
/// responses and write/undefined function codes, and burst-rate timing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub version: u32,
    /// Function codes at or above this value (exception responses) are
    /// high risk.
    pub high_risk_fc_min: u16,
    /// Write/control codes that alter device state.
    pub write_fcs: BTreeSet<u8>,
    /// Codes considered protocol-defined; anything else below
    /// `high_risk_fc_min` is undefined and therefore high risk.
    pub defined_fcs: BTreeSet<u8>,
    /// The IAT bucket treated as burst-rate traffic.
    pub burst_iat_value: String,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            version: 1,
            high_risk_fc_min: 128,
            write_fcs: BTreeSet::from([5, 6, 15, 16]),
            defined_fcs: BTreeSet::from(DEFINED_FUNCTION_CODES),
            burst_iat_value: "B0".to_string(),
        }
    }
}

/// One rule firing: the token that triggered and its risk category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trigger {
    pub token_index: usize,
    pub token_text: String,
    pub tag: RiskTag,
}

impl RuleSet {
    pub fn fc_is_high_risk(&self, fc: u16) -> bool {
        if fc >= self.high_risk_fc_min {
            return true;
        }
        let Ok(fc8) = u8::try_from(fc) else {
            return true;
        };
        self.write_fcs.contains(&fc8) || !self.defined_fcs.contains(&fc8)
    }

    /// Evaluate every rule against a token fragment; at most one trigger per
    /// token, returned in token order. `NA` values never trigger.
    pub fn triggers(&self, tokens: &[Token]) -> Vec<Trigger> {
        let mut out = Vec::new();
        for (i, token) in tokens.iter().enumerate() {
            let tag = match token.field {
                TokenField::Ex => match token.numeric_value() {
                    Some(v) if v > 0 => Some(RiskTag::Exception),
                    _ => None,
                },
                TokenField::Fc => match token.numeric_value() {
                    Some(fc) if self.fc_is_high_risk(fc) => Some(RiskTag::FunctionCode),
                    _ => None,
                },
                TokenField::Iat if token.value == self.burst_iat_value => Some(RiskTag::Timing),
                _ => None,
            };
            if let Some(tag) = tag {
                out.push(Trigger {
                    token_index: i,
                    token_text: token.text(),
                    tag,
                });
            }
        }
        out
    }

    /// A benign replacement value that clears the given trigger's rule.
    pub fn benign_replacement(&self, tag: RiskTag) -> Option<&'static str> {
        match tag {
            RiskTag::FunctionCode => Some("FC:03"),
            RiskTag::Exception => Some("EX:0"),
            RiskTag::Timing => Some("IAT:B3"),
            _ => None,
        }
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("rule set serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}
