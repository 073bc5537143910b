//! Token encoding: train-fitted discretization boundaries, the six-field
//! token string consumed by every classifier, and the matched numeric view.

use crate::ingest::Frame;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot fit bins: column {column} has no observed values")]
    EmptyColumn { column: &'static str },
    #[error("degenerate {column} distribution: percentile edges are not strictly ascending")]
    DegenerateColumn { column: &'static str },
    #[error("bin edges must be strictly ascending")]
    EdgesNotAscending,
    #[error("invalid token string: {0}")]
    Grammar(String),
}

/// What to do when a fitted column is too concentrated for distinct
/// percentile edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegeneratePolicy {
    /// Fail loudly naming the column (the default).
    Error,
    /// Collapse duplicate edges to the unique ascending subset with a warning.
    Collapse,
}

/// Train-fitted, frozen discretization boundaries for LEN and IAT.
///
/// Once serialized these are immutable: validation and test encoding must
/// load them, never refit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinBoundaries {
    /// Payload-length thresholds (bytes) defining buckets B1..B4.
    pub len_edges: Vec<u64>,
    /// Inter-arrival thresholds (microseconds) defining buckets B0..B4.
    pub iat_edges: Vec<u64>,
    /// Identifier of the split whose train partition the fit used.
    pub fit_split_id: String,
    pub version: u64,
}

impl BinBoundaries {
    pub fn validate(&self) -> Result<(), EncodeError> {
        for edges in [&self.len_edges, &self.iat_edges] {
            if edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(EncodeError::EdgesNotAscending);
            }
        }
        Ok(())
    }

    /// Checksum over the serialized boundaries; used to assert the
    /// frozen-bin invariant around encoding passes.
    pub fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("bin boundaries serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Nearest-rank percentile over a sorted slice: the value at rank
/// ceil(p/100 * n), 1-based.
fn nearest_rank(sorted: &[u64], percentile: u32) -> u64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((percentile as usize * n).div_ceil(100)).max(1);
    sorted[rank - 1]
}

fn fit_edges(
    mut values: Vec<u64>,
    percentiles: &[u32],
    column: &'static str,
    policy: DegeneratePolicy,
) -> Result<Vec<u64>, EncodeError> {
    if values.is_empty() {
        return Err(EncodeError::EmptyColumn { column });
    }
    values.sort_unstable();
    let mut edges: Vec<u64> = percentiles.iter().map(|&p| nearest_rank(&values, p)).collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        match policy {
            DegeneratePolicy::Error => return Err(EncodeError::DegenerateColumn { column }),
            DegeneratePolicy::Collapse => {
                edges.dedup();
                log::warn!("{column}: degenerate distribution; collapsed to {} edge(s)", edges.len());
            }
        }
    }
    Ok(edges)
}

/// Fit LEN and IAT bucket boundaries on the training split only.
///
/// LEN edges are the 25/50/75th percentiles of observed payload lengths
/// (4 buckets, B1..B4); IAT edges are the 20/40/60/80th percentiles of
/// observed inter-arrival times (5 buckets, B0..B4). Percentiles use the
/// nearest-rank method on the sorted multiset.
pub fn fit_bins(
    train_frames: &[Frame],
    fit_split_id: &str,
    version: u64,
    policy: DegeneratePolicy,
) -> Result<BinBoundaries, EncodeError> {
    let lengths: Vec<u64> = train_frames.iter().filter_map(|f| f.payload_len_bytes).collect();
    let iats: Vec<u64> = train_frames.iter().filter_map(|f| f.iat_us).collect();
    let len_edges = fit_edges(lengths, &[25, 50, 75], "LEN", policy)?;
    let iat_edges = fit_edges(iats, &[20, 40, 60, 80], "IAT", policy)?;
    Ok(BinBoundaries {
        len_edges,
        iat_edges,
        fit_split_id: fit_split_id.to_string(),
        version,
    })
}

/// Map a value onto its bucket index for strictly ascending `edges`:
/// bucket i covers (edges[i-1], edges[i]], values at or below the first
/// edge map to bucket 0, values beyond the last edge are clipped into the
/// highest bucket, and ties resolve toward the lower bucket.
pub fn bucketize(value: u64, edges: &[u64]) -> usize {
    edges.partition_point(|&e| e < value)
}

/// The six token fields, in mandatory order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenField {
    Dir,
    Fc,
    Unit,
    Len,
    Iat,
    Ex,
}

impl TokenField {
    pub const ORDER: [TokenField; 6] = [
        TokenField::Dir,
        TokenField::Fc,
        TokenField::Unit,
        TokenField::Len,
        TokenField::Iat,
        TokenField::Ex,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TokenField::Dir => "DIR",
            TokenField::Fc => "FC",
            TokenField::Unit => "UNIT",
            TokenField::Len => "LEN",
            TokenField::Iat => "IAT",
            TokenField::Ex => "EX",
        }
    }

    fn from_name(name: &str) -> Option<TokenField> {
        Self::ORDER.iter().copied().find(|f| f.name() == name)
    }
}

/// One `NAME:VALUE` token. The value string is kept verbatim so parsed
/// token strings round-trip losslessly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub field: TokenField,
    pub value: String,
}

impl Token {
    pub fn text(&self) -> String {
        format!("{}:{}", self.field.name(), self.value)
    }

    /// Numeric value for FC/EX tokens (accepts leading zeros); `None` for
    /// `NA` and non-numeric fields.
    pub fn numeric_value(&self) -> Option<u16> {
        if self.value == "NA" {
            return None;
        }
        match self.field {
            TokenField::Fc | TokenField::Ex => self.value.parse().ok(),
            TokenField::Unit => self.value.strip_prefix('U')?.parse().ok(),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.field.name(), self.value)
    }
}

fn valid_u8_decimal(s: &str) -> bool {
    !s.is_empty() && s.len() <= 3 && s.bytes().all(|b| b.is_ascii_digit())
        && s.parse::<u16>().map(|v| v <= 255).unwrap_or(false)
}

fn valid_value(field: TokenField, value: &str) -> bool {
    if value == "NA" {
        return !matches!(field, TokenField::Dir);
    }
    match field {
        TokenField::Dir => value == "C2S" || value == "S2C",
        TokenField::Fc | TokenField::Ex => valid_u8_decimal(value),
        TokenField::Unit => value.strip_prefix('U').map(valid_u8_decimal).unwrap_or(false),
        TokenField::Len | TokenField::Iat => {
            value.len() == 2 && value.starts_with('B') && value.as_bytes()[1].is_ascii_digit()
        }
    }
}

/// Parse one `NAME:VALUE` token, validating the per-field value grammar.
pub fn parse_token(text: &str) -> Result<Token, EncodeError> {
    let (name, value) = text
        .split_once(':')
        .ok_or_else(|| EncodeError::Grammar(format!("token {text:?} lacks a ':' separator")))?;
    let field = TokenField::from_name(name)
        .ok_or_else(|| EncodeError::Grammar(format!("unknown token field {name:?}")))?;
    if !valid_value(field, value) {
        return Err(EncodeError::Grammar(format!(
            "invalid value {value:?} for field {name}"
        )));
    }
    Ok(Token {
        field,
        value: value.to_string(),
    })
}

/// Parse a whitespace-separated token fragment (any subset of fields, in
/// any order). An empty string parses to an empty fragment.
pub fn parse_fragment(text: &str) -> Result<Vec<Token>, EncodeError> {
    text.split_whitespace().map(parse_token).collect()
}

/// The compact six-field rendering of a frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenString {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl TokenString {
    fn from_tokens(tokens: Vec<Token>) -> TokenString {
        let text = tokens.iter().map(Token::text).collect::<Vec<_>>().join(" ");
        TokenString { text, tokens }
    }
}

impl fmt::Display for TokenString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Parse a full token string: exactly six tokens in DIR FC UNIT LEN IAT EX
/// order, joined by single spaces. Round-trips losslessly.
pub fn parse_token_string(text: &str) -> Result<TokenString, EncodeError> {
    let tokens = parse_fragment(text)?;
    if tokens.len() != TokenField::ORDER.len() {
        return Err(EncodeError::Grammar(format!(
            "expected {} tokens, found {}",
            TokenField::ORDER.len(),
            tokens.len()
        )));
    }
    for (token, expected) in tokens.iter().zip(TokenField::ORDER) {
        if token.field != expected {
            return Err(EncodeError::Grammar(format!(
                "token {} out of order; expected field {}",
                token.text(),
                expected.name()
            )));
        }
    }
    let ts = TokenString::from_tokens(tokens);
    if ts.text != text {
        return Err(EncodeError::Grammar(
            "token string contains irregular whitespace".into(),
        ));
    }
    Ok(ts)
}

fn fc_value(fc: Option<u8>) -> String {
    match fc {
        // Zero-padded to two digits below 100, plain decimal otherwise.
        Some(fc) if fc < 100 => format!("{fc:02}"),
        Some(fc) => fc.to_string(),
        None => "NA".into(),
    }
}

fn len_bucket(frame: &Frame, bins: &BinBoundaries) -> Option<usize> {
    frame
        .payload_len_bytes
        .map(|v| bucketize(v, &bins.len_edges) + 1)
}

fn iat_bucket(frame: &Frame, bins: &BinBoundaries) -> Option<usize> {
    frame.iat_us.map(|v| bucketize(v, &bins.iat_edges))
}

/// Render a frame as its token string under frozen bins. Absent fields
/// render as explicit `NA` tokens.
pub fn encode_token_string(frame: &Frame, bins: &BinBoundaries) -> TokenString {
    let bucket = |b: Option<usize>| b.map(|i| format!("B{i}")).unwrap_or_else(|| "NA".into());
    let tokens = vec![
        Token { field: TokenField::Dir, value: frame.direction.as_str().into() },
        Token { field: TokenField::Fc, value: fc_value(frame.function_code) },
        Token {
            field: TokenField::Unit,
            value: frame.unit_id.map(|u| format!("U{u}")).unwrap_or_else(|| "NA".into()),
        },
        Token { field: TokenField::Len, value: bucket(len_bucket(frame, bins)) },
        Token { field: TokenField::Iat, value: bucket(iat_bucket(frame, bins)) },
        Token {
            field: TokenField::Ex,
            value: frame.exception_code.map(|e| e.to_string()).unwrap_or_else(|| "NA".into()),
        },
    ];
    TokenString::from_tokens(tokens)
}

/// Tabular feature vector derived from the identical parse as the token
/// string: [function_code, len_bucket, iat_bucket, exception_code,
/// direction, unit_id], with -1 as the absent sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericView {
    pub values: [i64; 6],
}

impl NumericView {
    pub fn function_code(&self) -> i64 {
        self.values[0]
    }
    pub fn len_bucket(&self) -> i64 {
        self.values[1]
    }
    pub fn iat_bucket(&self) -> i64 {
        self.values[2]
    }
    pub fn exception_code(&self) -> i64 {
        self.values[3]
    }
    pub fn direction(&self) -> i64 {
        self.values[4]
    }
    pub fn unit_id(&self) -> i64 {
        self.values[5]
    }
}

/// Encode the numeric view. Bucket values carry the same label numbers as
/// the token string (LEN:B2 -> 2, IAT:B4 -> 4).
pub fn encode_numeric(frame: &Frame, bins: &BinBoundaries) -> NumericView {
    let opt = |v: Option<i64>| v.unwrap_or(-1);
    NumericView {
        values: [
            opt(frame.function_code.map(i64::from)),
            opt(len_bucket(frame, bins).map(|b| b as i64)),
            opt(iat_bucket(frame, bins).map(|b| b as i64)),
            opt(frame.exception_code.map(i64::from)),
            frame.direction.indicator(),
            opt(frame.unit_id.map(i64::from)),
        ],
    }
}
