//! Capture and attack-log ingestion: parse raw inputs into normalized,
//! deduplicated, time-ordered frame and event streams.

mod attack_log;
mod fallback;
pub mod modbus;
pub mod pcap;

pub use attack_log::{parse_attack_log, parse_attack_log_str, AttackLogResult};
pub use fallback::{export_frames_csv, CSV_HEADER};

use crate::types::{Direction, FrameId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// One parsed Modbus/TCP message with timing and protocol fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    /// Ordinal within the source file.
    pub seq_no: u64,
    /// Microseconds since the Unix epoch, UTC.
    pub timestamp_us: i64,
    pub direction: Direction,
    pub function_code: Option<u8>,
    pub unit_id: Option<u8>,
    pub payload_len_bytes: Option<u64>,
    /// Microseconds since the previous frame in the same flow; absent for
    /// the first frame of a flow.
    pub iat_us: Option<u64>,
    /// 0 = none; nonzero values come from Modbus exception responses.
    pub exception_code: Option<u8>,
    pub source_file: String,
    /// Set when the Modbus payload could not be fully parsed.
    pub parse_warning: bool,
}

impl Frame {
    pub fn id(&self) -> FrameId {
        FrameId::new(&self.source_file, self.seq_no)
    }
}

/// One attack-log entry on the common UTC time base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackEvent {
    pub timestamp_us: i64,
    pub scenario: String,
    pub source_file: String,
}

/// Counters accumulated while ingesting one or more inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub frames_parsed: u64,
    pub non_modbus_skipped: u64,
    pub parse_warnings: u64,
    pub truncated_records: u64,
    pub malformed_rows_skipped: u64,
    pub exception_convention_violations: u64,
    pub clock_regressions: u64,
    pub dedup_removed: u64,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.frames_parsed += other.frames_parsed;
        self.non_modbus_skipped += other.non_modbus_skipped;
        self.parse_warnings += other.parse_warnings;
        self.truncated_records += other.truncated_records;
        self.malformed_rows_skipped += other.malformed_rows_skipped;
        self.exception_convention_violations += other.exception_convention_violations;
        self.clock_regressions += other.clock_regressions;
        self.dedup_removed += other.dedup_removed;
    }
}

/// Frames parsed from one input along with its counters.
#[derive(Debug)]
pub struct ParsedCapture {
    pub frames: Vec<Frame>,
    pub stats: IngestStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureFormat {
    Pcap,
    Csv,
    Jsonl,
}

impl FromStr for CaptureFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pcap" => Ok(CaptureFormat::Pcap),
            "csv" => Ok(CaptureFormat::Csv),
            "jsonl" => Ok(CaptureFormat::Jsonl),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

/// Flow granularity for inter-arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKey {
    PerFile,
    /// Per (source_file, direction); the default.
    PerDirectionPair,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown capture format {0:?}")]
    UnknownFormat(String),
    #[error("invalid pcap header: {0}")]
    PcapHeader(String),
    #[error("unsupported pcap link type {0}")]
    UnsupportedLinkType(u32),
    #[error("invalid frame CSV/JSONL: {0}")]
    CsvSchema(String),
}

/// Parse one capture file into frames in capture order.
///
/// `source_file` on the emitted frames is the file name for pcap inputs and
/// the per-record column for the CSV/JSONL fallback.
pub fn parse_capture(
    path: &Path,
    format: CaptureFormat,
    modbus_port: u16,
) -> Result<ParsedCapture, IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    match format {
        CaptureFormat::Pcap => pcap::parse_pcap(&bytes, &name, modbus_port),
        CaptureFormat::Csv => fallback::parse_csv(&bytes, &name),
        CaptureFormat::Jsonl => fallback::parse_jsonl(&bytes, &name),
    }
}

/// Fill `iat_us` as the exact timestamp difference to the previous frame of
/// the same flow. The first frame of a flow keeps `iat_us` absent; clock
/// regressions produce an absent value and are counted rather than clamped
/// to zero. Idempotent. Returns the regression count.
pub fn compute_iat(frames: &mut [Frame], flow_key: FlowKey) -> u64 {
    let mut last_seen: BTreeMap<(String, Option<Direction>), i64> = BTreeMap::new();
    let mut regressions = 0u64;

    for frame in frames.iter_mut() {
        let key = match flow_key {
            FlowKey::PerFile => (frame.source_file.clone(), None),
            FlowKey::PerDirectionPair => (frame.source_file.clone(), Some(frame.direction)),
        };
        frame.iat_us = match last_seen.get(&key) {
            None => None,
            Some(&prev) => {
                let diff = frame.timestamp_us - prev;
                if diff < 0 {
                    regressions += 1;
                    None
                } else {
                    Some(diff as u64)
                }
            }
        };
        last_seen.insert(key, frame.timestamp_us);
    }
    regressions
}

type DedupKey = (i64, Direction, Option<u8>, Option<u8>, Option<u64>, Option<u8>);

fn dedup_key(f: &Frame) -> DedupKey {
    (
        f.timestamp_us,
        f.direction,
        f.function_code,
        f.unit_id,
        f.payload_len_bytes,
        f.exception_code,
    )
}

/// Collapse exact duplicates on (timestamp, direction, function code, unit,
/// payload length, exception code) and sort by (source_file, timestamp,
/// seq_no). Returns the deduplicated list and the number of frames removed.
pub fn dedup_normalize(mut frames: Vec<Frame>) -> (Vec<Frame>, u64) {
    frames.sort_by(|a, b| {
        (&a.source_file, a.timestamp_us, a.seq_no).cmp(&(&b.source_file, b.timestamp_us, b.seq_no))
    });
    let mut seen: BTreeSet<DedupKey> = BTreeSet::new();
    let before = frames.len();
    frames.retain(|f| seen.insert(dedup_key(f)));
    let removed = (before - frames.len()) as u64;
    (frames, removed)
}
