//! CSV/JSONL fallback frame formats, one frame per record.
//!
//! Schema: `timestamp_us,direction,function_code,unit_id,payload_len_bytes,
//! exception_code,source_file`. Absent fields are empty strings in CSV and
//! nulls in JSONL.

use super::{Frame, IngestError, IngestStats, ParsedCapture};
use crate::types::Direction;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

pub const CSV_HEADER: [&str; 7] = [
    "timestamp_us",
    "direction",
    "function_code",
    "unit_id",
    "payload_len_bytes",
    "exception_code",
    "source_file",
];

#[derive(Debug, Serialize, Deserialize)]
struct FallbackRecord {
    timestamp_us: i64,
    direction: String,
    function_code: Option<u8>,
    unit_id: Option<u8>,
    payload_len_bytes: Option<u64>,
    exception_code: Option<u8>,
    source_file: String,
}

fn record_to_frame(
    rec: FallbackRecord,
    seq_counters: &mut BTreeMap<String, u64>,
    stats: &mut IngestStats,
) -> Result<Frame, String> {
    let direction: Direction = rec.direction.parse()?;
    let seq = seq_counters.entry(rec.source_file.clone()).or_insert(0);
    let seq_no = *seq;
    *seq += 1;

    // Exception-response convention: a nonzero exception code should come
    // with the function-code high bit set. Violations are recorded, not fatal.
    if let (Some(ex), Some(fc)) = (rec.exception_code, rec.function_code) {
        if ex > 0 && fc & 0x80 == 0 {
            stats.exception_convention_violations += 1;
            log::warn!(
                "{}:{seq_no}: exception_code {ex} with non-exception function code {fc}",
                rec.source_file
            );
        }
    }

    Ok(Frame {
        seq_no,
        timestamp_us: rec.timestamp_us,
        direction,
        function_code: rec.function_code,
        unit_id: rec.unit_id,
        payload_len_bytes: rec.payload_len_bytes,
        iat_us: None,
        exception_code: rec.exception_code,
        source_file: rec.source_file,
        parse_warning: false,
    })
}

pub(crate) fn parse_csv(bytes: &[u8], path_label: &str) -> Result<ParsedCapture, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| IngestError::CsvSchema(format!("{path_label}: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(IngestError::CsvSchema(format!(
            "{path_label}: expected header {:?}, found {:?}",
            CSV_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut stats = IngestStats::default();
    let mut frames = Vec::new();
    let mut seq_counters = BTreeMap::new();
    for (lineno, result) in reader.deserialize::<FallbackRecord>().enumerate() {
        match result {
            Ok(rec) => match record_to_frame(rec, &mut seq_counters, &mut stats) {
                Ok(frame) => frames.push(frame),
                Err(e) => {
                    log::warn!("{path_label}: row {}: {e}; skipped", lineno + 2);
                    stats.malformed_rows_skipped += 1;
                }
            },
            Err(e) => {
                log::warn!("{path_label}: row {}: {e}; skipped", lineno + 2);
                stats.malformed_rows_skipped += 1;
            }
        }
    }
    stats.frames_parsed = frames.len() as u64;
    Ok(ParsedCapture { frames, stats })
}

pub(crate) fn parse_jsonl(bytes: &[u8], path_label: &str) -> Result<ParsedCapture, IngestError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| IngestError::CsvSchema(format!("{path_label}: not UTF-8: {e}")))?;
    let mut stats = IngestStats::default();
    let mut frames = Vec::new();
    let mut seq_counters = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match serde_json::from_str::<FallbackRecord>(line) {
            Ok(rec) => match record_to_frame(rec, &mut seq_counters, &mut stats) {
                Ok(frame) => frames.push(frame),
                Err(e) => {
                    log::warn!("{path_label}: line {}: {e}; skipped", lineno + 1);
                    stats.malformed_rows_skipped += 1;
                }
            },
            Err(e) => {
                log::warn!("{path_label}: line {}: {e}; skipped", lineno + 1);
                stats.malformed_rows_skipped += 1;
            }
        }
    }
    stats.frames_parsed = frames.len() as u64;
    Ok(ParsedCapture { frames, stats })
}

/// Export frames to the CSV fallback schema (absent field = empty string).
pub fn export_frames_csv<W: Write>(frames: &[Frame], writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)
        .map_err(|e| IngestError::CsvSchema(e.to_string()))?;
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    for f in frames {
        w.write_record([
            f.timestamp_us.to_string(),
            f.direction.to_string(),
            f.function_code.map(|x| x.to_string()).unwrap_or_default(),
            f.unit_id.map(|x| x.to_string()).unwrap_or_default(),
            opt(f.payload_len_bytes),
            f.exception_code.map(|x| x.to_string()).unwrap_or_default(),
            f.source_file.clone(),
        ])
        .map_err(|e| IngestError::CsvSchema(e.to_string()))?;
    }
    w.flush().map_err(|e| IngestError::CsvSchema(e.to_string()))?;
    Ok(())
}
