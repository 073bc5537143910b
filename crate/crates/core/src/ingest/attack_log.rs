//! Attack-log ingestion: `timestamp_iso8601,scenario` rows with an optional
//! `# source_tz:` header comment declaring the zone of naive timestamps.

use super::{AttackEvent, IngestError};
use chrono::{DateTime, FixedOffset, NaiveDateTime, TimeZone, Utc};
use std::fs;
use std::path::Path;

#[derive(Debug)]
pub struct AttackLogResult {
    pub events: Vec<AttackEvent>,
    pub warnings: u64,
}

fn parse_source_tz(s: &str) -> Option<FixedOffset> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("utc") || s == "Z" || s == "+00:00" {
        return FixedOffset::east_opt(0);
    }
    let (sign, rest) = match s.as_bytes().first()? {
        b'+' => (1, &s[1..]),
        b'-' => (-1, &s[1..]),
        _ => return None,
    };
    let (h, m) = rest.split_once(':')?;
    let h: i32 = h.parse().ok()?;
    let m: i32 = m.parse().ok()?;
    FixedOffset::east_opt(sign * (h * 3600 + m * 60))
}

fn parse_timestamp(raw: &str, source_tz: FixedOffset) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc).timestamp_micros());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(raw, fmt) {
            // Naive timestamps are interpreted in the declared source zone,
            // with no adjustment beyond it.
            let local = source_tz.from_local_datetime(&naive).single()?;
            return Some(local.with_timezone(&Utc).timestamp_micros());
        }
    }
    None
}

/// Parse an attack-log CSV into UTC-microsecond events sorted by timestamp.
/// Unparseable rows are skipped with a warning; an empty file yields an
/// empty list.
pub fn parse_attack_log(path: &Path) -> Result<AttackLogResult, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let source_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_attack_log_str(&text, &source_name)
}

pub fn parse_attack_log_str(text: &str, source_name: &str) -> Result<AttackLogResult, IngestError> {
    let mut source_tz = FixedOffset::east_opt(0).unwrap();
    let mut events = Vec::new();
    let mut warnings = 0u64;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(tz_raw) = comment.trim().strip_prefix("source_tz:") {
                match parse_source_tz(tz_raw) {
                    Some(tz) => source_tz = tz,
                    None => {
                        log::warn!("{source_name}: line {}: bad source_tz {tz_raw:?}", lineno + 1);
                        warnings += 1;
                    }
                }
            }
            continue;
        }
        if line.starts_with("timestamp_iso8601") {
            continue; // header row
        }
        let Some((ts_raw, scenario)) = line.split_once(',') else {
            log::warn!("{source_name}: line {}: missing scenario column; skipped", lineno + 1);
            warnings += 1;
            continue;
        };
        match parse_timestamp(ts_raw, source_tz) {
            Some(timestamp_us) => events.push(AttackEvent {
                timestamp_us,
                scenario: scenario.trim().to_string(),
                source_file: source_name.to_string(),
            }),
            None => {
                log::warn!(
                    "{source_name}: line {}: unparseable timestamp {ts_raw:?}; skipped",
                    lineno + 1
                );
                warnings += 1;
            }
        }
    }

    events.sort_by(|a, b| {
        a.timestamp_us
            .cmp(&b.timestamp_us)
            .then_with(|| a.scenario.cmp(&b.scenario))
    });
    Ok(AttackLogResult { events, warnings })
}
