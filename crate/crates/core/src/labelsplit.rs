//! Attack-window construction, binary labeling, and the canonical
//! leakage-free train/validation/test split.

use crate::encode::BinBoundaries;
use crate::ingest::{AttackEvent, Frame};
use crate::types::{FrameId, Label, Partition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("split ratios must be positive and sum to 1 (got {0})")]
    BadRatios(f64),
    #[error("impossible split assignment: {0}")]
    Impossible(String),
    #[error("by-file split needs at least 3 source files, found {0}")]
    TooFewFiles(usize),
}

/// A merged attack time window; any frame inside is labeled critical.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackWindow {
    pub start_us: i64,
    pub end_us: i64,
    pub scenarios: BTreeSet<String>,
}

impl AttackWindow {
    /// Closed-interval membership on both ends.
    pub fn contains(&self, timestamp_us: i64) -> bool {
        self.start_us <= timestamp_us && timestamp_us <= self.end_us
    }
}

/// Merge events into disjoint, sorted windows. Consecutive events closer
/// than `merge_gap_s` share a window; each window extends `tail_s` beyond
/// its last event. Windows that overlap or touch after the tail extension
/// are merged so the output stays disjoint.
pub fn build_windows(events: &[AttackEvent], merge_gap_s: f64, tail_s: f64) -> Vec<AttackWindow> {
    if events.is_empty() {
        return Vec::new();
    }
    let mut events: Vec<&AttackEvent> = events.iter().collect();
    events.sort_by_key(|e| e.timestamp_us);

    let gap_us = (merge_gap_s * 1e6).round() as i64;
    let tail_us = (tail_s * 1e6).round() as i64;

    let mut windows: Vec<AttackWindow> = Vec::new();
    for event in events {
        match windows.last_mut() {
            Some(w) if event.timestamp_us - (w.end_us - tail_us) < gap_us => {
                w.end_us = event.timestamp_us + tail_us;
                w.scenarios.insert(event.scenario.clone());
            }
            _ => windows.push(AttackWindow {
                start_us: event.timestamp_us,
                end_us: event.timestamp_us + tail_us,
                scenarios: BTreeSet::from([event.scenario.clone()]),
            }),
        }
    }

    // Tail extensions longer than the merge gap can make neighbors overlap.
    let mut merged: Vec<AttackWindow> = Vec::with_capacity(windows.len());
    for w in windows {
        match merged.last_mut() {
            Some(prev) if w.start_us <= prev.end_us => {
                prev.end_us = prev.end_us.max(w.end_us);
                prev.scenarios.extend(w.scenarios);
            }
            _ => merged.push(w),
        }
    }
    merged
}

/// Label each frame critical iff its timestamp falls inside some window.
pub fn label_frames(frames: &[Frame], windows: &[AttackWindow]) -> Vec<(FrameId, Label)> {
    frames
        .iter()
        .map(|f| {
            let idx = windows.partition_point(|w| w.start_us <= f.timestamp_us);
            let label = if idx > 0 && windows[idx - 1].contains(f.timestamp_us) {
                Label::Critical
            } else {
                Label::Normal
            };
            (f.id(), label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    ByFile,
    ByTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), SplitError> {
        let sum = self.train + self.validation + self.test;
        if self.train <= 0.0 || self.validation <= 0.0 || self.test <= 0.0
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(SplitError::BadRatios(sum));
        }
        Ok(())
    }
}

/// Parameters that fully determine a split; recorded in every artifact so
/// runs are reproducible from the policy alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    pub mode: SplitMode,
    pub ratios: SplitRatios,
    pub merge_gap_s: f64,
    pub tail_s: f64,
}

/// The canonical split: every frame assigned exactly once, no window with
/// frames in more than one partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Split {
    pub split_id: String,
    pub policy: SplitPolicy,
    pub assignment: BTreeMap<FrameId, Partition>,
    pub window_manifest: Vec<AttackWindow>,
    pub achieved: SplitRatios,
    pub warnings: Vec<String>,
}

fn compute_split_id(
    policy: &SplitPolicy,
    windows: &[AttackWindow],
    assignment: &BTreeMap<FrameId, Partition>,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(policy).expect("policy serializes"));
    hasher.update(serde_json::to_vec(windows).expect("windows serialize"));
    for (id, partition) in assignment {
        hasher.update(id.as_str().as_bytes());
        hasher.update(partition.as_str().as_bytes());
    }
    hex::encode(&hasher.finalize()[..6])
}

/// Move a nominal time cut outward (later) until it no longer falls inside
/// any attack window.
fn snap_cut(mut cut_ts: i64, windows: &[AttackWindow]) -> i64 {
    loop {
        let inside = windows
            .iter()
            .find(|w| w.start_us <= cut_ts && cut_ts < w.end_us);
        match inside {
            Some(w) => cut_ts = w.end_us,
            None => return cut_ts,
        }
    }
}

fn check_class_coverage(
    assignment: &BTreeMap<FrameId, Partition>,
    labels: &BTreeMap<FrameId, Label>,
    warnings: &mut Vec<String>,
) {
    let mut seen: BTreeMap<Partition, BTreeSet<Label>> = BTreeMap::new();
    for (id, partition) in assignment {
        if let Some(label) = labels.get(id) {
            seen.entry(*partition).or_default().insert(*label);
        }
    }
    for partition in [Partition::Train, Partition::Validation, Partition::Test] {
        let classes = seen.get(&partition).map(BTreeSet::len).unwrap_or(0);
        if classes < 2 {
            warnings.push(format!("partition {partition} does not contain both classes"));
        }
    }
}

fn achieved_ratios(assignment: &BTreeMap<FrameId, Partition>) -> SplitRatios {
    let n = assignment.len().max(1) as f64;
    let count =
        |p: Partition| assignment.values().filter(|&&q| q == p).count() as f64 / n;
    SplitRatios {
        train: count(Partition::Train),
        validation: count(Partition::Validation),
        test: count(Partition::Test),
    }
}

fn split_by_time(
    frames: &[Frame],
    windows: &[AttackWindow],
    ratios: &SplitRatios,
) -> Result<BTreeMap<FrameId, Partition>, SplitError> {
    let mut order: Vec<&Frame> = frames.iter().collect();
    order.sort_by(|a, b| {
        (a.timestamp_us, &a.source_file, a.seq_no).cmp(&(b.timestamp_us, &b.source_file, b.seq_no))
    });
    let n = order.len();
    if n < 3 {
        return Err(SplitError::Impossible(format!(
            "need at least 3 frames for 3 partitions, found {n}"
        )));
    }

    let nominal = |target: f64| -> usize {
        ((n as f64 * target).round() as usize).clamp(1, n - 1)
    };
    let cut1 = snap_cut(order[nominal(ratios.train) - 1].timestamp_us, windows);
    let nominal2 = nominal(ratios.train + ratios.validation);
    let mut cut2_ts = order[nominal2 - 1].timestamp_us;
    if cut2_ts <= cut1 {
        // Snapping swallowed the nominal validation block; restart it at the
        // first frame past the train cut.
        cut2_ts = order
            .iter()
            .map(|f| f.timestamp_us)
            .find(|&ts| ts > cut1)
            .ok_or_else(|| {
                SplitError::Impossible(format!(
                    "train cut at {cut1} micros leaves no frames for validation/test \
                     (a window may span the remainder of the data)"
                ))
            })?;
    }
    let cut2 = snap_cut(cut2_ts, windows);

    let mut assignment = BTreeMap::new();
    for frame in &order {
        let partition = if frame.timestamp_us <= cut1 {
            Partition::Train
        } else if frame.timestamp_us <= cut2 {
            Partition::Validation
        } else {
            Partition::Test
        };
        assignment.insert(frame.id(), partition);
    }
    for partition in [Partition::Train, Partition::Validation, Partition::Test] {
        if !assignment.values().any(|&p| p == partition) {
            return Err(SplitError::Impossible(format!(
                "partition {partition} is empty after snapping cuts to window edges \
                 (cuts at {cut1} and {cut2} micros)"
            )));
        }
    }
    Ok(assignment)
}

fn split_by_file(
    frames: &[Frame],
    windows: &[AttackWindow],
    ratios: &SplitRatios,
) -> Result<BTreeMap<FrameId, Partition>, SplitError> {
    let mut per_file: BTreeMap<&str, u64> = BTreeMap::new();
    for f in frames {
        *per_file.entry(&f.source_file).or_insert(0) += 1;
    }
    let files: Vec<&str> = per_file.keys().copied().collect();
    let counts: Vec<u64> = files.iter().map(|f| per_file[f]).collect();
    let total: u64 = counts.iter().sum();
    if files.len() < 3 {
        return Err(SplitError::TooFewFiles(files.len()));
    }

    // Cumulative frame fraction after each file; boundary k means the first
    // k files belong to the earlier side.
    let mut cum = Vec::with_capacity(files.len());
    let mut acc = 0u64;
    for c in &counts {
        acc += c;
        cum.push(acc as f64 / total as f64);
    }
    let pick = |target: f64, lo: usize, hi: usize| -> usize {
        (lo..=hi)
            .min_by(|&a, &b| {
                let da = (cum[a - 1] - target).abs();
                let db = (cum[b - 1] - target).abs();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .unwrap()
    };
    let mut k1 = pick(ratios.train, 1, files.len() - 2);
    let mut k2 = pick(ratios.train + ratios.validation, k1 + 1, files.len() - 1);

    // Repair crossings: a window with frames in two partitions pulls every
    // file it touches into the earlier partition.
    loop {
        let file_index: BTreeMap<&str, usize> =
            files.iter().enumerate().map(|(i, f)| (*f, i)).collect();
        let partition_of = |file: &str| -> Partition {
            let idx = file_index[file];
            if idx < k1 {
                Partition::Train
            } else if idx < k2 {
                Partition::Validation
            } else {
                Partition::Test
            }
        };
        let mut crossing = None;
        for w in windows {
            let touched: BTreeSet<usize> = frames
                .iter()
                .filter(|f| w.contains(f.timestamp_us))
                .map(|f| file_index[f.source_file.as_str()])
                .collect();
            let partitions: BTreeSet<Partition> = touched
                .iter()
                .map(|&i| partition_of(files[i]))
                .collect();
            if partitions.len() > 1 {
                crossing = Some((w, touched, partitions));
                break;
            }
        }
        let Some((w, touched, partitions)) = crossing else {
            break;
        };
        let last = *touched.iter().max().unwrap() + 1;
        if partitions.contains(&Partition::Train) {
            k1 = last;
            k2 = k2.max(k1 + 1);
        } else {
            k2 = last;
        }
        if k2 > files.len() - 1 || k1 > files.len() - 2 {
            return Err(SplitError::Impossible(format!(
                "window [{}, {}] spans files across every candidate boundary",
                w.start_us, w.end_us
            )));
        }
    }

    let mut assignment = BTreeMap::new();
    for f in frames {
        let idx = files.iter().position(|x| *x == f.source_file).unwrap();
        let partition = if idx < k1 {
            Partition::Train
        } else if idx < k2 {
            Partition::Validation
        } else {
            Partition::Test
        };
        assignment.insert(f.id(), partition);
    }
    Ok(assignment)
}

/// Build the canonical split. Partition boundaries snap outward (enlarging
/// the earlier partition) so no attack window straddles a boundary.
pub fn make_split(
    frames: &[Frame],
    labels: &BTreeMap<FrameId, Label>,
    windows: &[AttackWindow],
    policy: &SplitPolicy,
) -> Result<Split, SplitError> {
    policy.ratios.validate()?;
    let assignment = match policy.mode {
        SplitMode::ByTime => split_by_time(frames, windows, &policy.ratios)?,
        SplitMode::ByFile => split_by_file(frames, windows, &policy.ratios)?,
    };
    let mut warnings = Vec::new();
    check_class_coverage(&assignment, labels, &mut warnings);
    for w in &warnings {
        log::warn!("{w}");
    }
    let achieved = achieved_ratios(&assignment);
    let split_id = compute_split_id(policy, windows, &assignment);
    Ok(Split {
        split_id,
        policy: policy.clone(),
        assignment,
        window_manifest: windows.to_vec(),
        achieved,
        warnings,
    })
}

/// Result of the leakage audit; failures are reported, never thrown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeakageReport {
    pub pass: bool,
    pub violations: Vec<String>,
}

/// Assert the split invariants: every frame assigned exactly once, no
/// window with frames in more than one partition, and (when provided) bins
/// fitted under this split's identifier.
pub fn verify_no_leakage(
    split: &Split,
    frames: &[Frame],
    bins: Option<&BinBoundaries>,
) -> LeakageReport {
    let mut violations = Vec::new();

    let mut seen = BTreeSet::new();
    for frame in frames {
        let id = frame.id();
        if !seen.insert(id.clone()) {
            violations.push(format!("duplicate frame id {id}"));
        }
        if !split.assignment.contains_key(&id) {
            violations.push(format!("frame {id} has no partition assignment"));
        }
    }
    for id in split.assignment.keys() {
        if !seen.contains(id) {
            violations.push(format!("assignment references unknown frame {id}"));
        }
    }

    for (i, w) in split.window_manifest.iter().enumerate() {
        let partitions: BTreeSet<Partition> = frames
            .iter()
            .filter(|f| w.contains(f.timestamp_us))
            .filter_map(|f| split.assignment.get(&f.id()).copied())
            .collect();
        if partitions.len() > 1 {
            let names: Vec<&str> = partitions.iter().map(Partition::as_str).collect();
            violations.push(format!(
                "window {i} [{}, {}] has frames in partitions {}",
                w.start_us,
                w.end_us,
                names.join("/")
            ));
        }
    }

    if let Some(bins) = bins {
        if bins.fit_split_id != split.split_id {
            violations.push(format!(
                "bins were fitted under split {} but this split is {}",
                bins.fit_split_id, split.split_id
            ));
        }
    }

    LeakageReport {
        pass: violations.is_empty(),
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Direction;

    fn event(ts_s: i64) -> AttackEvent {
        AttackEvent {
            timestamp_us: ts_s * 1_000_000,
            scenario: format!("s{ts_s}"),
            source_file: "log".into(),
        }
    }

    fn frame(src: &str, seq: u64, ts: i64) -> Frame {
        Frame {
            seq_no: seq,
            timestamp_us: ts,
            direction: Direction::C2S,
            function_code: Some(3),
            unit_id: Some(1),
            payload_len_bytes: Some(14),
            iat_us: None,
            exception_code: Some(0),
            source_file: src.into(),
            parse_warning: false,
        }
    }

    #[test]
    fn close_events_merge_into_one_window() {
        let windows = build_windows(&[event(0), event(30)], 60.0, 10.0);
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].start_us, 0);
        assert_eq!(windows[0].end_us, 40_000_000);
        assert_eq!(windows[0].scenarios.len(), 2);
    }

    #[test]
    fn distant_events_form_two_windows() {
        let windows = build_windows(&[event(0), event(120)], 60.0, 10.0);
        assert_eq!(windows.len(), 2);
        assert_eq!((windows[0].start_us, windows[0].end_us), (0, 10_000_000));
        assert_eq!(
            (windows[1].start_us, windows[1].end_us),
            (120_000_000, 130_000_000)
        );
    }

    #[test]
    fn no_events_no_windows() {
        assert!(build_windows(&[], 60.0, 10.0).is_empty());
    }

    #[test]
    fn overlapping_tails_stay_disjoint() {
        let windows = build_windows(&[event(0), event(61)], 60.0, 70.0);
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].end_us, 131_000_000);
    }

    #[test]
    fn no_windows_all_normal() {
        let frames = vec![frame("a", 0, 100), frame("a", 1, 200)];
        let labels = label_frames(&frames, &[]);
        assert!(labels.iter().all(|(_, l)| *l == Label::Normal));
    }

    #[test]
    fn window_boundaries_are_closed() {
        let windows = build_windows(&[event(10)], 60.0, 10.0);
        let frames = vec![
            frame("a", 0, 10_000_000),
            frame("a", 1, 20_000_000),
            frame("a", 2, 20_000_001),
        ];
        let labels = label_frames(&frames, &windows);
        assert_eq!(labels[0].1, Label::Critical); // exactly at start
        assert_eq!(labels[1].1, Label::Critical); // exactly at end
        assert_eq!(labels[2].1, Label::Normal);
    }

    #[test]
    fn window_covering_middle_frames_counts() {
        let frames: Vec<Frame> = (0..10).map(|i| frame("a", i, i as i64 * 1000)).collect();
        let windows = vec![AttackWindow {
            start_us: 3000,
            end_us: 5000,
            scenarios: BTreeSet::from(["x".to_string()]),
        }];
        let labels = label_frames(&frames, &windows);
        let critical = labels.iter().filter(|(_, l)| *l == Label::Critical).count();
        assert_eq!(critical, 3);
        assert_eq!(labels.len() - critical, 7);
    }

    fn label_map(frames: &[Frame], windows: &[AttackWindow]) -> BTreeMap<FrameId, Label> {
        label_frames(frames, windows).into_iter().collect()
    }

    fn policy(mode: SplitMode) -> SplitPolicy {
        SplitPolicy {
            mode,
            ratios: SplitRatios {
                train: 0.6,
                validation: 0.2,
                test: 0.2,
            },
            merge_gap_s: 60.0,
            tail_s: 10.0,
        }
    }

    #[test]
    fn unconstrained_by_time_split_is_clean() {
        let frames: Vec<Frame> = (0..100).map(|i| frame("a", i, i as i64 * 1000)).collect();
        let labels = label_map(&frames, &[]);
        let split = make_split(&frames, &labels, &[], &policy(SplitMode::ByTime)).unwrap();
        assert!((split.achieved.train - 0.6).abs() < 1e-9);
        assert!((split.achieved.validation - 0.2).abs() < 1e-9);
        assert!((split.achieved.test - 0.2).abs() < 1e-9);
    }

    #[test]
    fn straddling_window_moves_cut_outward() {
        let frames: Vec<Frame> = (0..100).map(|i| frame("a", i, i as i64 * 1000)).collect();
        // Nominal train cut lands at ts 59000; this window straddles it.
        let windows = vec![AttackWindow {
            start_us: 55_000,
            end_us: 70_000,
            scenarios: BTreeSet::from(["x".to_string()]),
        }];
        let labels = label_map(&frames, &windows);
        let split = make_split(&frames, &labels, &windows, &policy(SplitMode::ByTime)).unwrap();
        assert!(split.achieved.train > 0.6);
        let report = verify_no_leakage(&split, &frames, None);
        assert!(report.pass, "{:?}", report.violations);
    }

    #[test]
    fn three_files_get_one_partition_each() {
        let mut frames = Vec::new();
        for (fi, name) in ["a", "b", "c"].iter().enumerate() {
            for i in 0..10 {
                frames.push(frame(name, i, (fi as i64) * 100_000 + i as i64 * 1000));
            }
        }
        let labels = label_map(&frames, &[]);
        let mut pol = policy(SplitMode::ByFile);
        pol.ratios = SplitRatios {
            train: 0.34,
            validation: 0.33,
            test: 0.33,
        };
        let split = make_split(&frames, &labels, &[], &pol).unwrap();
        let partition_of = |src: &str| {
            let mut parts: BTreeSet<Partition> = frames
                .iter()
                .filter(|f| f.source_file == src)
                .map(|f| split.assignment[&f.id()])
                .collect();
            assert_eq!(parts.len(), 1);
            parts.pop_first().unwrap()
        };
        assert_eq!(partition_of("a"), Partition::Train);
        assert_eq!(partition_of("b"), Partition::Validation);
        assert_eq!(partition_of("c"), Partition::Test);
    }

    #[test]
    fn one_window_spanning_everything_is_fatal() {
        let frames: Vec<Frame> = (0..50).map(|i| frame("a", i, i as i64 * 1000)).collect();
        let windows = vec![AttackWindow {
            start_us: 0,
            end_us: 49_000,
            scenarios: BTreeSet::from(["x".to_string()]),
        }];
        let labels = label_map(&frames, &windows);
        let err = make_split(&frames, &labels, &windows, &policy(SplitMode::ByTime));
        assert!(matches!(err, Err(SplitError::Impossible(_))));
    }

    #[test]
    fn valid_split_passes_leakage_audit() {
        let frames: Vec<Frame> = (0..60).map(|i| frame("a", i, i as i64 * 1000)).collect();
        let windows = build_windows(
            &[AttackEvent {
                timestamp_us: 10_000,
                scenario: "x".into(),
                source_file: "log".into(),
            }],
            60.0,
            0.005,
        );
        let labels = label_map(&frames, &windows);
        let split = make_split(&frames, &labels, &windows, &policy(SplitMode::ByTime)).unwrap();
        let report = verify_no_leakage(&split, &frames, None);
        assert!(report.pass);
        assert!(report.violations.is_empty());
    }

    #[test]
    fn injected_crossing_window_fails_audit() {
        let frames: Vec<Frame> = (0..60).map(|i| frame("a", i, i as i64 * 1000)).collect();
        let labels = label_map(&frames, &[]);
        let mut split = make_split(&frames, &labels, &[], &policy(SplitMode::ByTime)).unwrap();
        split.window_manifest.push(AttackWindow {
            start_us: 0,
            end_us: 59_000,
            scenarios: BTreeSet::from(["injected".to_string()]),
        });
        let report = verify_no_leakage(&split, &frames, None);
        assert!(!report.pass);
        assert!(report.violations.iter().any(|v| v.contains("window")));
    }

    #[test]
    fn bins_split_id_mismatch_fails_audit() {
        let frames: Vec<Frame> = (0..60).map(|i| frame("a", i, i as i64 * 1000)).collect();
        let labels = label_map(&frames, &[]);
        let split = make_split(&frames, &labels, &[], &policy(SplitMode::ByTime)).unwrap();
        let bins = BinBoundaries {
            len_edges: vec![1, 2, 3],
            iat_edges: vec![1, 2, 3, 4],
            fit_split_id: "someone-else".into(),
            version: 1,
        };
        let report = verify_no_leakage(&split, &frames, Some(&bins));
        assert!(!report.pass);
        assert!(report.violations.iter().any(|v| v.contains("someone-else")));
    }

    #[test]
    fn split_is_deterministic_and_idempotent() {
        let frames: Vec<Frame> = (0..80).map(|i| frame("a", i, i as i64 * 977)).collect();
        let windows = build_windows(&[event(0)], 60.0, 0.002);
        let labels = label_map(&frames, &windows);
        let a = make_split(&frames, &labels, &windows, &policy(SplitMode::ByTime)).unwrap();
        let b = make_split(&frames, &labels, &windows, &a.policy).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.split_id, b.split_id);
    }
}
