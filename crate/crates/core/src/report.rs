//! Classification metrics, latency/cost summaries, and the consolidated
//! evaluation report bundle.

use crate::audit::ValiditySummary;
use crate::probes::{NecessityDecomposition, PassCurve};
use crate::types::{FrameId, Label};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("prediction/label id mismatch; missing in gold: {missing_in_gold:?}, missing in predictions: {missing_in_predictions:?}")]
    IdMismatch {
        missing_in_gold: Vec<FrameId>,
        missing_in_predictions: Vec<FrameId>,
    },
    #[error("latency summary requires at least one sample")]
    NoLatencies,
}

/// Confusion counts with critical as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub recall_critical: f64,
    pub f1_critical: f64,
    pub f1_normal: f64,
    pub confusion: Confusion,
    pub warnings: Vec<String>,
}

fn f1(tp: u64, fp: u64, fn_: u64, class: &str, warnings: &mut Vec<String>) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        warnings.push(format!("class {class} absent from gold and predictions; F1 = 0"));
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Compute accuracy, macro-F1 (unweighted mean of per-class F1), and
/// recall/F1 on the critical class. Prediction and gold key sets must match
/// exactly; a mismatch is fatal and lists the missing ids.
pub fn compute_metrics(
    predictions: &BTreeMap<FrameId, Label>,
    gold: &BTreeMap<FrameId, Label>,
) -> Result<MetricsSummary, ReportError> {
    let missing_in_gold: Vec<FrameId> = predictions
        .keys()
        .filter(|id| !gold.contains_key(*id))
        .cloned()
        .collect();
    let missing_in_predictions: Vec<FrameId> = gold
        .keys()
        .filter(|id| !predictions.contains_key(*id))
        .cloned()
        .collect();
    if !missing_in_gold.is_empty() || !missing_in_predictions.is_empty() {
        return Err(ReportError::IdMismatch {
            missing_in_gold,
            missing_in_predictions,
        });
    }

    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (id, predicted) in predictions {
        match (predicted, gold[id]) {
            (Label::Critical, Label::Critical) => c.tp += 1,
            (Label::Critical, Label::Normal) => c.fp += 1,
            (Label::Normal, Label::Critical) => c.fn_ += 1,
            (Label::Normal, Label::Normal) => c.tn += 1,
        }
    }

    let mut warnings = Vec::new();
    let total = c.total();
    let accuracy = if total == 0 {
        warnings.push("empty evaluation set".into());
        0.0
    } else {
        (c.tp + c.tn) as f64 / total as f64
    };
    let recall_critical = if c.tp + c.fn_ == 0 {
        warnings.push("no critical frames in gold; recall_critical = 0".into());
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1_critical = f1(c.tp, c.fp, c.fn_, "critical", &mut warnings);
    let f1_normal = f1(c.tn, c.fn_, c.fp, "normal", &mut warnings);

    Ok(MetricsSummary {
        accuracy,
        macro_f1: (f1_critical + f1_normal) / 2.0,
        recall_critical,
        f1_critical,
        f1_normal,
        confusion: c,
        warnings,
    })
}

/// Tukey outlier bounds: [Q1 - 1.5*IQR, Q3 + 1.5*IQR].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fences {
    pub low_s: f64,
    pub high_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRange {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyCost {
    pub median_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub fences: Option<Fences>,
    pub filtered_count: u64,
    pub cost_per_1k: Option<CostRange>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    /// Currency per million input tokens.
    pub input_per_m: f64,
    /// Currency per million output tokens.
    pub output_per_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Nearest-rank percentile over a sorted slice.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Fences from nearest-rank quartiles of the raw input list.
pub fn tukey_fences(latencies_s: &[f64]) -> Fences {
    let mut sorted = latencies_s.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = percentile_nearest_rank(&sorted, 25.0);
    let q3 = percentile_nearest_rank(&sorted, 75.0);
    let iqr = q3 - q1;
    Fences {
        low_s: q1 - 1.5 * iqr,
        high_s: q3 + 1.5 * iqr,
    }
}

/// Drop values outside the Tukey fences computed from the input itself.
/// Returns kept values in input order plus the fences.
pub fn tukey_filter(latencies_s: &[f64]) -> (Vec<f64>, Fences) {
    let fences = tukey_fences(latencies_s);
    let kept = latencies_s
        .iter()
        .copied()
        .filter(|&v| v >= fences.low_s && v <= fences.high_s)
        .collect();
    (kept, fences)
}

/// Latency percentiles after IQR filtering, plus the amortized cost range
/// per 1k inferences over the prompt-overhead interval.
///
/// Fewer than 4 samples skip the fences and report raw percentiles with a
/// warning. Cost is absent when prices or usage are not available.
pub fn latency_summary(
    latencies_s: &[f64],
    prices: Option<&Prices>,
    usage: Option<&UsageTotals>,
    overhead_tokens: (u64, u64),
) -> Result<LatencyCost, ReportError> {
    if latencies_s.is_empty() {
        return Err(ReportError::NoLatencies);
    }
    let mut warnings = Vec::new();

    let (mut kept, fences, filtered_count) = if latencies_s.len() < 4 {
        warnings.push("fewer than 4 latency samples; Tukey fences skipped".to_string());
        (latencies_s.to_vec(), None, 0u64)
    } else {
        let (kept, fences) = tukey_filter(latencies_s);
        let dropped = (latencies_s.len() - kept.len()) as u64;
        (kept, Some(fences), dropped)
    };
    kept.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let cost_per_1k = match (prices, usage) {
        (Some(prices), Some(usage)) if usage.calls > 0 => {
            let mean_input = usage.input_tokens as f64 / usage.calls as f64;
            let mean_output = usage.output_tokens as f64 / usage.calls as f64;
            let cost = |overhead: u64| -> f64 {
                1000.0
                    * ((mean_input + overhead as f64) * prices.input_per_m
                        + mean_output * prices.output_per_m)
                    / 1e6
            };
            Some(CostRange {
                low: cost(overhead_tokens.0),
                high: cost(overhead_tokens.1),
            })
        }
        _ => None,
    };

    Ok(LatencyCost {
        median_s: percentile_nearest_rank(&kept, 50.0),
        p95_s: percentile_nearest_rank(&kept, 95.0),
        p99_s: percentile_nearest_rank(&kept, 99.0),
        fences,
        filtered_count,
        cost_per_1k,
        warnings,
    })
}

/// The consolidated machine-readable evaluation bundle. Sections absent
/// from a run are `None` and listed in `absent_sections`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub backend: String,
    pub evaluated_frames: u64,
    pub metrics: MetricsSummary,
    pub validity: Option<ValiditySummary>,
    pub curves: Vec<PassCurve>,
    pub necessity_flip_baseline: Option<f64>,
    pub counterfactual_flip_rate: Option<f64>,
    pub decomposition: Option<NecessityDecomposition>,
    pub latency: Option<LatencyCost>,
    pub absent_sections: Vec<String>,
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|p| format!("{p:.2}%")).unwrap_or_else(|| "n/a".into())
}

/// Render the human-readable summary printed to standard output.
pub fn render_text_summary(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let m = &bundle.metrics;
    out.push_str(&format!(
        "== evaluation report (backend: {}) ==\n",
        bundle.backend
    ));
    out.push_str(&format!("frames evaluated: {}\n\n", bundle.evaluated_frames));
    out.push_str("-- classification --\n");
    out.push_str(&format!(
        "method={} accuracy={:.4} macro_f1={:.4} recall_critical={:.4} f1_critical={:.4}\n",
        bundle.backend, m.accuracy, m.macro_f1, m.recall_critical, m.f1_critical
    ));
    out.push_str(&format!(
        "confusion: tp={} fp={} fn={} tn={}\n",
        m.confusion.tp, m.confusion.fp, m.confusion.fn_, m.confusion.tn
    ));
    for w in &m.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }

    if let Some(v) = &bundle.validity {
        out.push_str("\n-- audit record validity --\n");
        out.push_str(&format!(
            "json_well_formed={} spans_valid={} risk_citation_consistent={} contradiction_free={}\n",
            fmt_pct(v.json_well_formed_pct),
            fmt_pct(v.spans_valid_pct),
            fmt_pct(v.risk_citation_consistent_pct),
            fmt_pct(v.contradiction_free_pct),
        ));
        out.push_str(&format!(
            "unexplained_critical={} ({} of {} critical)\n",
            fmt_pct(v.unexplained_critical_pct),
            v.unexplained_critical_count,
            v.critical_total
        ));
    }

    for curve in &bundle.curves {
        out.push_str(&format!("\n-- {} pass rate vs epsilon --\n", curve.kind.as_str()));
        for (i, eps) in curve.epsilons.iter().enumerate() {
            out.push_str(&format!(
                "eps={:.3} pass={:.4} ci=[{:.4}, {:.4}]\n",
                eps, curve.pass_rate[i], curve.ci_low[i], curve.ci_high[i]
            ));
        }
    }
    if let Some(baseline) = bundle.necessity_flip_baseline {
        out.push_str(&format!("necessity strict flip baseline: {baseline:.4}\n"));
    }
    if let Some(rate) = bundle.counterfactual_flip_rate {
        out.push_str(&format!("counterfactual strict flip rate: {rate:.4}\n"));
    }

    if let Some(d) = &bundle.decomposition {
        out.push_str("\n-- necessity decomposition --\n");
        for (label, row) in &d.per_class {
            out.push_str(&format!(
                "class={label} n={} flip_rate={:.4} mean_delta={:.3}\n",
                row.n, row.flip_rate, row.mean_delta_minus
            ));
        }
        for (bucket, row) in &d.per_tokens_removed {
            out.push_str(&format!(
                "tokens_removed={bucket} n={} mean_delta={:.3}\n",
                row.n, row.mean_delta_minus
            ));
        }
        if let Some([q1, q2, q3]) = d.delta_quartiles {
            out.push_str(&format!("delta quartiles: {q1:.3} / {q2:.3} / {q3:.3}\n"));
        }
    }

    if let Some(l) = &bundle.latency {
        out.push_str("\n-- latency and cost --\n");
        out.push_str(&format!(
            "median={:.3}s p95={:.3}s p99={:.3}s filtered={}\n",
            l.median_s, l.p95_s, l.p99_s, l.filtered_count
        ));
        if let Some(f) = &l.fences {
            out.push_str(&format!("fences: [{:.3}s, {:.3}s]\n", f.low_s, f.high_s));
        }
        if let Some(c) = &l.cost_per_1k {
            out.push_str(&format!("cost per 1k inferences: ${:.2}-${:.2}\n", c.low, c.high));
        }
        for w in &l.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
    }

    if !bundle.absent_sections.is_empty() {
        out.push_str(&format!(
            "\nabsent sections: {}\n",
            bundle.absent_sections.join(", ")
        ));
    }
    out
}

/// One `metrics.csv` row: method plus the four headline metrics.
pub fn metrics_csv_row(method: &str, m: &MetricsSummary) -> String {
    format!(
        "{method},{:.4},{:.4},{:.4},{:.4}",
        m.accuracy, m.macro_f1, m.recall_critical, m.f1_critical
    )
}
