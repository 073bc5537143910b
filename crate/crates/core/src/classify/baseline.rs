//! In-repo scored baseline: a logistic-style linear scorer over the numeric
//! view plus the validation threshold-sweep protocol.

use super::{ClassifyError, Prediction};
use crate::encode::NumericView;
use crate::types::Label;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Linear scorer with a frozen decision threshold. The threshold is chosen
/// once on the validation split and held fixed for test scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBaseline {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub threshold: f64,
    pub trained_on_split: String,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ScoredBaseline {
    /// Class-weighted full-batch gradient descent on standardized features.
    /// Deterministic: zero initialization, fixed epoch count and rate.
    pub fn train(
        views: &[NumericView],
        labels: &[Label],
        split_id: &str,
        epochs: u32,
        learning_rate: f64,
    ) -> Result<ScoredBaseline, ClassifyError> {
        assert_eq!(views.len(), labels.len());
        let n = views.len();
        if n == 0 || !labels.contains(&Label::Critical) || !labels.contains(&Label::Normal) {
            return Err(ClassifyError::SingleClassValidation);
        }
        let dims = 6;

        let mut means = vec![0.0; dims];
        for v in views {
            for (m, x) in means.iter_mut().zip(v.values) {
                *m += x as f64;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        let mut stds = vec![0.0; dims];
        for v in views {
            for ((s, m), x) in stds.iter_mut().zip(&means).zip(v.values) {
                *s += (x as f64 - m).powi(2);
            }
        }
        for s in &mut stds {
            *s = (*s / n as f64).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }

        let standardized: Vec<Vec<f64>> = views
            .iter()
            .map(|v| {
                v.values
                    .iter()
                    .zip(&means)
                    .zip(&stds)
                    .map(|((&x, m), s)| (x as f64 - m) / s)
                    .collect()
            })
            .collect();

        // Balanced class weights: n / (2 * n_class).
        let n_critical = labels.iter().filter(|&&l| l == Label::Critical).count() as f64;
        let n_normal = n as f64 - n_critical;
        let w_critical = n as f64 / (2.0 * n_critical);
        let w_normal = n as f64 / (2.0 * n_normal);

        let mut weights = vec![0.0; dims];
        let mut bias = 0.0;
        for _ in 0..epochs {
            let mut grad_w = vec![0.0; dims];
            let mut grad_b = 0.0;
            for (x, label) in standardized.iter().zip(labels) {
                let z = bias + weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                let p = sigmoid(z);
                let (y, cw) = match label {
                    Label::Critical => (1.0, w_critical),
                    Label::Normal => (0.0, w_normal),
                };
                let err = cw * (p - y);
                for (g, xi) in grad_w.iter_mut().zip(x) {
                    *g += err * xi;
                }
                grad_b += err;
            }
            for (w, g) in weights.iter_mut().zip(&grad_w) {
                *w -= learning_rate * g / n as f64;
            }
            bias -= learning_rate * grad_b / n as f64;
        }

        Ok(ScoredBaseline {
            weights,
            bias,
            feature_means: means,
            feature_stds: stds,
            threshold: 0.5,
            trained_on_split: split_id.to_string(),
        })
    }

    /// The critical-class score in [0, 1].
    pub fn score(&self, view: &NumericView) -> f64 {
        let z = self.bias
            + view
                .values
                .iter()
                .zip(&self.weights)
                .zip(&self.feature_means)
                .zip(&self.feature_stds)
                .map(|(((&x, w), m), s)| w * (x as f64 - m) / s)
                .sum::<f64>();
        sigmoid(z)
    }

    /// Thresholded decision: critical iff score >= threshold (inclusive).
    /// The confidence recorded is the raw score.
    pub fn predict(&self, view: &NumericView) -> Prediction {
        let score = self.score(view);
        let label = if score >= self.threshold {
            Label::Critical
        } else {
            Label::Normal
        };
        Prediction {
            label,
            confidence: score,
            rationale: format!("score {score:.4} vs threshold {:.4}", self.threshold),
            latency_ms: 0.0,
            token_usage: None,
            attempts: 1,
        }
    }

    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("baseline serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// Result of the validation threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub tau: f64,
    pub macro_f1: f64,
    /// Set when every validation score is identical.
    pub degenerate: bool,
}

fn macro_f1_at(scores: &[(f64, Label)], tau: f64) -> f64 {
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for &(s, label) in scores {
        let predicted_critical = s >= tau;
        match (predicted_critical, label) {
            (true, Label::Critical) => tp += 1,
            (true, Label::Normal) => fp += 1,
            (false, Label::Critical) => fn_ += 1,
            (false, Label::Normal) => tn += 1,
        }
    }
    let f1 = |tp: u64, fp: u64, fn_: u64| -> f64 {
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    // Per-class F1 with critical as positive, then normal as positive.
    (f1(tp, fp, fn_) + f1(tn, fn_, fp)) / 2.0
}

/// Sweep candidate thresholds (midpoints between adjacent distinct sorted
/// scores, plus 0 and 1) and return the one maximizing validation macro-F1.
/// Ties break toward the smaller threshold.
pub fn sweep_threshold(scores: &[(f64, Label)]) -> Result<ThresholdSweep, ClassifyError> {
    let has_critical = scores.iter().any(|(_, l)| *l == Label::Critical);
    let has_normal = scores.iter().any(|(_, l)| *l == Label::Normal);
    if !has_critical || !has_normal {
        return Err(ClassifyError::SingleClassValidation);
    }
    for &(s, _) in scores {
        if !s.is_finite() || !(0.0..=1.0).contains(&s) {
            return Err(ClassifyError::InvalidScore(s));
        }
    }

    let mut distinct: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();

    let mut candidates = vec![0.0, 1.0];
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();

    let degenerate = distinct.len() == 1;
    if degenerate {
        log::warn!("all validation scores identical; threshold sweep is degenerate");
    }

    let mut best_tau = candidates[0];
    let mut best_f1 = macro_f1_at(scores, best_tau);
    for &tau in &candidates[1..] {
        let f1 = macro_f1_at(scores, tau);
        if f1 > best_f1 {
            best_f1 = f1;
            best_tau = tau;
        }
    }
    Ok(ThresholdSweep {
        tau: best_tau,
        macro_f1: best_f1,
        degenerate,
    })
}
