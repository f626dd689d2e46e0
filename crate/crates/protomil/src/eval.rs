//! Evaluation metrics: accuracy, Mann–Whitney AUC with tie credit, positive-
//! class F-score, and cross-validation aggregation with standard errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::types::Label;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` when only one class is present (AUC undefined).
    pub auc: Option<f64>,
    pub f_score: f64,
}

/// Metrics for one list of (positive-class probability, label) pairs.
///
/// Accuracy and F-score use the 0.5 threshold. AUC is the Mann–Whitney
/// statistic: over all positive/negative pairs, credit 1 for a higher
/// positive score, 0.5 for a tie.
pub fn compute_metrics(scores: &[(f64, Label)]) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to evaluate".into()));
    }
    for &(s, _) in scores {
        if !s.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite score {s}")));
        }
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    let mut correct = 0usize;
    for &(s, label) in scores {
        let predicted_positive = s >= 0.5;
        match (predicted_positive, label) {
            (true, Label::Positive) => {
                tp += 1;
                correct += 1;
            }
            (true, Label::Negative) => fp += 1,
            (false, Label::Positive) => fne += 1,
            (false, Label::Negative) => correct += 1,
        }
    }
    let accuracy = correct as f64 / scores.len() as f64;
    let f_score = if 2 * tp + fp + fne == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    };
    let auc = auc_mann_whitney(scores);
    Ok(Metrics {
        accuracy,
        auc,
        f_score,
    })
}

fn auc_mann_whitney(scores: &[(f64, Label)]) -> Option<f64> {
    // Rank-based O(n log n) formulation with average ranks for ties; equal
    // to the pairwise sum of 1 / 0.5 / 0 credits.
    let n_pos = scores.iter().filter(|(_, l)| *l == Label::Positive).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // 1-based average rank for the tie group [i, j].
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if scores[idx].1 == Label::Positive {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// AUC that errors when undefined, for callers requiring both classes.
pub fn compute_auc(scores: &[(f64, Label)]) -> Result<f64> {
    compute_metrics(scores)?.auc.ok_or(Error::AucUndefined)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Standard error of the mean; 0 for a single fold.
    pub sem: f64,
}

fn mean_sem(values: &[f64]) -> MeanSem {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sem = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    };
    MeanSem { mean, sem }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub format_version: u32,
    pub per_fold: Vec<Metrics>,
    pub accuracy: MeanSem,
    pub auc: Option<MeanSem>,
    pub f_score: MeanSem,
}

impl MetricReport {
    /// Aggregate over completed folds. AUC aggregates are reported only when
    /// every fold has a defined AUC.
    pub fn from_folds(per_fold: Vec<Metrics>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::InvalidInput("no folds to aggregate".into()));
        }
        let accuracy = mean_sem(&per_fold.iter().map(|m| m.accuracy).collect::<Vec<_>>());
        let f_score = mean_sem(&per_fold.iter().map(|m| m.f_score).collect::<Vec<_>>());
        let aucs: Vec<f64> = per_fold.iter().filter_map(|m| m.auc).collect();
        let auc = (aucs.len() == per_fold.len()).then(|| mean_sem(&aucs));
        Ok(Self {
            format_version: REPORT_VERSION,
            per_fold,
            accuracy,
            auc,
            f_score,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Schema(format!("metric report serialization: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// CSV with one row per fold plus an aggregate row.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fold,accuracy,auc,f_score\n");
        for (i, m) in self.per_fold.iter().enumerate() {
            let auc = m.auc.map_or(String::new(), |a| format!("{a}"));
            out.push_str(&format!("{i},{},{auc},{}\n", m.accuracy, m.f_score));
        }
        let auc_mean = self.auc.map_or(String::new(), |a| format!("{}", a.mean));
        out.push_str(&format!(
            "mean,{},{auc_mean},{}\n",
            self.accuracy.mean, self.f_score.mean
        ));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Human-readable summary table (for the CLI).
    pub fn summary_table(&self) -> String {
        let auc = match self.auc {
            Some(a) => format!("{:.4} ± {:.4}", a.mean, a.sem),
            None => "undefined".into(),
        };
        format!(
            "folds: {}\naccuracy: {:.4} ± {:.4}\nauc:      {auc}\nf_score:  {:.4} ± {:.4}",
            self.per_fold.len(),
            self.accuracy.mean,
            self.accuracy.sem,
            self.f_score.mean,
            self.f_score.sem,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn auc_pairwise_oracle(scores: &[(f64, Label)]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .filter(|(_, l)| *l == Label::Positive)
            .map(|&(s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .filter(|(_, l)| *l == Label::Negative)
            .map(|&(s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut credit = 0.0;
        for &p in &pos {
            for &n in &neg {
                credit += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(credit / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfectly_separated_is_one() {
        let scores = vec![
            (0.9, Label::Positive),
            (0.8, Label::Positive),
            (0.2, Label::Negative),
            (0.1, Label::Negative),
        ];
        let m = compute_metrics(&scores).unwrap();
        assert_eq!(m.auc, Some(1.0));
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f_score, 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        let scores = vec![
            (0.4, Label::Positive),
            (0.4, Label::Negative),
            (0.4, Label::Positive),
            (0.4, Label::Negative),
        ];
        assert_eq!(compute_metrics(&scores).unwrap().auc, Some(0.5));
    }

    #[test]
    fn worked_example_three_quarters() {
        let scores = vec![
            (0.9, Label::Positive),
            (0.8, Label::Negative),
            (0.7, Label::Positive),
            (0.2, Label::Negative),
        ];
        let m = compute_metrics(&scores).unwrap();
        assert_eq!(m.auc, Some(0.75));
        assert_eq!(m.auc, auc_pairwise_oracle(&scores));
    }

    #[test]
    fn matches_pairwise_oracle_on_random_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..200 {
            let n = rng.random_range(2..60);
            let scores: Vec<(f64, Label)> = (0..n)
                .map(|_| {
                    // Coarse grid so ties actually occur.
                    let s = rng.random_range(0..10) as f64 / 10.0;
                    let l = if rng.random_range(0.0..1.0) < 0.5 {
                        Label::Positive
                    } else {
                        Label::Negative
                    };
                    (s, l)
                })
                .collect();
            assert_eq!(
                auc_mann_whitney(&scores),
                auc_pairwise_oracle(&scores),
                "case {case}"
            );
        }
    }

    #[test]
    fn single_class_auc_undefined_but_others_returned() {
        let scores = vec![(0.9, Label::Positive), (0.3, Label::Positive)];
        let m = compute_metrics(&scores).unwrap();
        assert!(m.auc.is_none());
        assert_eq!(m.accuracy, 0.5);
        assert!(matches!(compute_auc(&scores), Err(Error::AucUndefined)));
    }

    #[test]
    fn order_invariance() {
        let mut scores = vec![
            (0.9, Label::Positive),
            (0.8, Label::Negative),
            (0.7, Label::Positive),
            (0.5, Label::Negative),
            (0.5, Label::Positive),
        ];
        let m1 = compute_metrics(&scores).unwrap();
        scores.reverse();
        let m2 = compute_metrics(&scores).unwrap();
        assert_eq!(m1.auc, m2.auc);
        assert_eq!(m1.accuracy, m2.accuracy);
        assert_eq!(m1.f_score, m2.f_score);
    }

    #[test]
    fn f_score_worked_example() {
        // tp=1 (0.9 pos), fp=1 (0.6 neg), fn=1 (0.2 pos): F = 2/(2+1+1) = 0.5
        let scores = vec![
            (0.9, Label::Positive),
            (0.6, Label::Negative),
            (0.2, Label::Positive),
            (0.1, Label::Negative),
        ];
        assert_eq!(compute_metrics(&scores).unwrap().f_score, 0.5);
    }

    #[test]
    fn aggregation_mean_and_sem() {
        let folds = vec![
            Metrics {
                accuracy: 0.8,
                auc: Some(0.9),
                f_score: 0.7,
            },
            Metrics {
                accuracy: 0.6,
                auc: Some(0.7),
                f_score: 0.5,
            },
        ];
        let report = MetricReport::from_folds(folds).unwrap();
        assert!((report.accuracy.mean - 0.7).abs() < 1e-12);
        // sample std = 0.1414..., sem = std/sqrt(2) = 0.1
        assert!((report.accuracy.sem - 0.1).abs() < 1e-12);
        assert!((report.auc.unwrap().mean - 0.8).abs() < 1e-12);
    }

    #[test]
    fn csv_export_contains_rows() {
        let report = MetricReport::from_folds(vec![Metrics {
            accuracy: 1.0,
            auc: Some(1.0),
            f_score: 1.0,
        }])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        report.save_csv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("fold,accuracy,auc,f_score\n"));
        assert!(text.contains("mean,1,1,1\n"));
    }
}
