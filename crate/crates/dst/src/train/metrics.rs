//! Classification metrics and the evaluation report.
//!
//! AUC uses the rank statistic with average ranks for probability ties, so it
//! matches the brute-force pairwise definition (1 per correctly ordered
//! positive-negative pair, 0.5 per tie) exactly.

use serde::{Deserialize, Serialize};

use super::TrainError;

/// Clamp bound keeping log() finite.
pub const PROB_EPS: f64 = 1e-7;

// ── Confusion counts ──

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u32,
    pub fp: u32,
    pub tn: u32,
    #[serde(rename = "fn")]
    pub fn_: u32,
}

impl Confusion {
    pub fn from_predictions(probs: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&p, &l) in probs.iter().zip(labels) {
            match (p >= threshold, l != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u32 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn acc(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        f64::from(self.tp + self.tn) / f64::from(self.total())
    }

    /// Harmonic mean of precision and recall for the positive class; zero
    /// when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        f64::from(2 * self.tp) / f64::from(2 * self.tp + self.fp + self.fn_)
    }

    pub fn merged(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

// ── AUC ──

/// Area under the ROC curve by the rank statistic; `None` when either class
/// is absent.
pub fn auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    debug_assert_eq!(probs.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));

    // Average 1-based ranks within tie groups, then sum positive ranks.
    let mut rank_pos_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && probs[order[j]] == probs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] != 0 {
                rank_pos_sum += mean_rank;
            }
        }
        i = j;
    }
    let u = rank_pos_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Direct pairwise definition, quadratic; the oracle the rank form is tested
/// against.
pub fn auc_pairwise(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let mut pairs = 0.0;
    let mut credit = 0.0;
    for (i, &pi) in probs.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &pj) in probs.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if pi > pj {
                credit += 1.0;
            } else if pi == pj {
                credit += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        None
    } else {
        Some(credit / pairs)
    }
}

// ── Loss ──

/// Negative log-likelihood of Bernoulli labels: mean over sequences of the
/// summed per-step cross-entropy, probabilities clamped away from {0, 1}.
pub fn bce_loss(sequences: &[(&[f64], &[f64])]) -> Result<f64, TrainError> {
    if sequences.is_empty() {
        return Err(TrainError::Config("loss of zero sequences".to_string()));
    }
    let mut total = 0.0;
    for (i, (probs, labels)) in sequences.iter().enumerate() {
        if probs.len() != labels.len() {
            return Err(TrainError::Config(format!(
                "sequence {i}: {} probabilities vs {} labels",
                probs.len(),
                labels.len()
            )));
        }
        for (&y, &l) in probs.iter().zip(labels.iter()) {
            let y = y.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total -= l * y.ln() + (1.0 - l) * (1.0 - y).ln();
        }
    }
    Ok(total / sequences.len() as f64)
}

// ── Reports ──

/// Metrics of one prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub acc: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub confusion: Confusion,
}

pub fn compute_metrics(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<MetricsEntry, TrainError> {
    if probs.len() != labels.len() {
        return Err(TrainError::Config(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(TrainError::Config("metrics of an empty set".to_string()));
    }
    let confusion = Confusion::from_predictions(probs, labels, threshold);
    Ok(MetricsEntry {
        acc: confusion.acc(),
        f1: confusion.f1(),
        auc: auc(probs, labels),
        confusion,
    })
}

/// One training repeat's held-out result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatReport {
    pub seed: u64,
    pub acc: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub confusion: Confusion,
    /// Mean per-window training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Aggregate over repeated seeds: means, population standard deviations,
/// summed confusion counts, and the per-repeat rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub acc: f64,
    pub acc_sd: f64,
    pub f1: f64,
    pub f1_sd: f64,
    pub auc: Option<f64>,
    pub auc_sd: Option<f64>,
    pub confusion: Confusion,
    pub repeats: Vec<RepeatReport>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn aggregate(variant: &str, repeats: Vec<RepeatReport>) -> Result<Self, TrainError> {
        if repeats.is_empty() {
            return Err(TrainError::Config("report of zero repeats".to_string()));
        }
        let accs: Vec<f64> = repeats.iter().map(|r| r.acc).collect();
        let f1s: Vec<f64> = repeats.iter().map(|r| r.f1).collect();
        let aucs: Vec<f64> = repeats.iter().filter_map(|r| r.auc).collect();
        let (acc, acc_sd) = mean_sd(&accs);
        let (f1, f1_sd) = mean_sd(&f1s);
        let (auc, auc_sd) = if aucs.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_sd(&aucs);
            (Some(m), Some(s))
        };
        let confusion = repeats
            .iter()
            .fold(Confusion::default(), |acc, r| acc.merged(r.confusion));
        Ok(EvalReport {
            variant: variant.to_string(),
            acc,
            acc_sd,
            f1,
            f1_sd,
            auc,
            auc_sd,
            confusion,
            repeats,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-repeat rows plus a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,row,seed,acc,f1,auc,tp,fp,tn,fn\n");
        let fmt_auc = |a: Option<f64>| a.map(|v| v.to_string()).unwrap_or_default();
        for (i, r) in self.repeats.iter().enumerate() {
            out.push_str(&format!(
                "{},repeat{},{},{},{},{},{},{},{},{}\n",
                self.variant,
                i,
                r.seed,
                r.acc,
                r.f1,
                fmt_auc(r.auc),
                r.confusion.tp,
                r.confusion.fp,
                r.confusion.tn,
                r.confusion.fn_,
            ));
        }
        out.push_str(&format!(
            "{},mean,,{},{},{},{},{},{},{}\n",
            self.variant,
            self.acc,
            self.f1,
            fmt_auc(self.auc),
            self.confusion.tp,
            self.confusion.fp,
            self.confusion.tn,
            self.confusion.fn_,
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_example_pins_acc_and_f1() {
        // TP=2, FP=1, TN=1, FN=0.
        let probs = [0.9, 0.8, 0.7, 0.2];
        let labels = [1, 1, 0, 0];
        let m = compute_metrics(&probs, &labels, 0.5).unwrap();
        let c = m.confusion;
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (2, 1, 1, 0));
        assert_eq!(m.acc, 0.75);
        assert_eq!(m.f1, 0.8);
        assert_eq!(c.total(), 4);
        // ACC + error rate = 1 exactly.
        let err = f64::from(c.fp + c.fn_) / f64::from(c.total());
        assert_eq!(m.acc + err, 1.0);
    }

    #[test]
    fn f1_is_zero_without_true_positives() {
        let m = compute_metrics(&[0.1, 0.2, 0.9], &[1, 1, 0], 0.5).unwrap();
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn auc_matches_the_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for case in 0..40 {
            let n = rng.gen_range(2..=100);
            // A coarse grid forces plenty of exact ties.
            let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=9) as f64 / 9.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let fast = auc(&probs, &labels);
            let slow = auc_pairwise(&probs, &labels);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}")
                }
                other => panic!("case {case}: {other:?}"),
            }
        }
    }

    #[test]
    fn auc_edges_are_exact() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]), Some(0.5));
        assert_eq!(auc(&[0.4, 0.6], &[1, 1]), None);
        assert_eq!(auc(&[0.4, 0.6], &[0, 0]), None);
    }

    #[test]
    fn metrics_ignore_sample_order() {
        let probs = [0.9, 0.3, 0.6, 0.2, 0.6];
        let labels = [1, 0, 1, 1, 0];
        let base = compute_metrics(&probs, &labels, 0.5).unwrap();
        let perm = [4usize, 2, 0, 1, 3];
        let p2: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
        let l2: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let moved = compute_metrics(&p2, &l2, 0.5).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn bce_closed_forms() {
        // Single step y = 0.5 with a positive label.
        let l = bce_loss(&[(&[0.5], &[1.0])]).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
        // Perfect prediction tends to zero (up to the clamp).
        let l = bce_loss(&[(&[1.0], &[1.0])]).unwrap();
        assert!(l < 1e-6);
        // Label-flip symmetry.
        let y = [0.3, 0.8, 0.55];
        let t = [1.0, 0.0, 1.0];
        let yf: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let tf: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let a = bce_loss(&[(&y, &t)]).unwrap();
        let b = bce_loss(&[(&yf, &tf)]).unwrap();
        assert!((a - b).abs() < 1e-12);
        // Mean over sequences of per-sequence sums.
        let two = bce_loss(&[(&[0.5], &[1.0]), (&[0.5, 0.5], &[0.0, 1.0])]).unwrap();
        assert!((two - 1.5 * 2.0f64.ln()).abs() < 1e-12);
        // Length mismatch is rejected.
        assert!(bce_loss(&[(&[0.5, 0.5], &[1.0])]).is_err());
    }

    #[test]
    fn report_aggregation_brackets_the_mean() {
        let mk = |seed, acc, auc| RepeatReport {
            seed,
            acc,
            f1: acc,
            auc,
            confusion: Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 },
            epoch_losses: vec![],
        };
        let rep = EvalReport::aggregate(
            "full",
            vec![mk(0, 0.8, Some(0.9)), mk(1, 0.9, Some(0.7)), mk(2, 0.7, None)],
        )
        .unwrap();
        assert!((rep.acc - 0.8).abs() < 1e-12);
        assert!(rep.acc >= 0.7 && rep.acc <= 0.9);
        assert!((rep.auc.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(rep.confusion.total(), 12);
        let json = rep.to_json();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 1);
        assert!(csv.lines().nth(3).unwrap().ends_with(",1,1,1,1"));
    }
}
