//! Classification and regression metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::numeric::Tensor;

/// `cm[true][pred]` counts.
pub type ConfusionMatrix = Vec<Vec<u64>>;

pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix> {
    check_lengths(preds.len(), labels.len())?;
    let mut cm = vec![vec![0u64; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::LabelMismatch(format!(
                "class index {} outside 0..{classes}",
                p.max(y)
            )));
        }
        cm[y][p] += 1;
    }
    Ok(cm)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LabelMismatch(format!(
            "{a} predictions for {b} labels"
        )));
    }
    if a == 0 {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    Ok(())
}

fn total(cm: &ConfusionMatrix) -> f64 {
    cm.iter().flatten().sum::<u64>() as f64
}

/// Mean recall over classes that occur in the labels.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> f64 {
    let recalls: Vec<f64> = cm
        .iter()
        .enumerate()
        .filter_map(|(k, row)| {
            let support: u64 = row.iter().sum();
            (support > 0).then(|| row[k] as f64 / support as f64)
        })
        .collect();
    recalls.iter().sum::<f64>() / recalls.len().max(1) as f64
}

/// `(p_o − p_e)/(1 − p_e)`. When chance agreement is already 1 (a single
/// class everywhere) kappa is 1 for perfect agreement and 0 otherwise.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> f64 {
    let n = total(cm);
    let k = cm.len();
    let po = (0..k).map(|i| cm[i][i]).sum::<u64>() as f64 / n;
    let pe = (0..k)
        .map(|i| {
            let row: u64 = cm[i].iter().sum();
            let col: u64 = cm.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if 1.0 - pe <= 0.0 {
        return if po >= 1.0 { 1.0 } else { 0.0 };
    }
    (po - pe) / (1.0 - pe)
}

/// Per-class F1 averaged with weights proportional to class support.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let n = total(cm);
    let k = cm.len();
    let weighted: f64 = (0..k)
        .map(|i| {
            let tp = cm[i][i] as f64;
            let support: u64 = cm[i].iter().sum();
            let predicted: u64 = cm.iter().map(|r| r[i]).sum();
            let denom = support as f64 + predicted as f64;
            let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
            support as f64 * f1
        })
        .sum();
    weighted / n
}

/// `(false positive rate, true positive rate)` and `(recall, precision)`
/// points, one per distinct score taken as a threshold (`score >= τ`), in
/// decreasing threshold order.
fn threshold_sweep(scores: &[f64], positives: &[bool]) -> Result<Vec<(f64, f64, f64, f64)>> {
    check_lengths(scores.len(), positives.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteValue("scores".into()));
    }
    let p = positives.iter().filter(|&&b| b).count() as f64;
    let n = positives.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(Error::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if positives[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            out.push((fp / n, tp / p, tp / p, tp / (tp + fp)));
        }
    }
    Ok(out)
}

fn trapezoid(points: impl Iterator<Item = (f64, f64)>) -> f64 {
    let mut area = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for (x, y) in points {
        if let Some((x0, y0)) = prev {
            area += (x - x0) * (y + y0) / 2.0;
        }
        prev = Some((x, y));
    }
    area
}

/// Area under the ROC curve from (0, 0) through every distinct threshold.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let sweep = threshold_sweep(scores, positives)?;
    Ok(trapezoid(
        std::iter::once((0.0, 0.0)).chain(sweep.iter().map(|&(fpr, tpr, _, _)| (fpr, tpr))),
    ))
}

/// Area under the precision–recall curve, starting from (recall 0,
/// precision 1) and integrated by trapezoids over distinct thresholds.
pub fn auc_pr(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let sweep = threshold_sweep(scores, positives)?;
    Ok(trapezoid(
        std::iter::once((0.0, 1.0)).chain(sweep.iter().map(|&(_, _, r, p)| (r, p))),
    ))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), targets.len())?;
    let (mp, mt) = (mean(preds), mean(targets));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &t) in preds.iter().zip(targets) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp) * (p - mp);
        syy += (t - mt) * (t - mt);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `1 − SS_res/SS_tot`; with constant targets, 1 for an exact fit and 0
/// otherwise.
pub fn r2(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), targets.len())?;
    let mt = mean(targets);
    let ss_res: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (t - p).powi(2))
        .sum();
    let ss_tot: f64 = targets.iter().map(|t| (t - mt).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), targets.len())?;
    Ok((preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / preds.len() as f64)
        .sqrt())
}

/// Named metrics for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub count: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

pub const BALANCED_ACCURACY: &str = "balanced_accuracy";
pub const COHEN_KAPPA: &str = "cohen_kappa";
pub const WEIGHTED_F1: &str = "weighted_f1";
pub const AUROC: &str = "auroc";
pub const AUC_PR: &str = "auc_pr";
pub const PEARSON_R: &str = "pearson_r";
pub const R2: &str = "r2";
pub const RMSE: &str = "rmse";

/// Class indices stored as `f64`, validated against the class count.
pub fn class_indices(targets: &[f64], classes: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&t| {
            if t >= 0.0 && t.fract() == 0.0 && (t as usize) < classes {
                Ok(t as usize)
            } else {
                Err(Error::LabelMismatch(format!(
                    "label {t} is not a class index below {classes}"
                )))
            }
        })
        .collect()
}

/// Metrics for model outputs `[N, outputs]`: one logit per sample for binary
/// classification, one logit per class otherwise, one value for regression.
/// Binary tasks additionally report AUROC and AUC-PR on the sigmoid scores.
pub fn evaluate_metrics(outputs: &Tensor, targets: &[f64], kind: TaskKind) -> Result<EvalReport> {
    let n = targets.len();
    check_lengths(outputs.shape().first().copied().unwrap_or(0), n)?;
    if outputs.shape() != [n, kind.outputs()] {
        return Err(Error::LabelMismatch(format!(
            "outputs of shape {:?} for a {}-output task",
            outputs.shape(),
            kind.outputs()
        )));
    }
    let mut metrics = BTreeMap::new();
    match kind {
        TaskKind::Classification { classes } => {
            let labels = class_indices(targets, classes)?;
            let preds: Vec<usize> = if classes == 2 {
                outputs
                    .data()
                    .iter()
                    .map(|&z| usize::from(z > 0.0))
                    .collect()
            } else {
                (0..n)
                    .map(|i| {
                        let row = outputs.row(i);
                        (0..classes).fold(0, |best, k| if row[k] > row[best] { k } else { best })
                    })
                    .collect()
            };
            let cm = confusion_matrix(&preds, &labels, classes)?;
            metrics.insert(BALANCED_ACCURACY.into(), balanced_accuracy(&cm));
            metrics.insert(COHEN_KAPPA.into(), cohen_kappa(&cm));
            metrics.insert(WEIGHTED_F1.into(), weighted_f1(&cm));
            if classes == 2 {
                let scores: Vec<f64> = outputs
                    .data()
                    .iter()
                    .map(|&z| 1.0 / (1.0 + (-z).exp()))
                    .collect();
                let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
                metrics.insert(AUROC.into(), auroc(&scores, &pos)?);
                metrics.insert(AUC_PR.into(), auc_pr(&scores, &pos)?);
            }
        }
        TaskKind::Regression => {
            let preds = outputs.data();
            metrics.insert(PEARSON_R.into(), pearson(preds, targets)?);
            metrics.insert(R2.into(), r2(preds, targets)?);
            metrics.insert(RMSE.into(), rmse(preds, targets)?);
        }
    }
    Ok(EvalReport {
        task: kind,
        count: n,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1, 0, 0];
        let cm = confusion_matrix(&y, &y, 3).unwrap();
        assert_eq!(balanced_accuracy(&cm), 1.0);
        assert_eq!(cohen_kappa(&cm), 1.0);
        assert_eq!(weighted_f1(&cm), 1.0);
    }

    #[test]
    fn binary_balanced_accuracy_example() {
        // TP=1, FN=1, TN=2, FP=0.
        let labels = [1, 1, 0, 0];
        let preds = [1, 0, 0, 0];
        let cm = confusion_matrix(&preds, &labels, 2).unwrap();
        assert_eq!(balanced_accuracy(&cm), 0.75);
    }

    #[test]
    fn marginal_independent_predictions_have_zero_kappa() {
        // cm[i][j] = row_i * col_j / N with rows (2, 4), columns (3, 3).
        let cm = vec![vec![1, 1], vec![2, 2]];
        assert_eq!(cohen_kappa(&cm), 0.0);
        // rows (3, 6, 3), columns (4, 4, 4), N = 12.
        let cm = vec![vec![1, 1, 1], vec![2, 2, 2], vec![1, 1, 1]];
        assert!(cohen_kappa(&cm).abs() < 1e-15);
    }

    #[test]
    fn single_class_auroc_is_error() {
        assert_eq!(
            auroc(&[0.1, 0.2], &[true, true]).unwrap_err(),
            Error::SingleClassLabels
        );
        assert_eq!(
            auc_pr(&[0.1, 0.2], &[false, false]).unwrap_err(),
            Error::SingleClassLabels
        );
    }

    #[test]
    fn auc_examples() {
        let pos = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &pos).unwrap(), 0.5);
        assert_eq!(auc_pr(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap(), 1.0);
        // All tied: one point at (recall 1, precision 0.5) joined to (0, 1).
        assert_eq!(auc_pr(&[0.5; 4], &pos).unwrap(), 0.75);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(matches!(
            confusion_matrix(&[], &[], 2),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]),
            Err(Error::LabelMismatch(_))
        ));
        assert!(matches!(
            confusion_matrix(&[3], &[0], 2),
            Err(Error::LabelMismatch(_))
        ));
    }

    #[test]
    fn regression_examples() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert!((pearson(&[2.0, 4.0, 6.0, 8.0], &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[8.0, 6.0, 4.0, 2.0], &t).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(rmse(&[2.0, 3.0, 4.0, 5.0], &t).unwrap(), 1.0);
        assert_eq!(r2(&[2.5; 4], &t).unwrap(), 0.0);
    }

    #[test]
    fn report_for_each_task_kind() {
        let out = Tensor::new(vec![4, 1], vec![-2.0, 1.0, 3.0, -0.5]).unwrap();
        let rep = evaluate_metrics(
            &out,
            &[0.0, 1.0, 1.0, 1.0],
            TaskKind::Classification { classes: 2 },
        )
        .unwrap();
        assert_eq!(rep.get(BALANCED_ACCURACY), Some((1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(rep.get(AUROC), Some(1.0));
        let out = Tensor::new(vec![2, 3], vec![0.1, 0.9, 0.0, 2.0, 0.0, 1.0]).unwrap();
        let rep =
            evaluate_metrics(&out, &[1.0, 0.0], TaskKind::Classification { classes: 3 }).unwrap();
        assert_eq!(rep.get(BALANCED_ACCURACY), Some(1.0));
        assert_eq!(rep.get(AUROC), None);
        let out = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let rep = evaluate_metrics(&out, &[1.0, 3.0], TaskKind::Regression).unwrap();
        assert_eq!(rep.get(RMSE), Some(0.0));
        assert!(rep.to_csv().starts_with("metric,value\npearson_r,"));
        assert!(
            evaluate_metrics(&out, &[0.5, 1.0], TaskKind::Classification { classes: 2 }).is_err()
        );
    }

    // Brute-force oracles: computed directly from the (prediction, label)
    // pairs or score lists without a confusion matrix or a sorted sweep.

    fn oracle_bacc(p: &[usize], y: &[usize], k: usize) -> f64 {
        let mut recalls = Vec::new();
        for c in 0..k {
            let support = y.iter().filter(|&&v| v == c).count();
            if support > 0 {
                let hit = p
                    .iter()
                    .zip(y)
                    .filter(|(a, b)| **a == c && **b == c)
                    .count();
                recalls.push(hit as f64 / support as f64);
            }
        }
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }

    fn oracle_kappa(p: &[usize], y: &[usize], k: usize) -> f64 {
        let n = y.len() as f64;
        let po = p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / n;
        let mut pe = 0.0;
        for c in 0..k {
            let a = y.iter().filter(|&&v| v == c).count() as f64 / n;
            let b = p.iter().filter(|&&v| v == c).count() as f64 / n;
            pe += a * b;
        }
        if pe == 1.0 {
            return if po == 1.0 { 1.0 } else { 0.0 };
        }
        (po - pe) / (1.0 - pe)
    }

    fn oracle_f1(p: &[usize], y: &[usize], k: usize) -> f64 {
        let n = y.len() as f64;
        let mut s = 0.0;
        for c in 0..k {
            let tp = p
                .iter()
                .zip(y)
                .filter(|(a, b)| **a == c && **b == c)
                .count() as f64;
            let fp = p
                .iter()
                .zip(y)
                .filter(|(a, b)| **a == c && **b != c)
                .count() as f64;
            let fne = p
                .iter()
                .zip(y)
                .filter(|(a, b)| **a != c && **b == c)
                .count() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
            let f1 = if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            };
            s += (tp + fne) / n * f1;
        }
        s
    }

    /// Mann–Whitney statistic: fraction of (positive, negative) pairs ranked
    /// correctly, ties counting one half.
    fn oracle_auroc(s: &[f64], pos: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in (0..s.len()).filter(|&i| pos[i]) {
            for j in (0..s.len()).filter(|&j| !pos[j]) {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / pairs
    }

    /// Recounts TP/FP from scratch at every distinct threshold.
    fn oracle_auc_pr(s: &[f64], pos: &[bool]) -> f64 {
        let mut th: Vec<f64> = s.to_vec();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let p = pos.iter().filter(|&&b| b).count() as f64;
        let mut pts = vec![(0.0, 1.0)];
        for t in th {
            let tp = (0..s.len()).filter(|&i| s[i] >= t && pos[i]).count() as f64;
            let fp = (0..s.len()).filter(|&i| s[i] >= t && !pos[i]).count() as f64;
            pts.push((tp / p, tp / (tp + fp)));
        }
        pts.windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let cov = x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - sx / n) * (b - sy / n))
            .sum::<f64>();
        let vx = x.iter().map(|a| (a - sx / n).powi(2)).sum::<f64>();
        let vy = y.iter().map(|b| (b - sy / n).powi(2)).sum::<f64>();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn classification_metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let k = rng.random_range(2..6);
            let n = rng.random_range(1..60);
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let p: Vec<usize> = (0..n)
                .map(|i| {
                    if rng.random_bool(0.5) {
                        y[i]
                    } else {
                        rng.random_range(0..k)
                    }
                })
                .collect();
            let cm = confusion_matrix(&p, &y, k).unwrap();
            assert!((balanced_accuracy(&cm) - oracle_bacc(&p, &y, k)).abs() <= 1e-10);
            assert!((cohen_kappa(&cm) - oracle_kappa(&p, &y, k)).abs() <= 1e-10);
            assert!((weighted_f1(&cm) - oracle_f1(&p, &y, k)).abs() <= 1e-10);
        }
    }

    #[test]
    fn ranking_metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut done = 0;
        while done < 1000 {
            let n = rng.random_range(2..50);
            let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            if pos.iter().all(|&b| b) || pos.iter().all(|&b| !b) {
                continue;
            }
            // Coarse scores force plenty of ties.
            let levels = rng.random_range(2..10);
            let s: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(0..levels)) / 7.0)
                .collect();
            assert!((auroc(&s, &pos).unwrap() - oracle_auroc(&s, &pos)).abs() <= 1e-10);
            assert!((auc_pr(&s, &pos).unwrap() - oracle_auc_pr(&s, &pos)).abs() <= 1e-10);
            done += 1;
        }
    }

    #[test]
    fn regression_metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.random_range(2..40);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p: Vec<f64> = y.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
            assert!((pearson(&p, &y).unwrap() - oracle_pearson(&p, &y)).abs() <= 1e-10);
            let mse = p
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n as f64;
            assert!((rmse(&p, &y).unwrap() - mse.sqrt()).abs() <= 1e-10);
            let my = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n as f64;
            assert!((r2(&p, &y).unwrap() - (1.0 - mse / var)).abs() <= 1e-10);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(10_000))]
            #[test]
            fn metric_bounds(
                pairs in proptest::collection::vec((0usize..4, 0usize..4, 0.0f64..1.0), 2..30),
            ) {
                let p: Vec<usize> = pairs.iter().map(|t| t.0).collect();
                let y: Vec<usize> = pairs.iter().map(|t| t.1).collect();
                let cm = confusion_matrix(&p, &y, 4).unwrap();
                let in01 = |v: f64| (0.0..=1.0).contains(&v);
                prop_assert!(in01(balanced_accuracy(&cm)));
                prop_assert!(in01(weighted_f1(&cm)));
                prop_assert!((-1.0..=1.0).contains(&cohen_kappa(&cm)));
                let s: Vec<f64> = pairs.iter().map(|t| t.2).collect();
                let pos: Vec<bool> = y.iter().map(|&v| v >= 2).collect();
                if pos.iter().any(|&b| b) && pos.iter().any(|&b| !b) {
                    prop_assert!(in01(auroc(&s, &pos).unwrap()));
                    prop_assert!(in01(auc_pr(&s, &pos).unwrap()));
                }
                let r = pearson(&s, &y.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap();
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
