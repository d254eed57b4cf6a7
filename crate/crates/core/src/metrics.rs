//! Evaluation metrics: AUPRC, AUROC, balanced accuracy, MAE and Cohen's kappa.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length-of-stay bin edges in hours: under 1 day, one bin per day up to
/// 8 days, 8 to 14 days, over 14 days.
pub const DEFAULT_LOS_BIN_EDGES_HOURS: [f64; 9] = [24.0, 48.0, 72.0, 96.0, 120.0, 144.0, 168.0, 192.0, 336.0];

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((pos, neg))
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Average precision, `sum_n (R_n - R_{n-1}) * P_n` over distinct score
/// thresholds taken in descending order. Tied scores share one threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mann-Whitney AUROC: `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`, computed
/// from midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order = descending(scores);
    order.reverse();
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let start = i;
        while i < order.len() && scores[order[i]] == s {
            i += 1;
        }
        // 1-based ranks start+1 ..= i share their mean
        let mid = (start + 1 + i) as f64 / 2.0;
        rank_sum += mid * order[start..i].iter().filter(|&&j| labels[j]).count() as f64;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Metric("balanced accuracy of empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let classes = truth.iter().max().map_or(0, |&m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let present: Vec<f64> =
        counts.iter().zip(&hits).filter(|(&c, _)| c > 0).map(|(&c, &h)| h as f64 / c as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean absolute error in hours; `step_hours` converts inputs given in grid
/// steps (pass 1.0 when already in hours).
pub fn mae_hours(pred: &[f64], truth: &[f64], step_hours: f64) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Metric("MAE of empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let total: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / truth.len() as f64 * step_hours)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaWeighting {
    #[default]
    None,
    Linear,
}

/// Cohen's kappa `1 - sum(w * O) / sum(w * E)` with disagreement weights
/// `w_ij = [i != j]` or `|i - j| / (n_bins - 1)`. Unweighted this is
/// `(p_o - p_e) / (1 - p_e)`.
pub fn cohen_kappa(pred: &[usize], truth: &[usize], n_bins: usize, weighting: KappaWeighting) -> Result<f64> {
    if truth.is_empty() || pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "kappa needs equal nonempty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&b) = pred.iter().chain(truth).find(|&&b| b >= n_bins) {
        return Err(Error::Metric(format!("bin {b} outside [0, {n_bins})")));
    }
    let n = truth.len() as f64;
    let mut observed = vec![0.0; n_bins * n_bins];
    let mut row = vec![0.0; n_bins];
    let mut col = vec![0.0; n_bins];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t * n_bins + p] += 1.0 / n;
        row[t] += 1.0 / n;
        col[p] += 1.0 / n;
    }
    let weight = |i: usize, j: usize| match weighting {
        KappaWeighting::None => (i != j) as u8 as f64,
        KappaWeighting::Linear => i.abs_diff(j) as f64 / (n_bins.max(2) - 1) as f64,
    };
    let (mut dis_obs, mut dis_exp) = (0.0, 0.0);
    for i in 0..n_bins {
        for j in 0..n_bins {
            let w = weight(i, j);
            dis_obs += w * observed[i * n_bins + j];
            dis_exp += w * row[i] * col[j];
        }
    }
    if dis_exp <= 0.0 {
        return Err(Error::Metric("kappa undefined: chance agreement is 1".into()));
    }
    Ok(1.0 - dis_obs / dis_exp)
}

/// Bin index of a duration: the number of edges not exceeding it.
pub fn los_bin(hours: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|&&e| e <= hours).count()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Precision and recall at every distinct threshold by direct counting.
    fn auprc_oracle(s: &[f64], y: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = y.iter().filter(|&&l| l).count() as f64;
        let mut prev = 0.0;
        let mut ap = 0.0;
        for &th in &thresholds {
            let tp = (0..s.len()).filter(|&i| s[i] >= th && y[i]).count() as f64;
            let predicted = (0..s.len()).filter(|&i| s[i] >= th).count() as f64;
            let r = tp / pos;
            ap += (r - prev) * (tp / predicted);
            prev = r;
        }
        ap
    }

    fn auroc_pairwise(s: &[f64], y: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in (0..s.len()).filter(|&i| y[i]) {
            for j in (0..s.len()).filter(|&j| !y[j]) {
                pairs += 1.0;
                num += match s[i].partial_cmp(&s[j]).unwrap() {
                    Ordering::Greater => 1.0,
                    Ordering::Equal => 0.5,
                    Ordering::Less => 0.0,
                };
            }
        }
        num / pairs
    }

    /// Trapezoidal area under the ROC polyline through every distinct threshold.
    fn auroc_trapezoid(s: &[f64], y: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = s.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = y.iter().filter(|&&l| l).count() as f64;
        let neg = y.len() as f64 - pos;
        let (mut fpr0, mut tpr0, mut area) = (0.0, 0.0, 0.0);
        for &th in &thresholds {
            let tpr = (0..s.len()).filter(|&i| s[i] >= th && y[i]).count() as f64 / pos;
            let fpr = (0..s.len()).filter(|&i| s[i] >= th && !y[i]).count() as f64 / neg;
            area += (fpr - fpr0) * (tpr + tpr0) / 2.0;
            fpr0 = fpr;
            tpr0 = tpr;
        }
        area
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
        loop {
            let n = rng.gen_range(2..=8);
            // a coarse grid makes ties common
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect();
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if y.iter().any(|&l| l) && y.iter().any(|&l| !l) {
                return (s, y);
            }
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auprc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.1], &[false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(auprc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1, 0.2], &[false, false]).is_err());
        assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn auc_match_brute_force_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (s, y) = random_instance(&mut rng);
            let ap = auprc(&s, &y).unwrap();
            assert!((ap - auprc_oracle(&s, &y)).abs() <= 1e-12, "{s:?} {y:?}");
            let roc = auroc(&s, &y).unwrap();
            assert!((roc - auroc_pairwise(&s, &y)).abs() <= 1e-12, "{s:?} {y:?}");
            assert!((roc - auroc_trapezoid(&s, &y)).abs() <= 1e-12, "{s:?} {y:?}");
        }
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 0], &[0, 0, 1]).unwrap(), 0.5);
        // recalls: class 0 1/2, class 1 2/3, class 2 1/1
        let got = balanced_accuracy(&[0, 1, 1, 1, 0, 2], &[0, 0, 1, 1, 1, 2]).unwrap();
        assert!((got - (0.5 + 2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
        // class 1 absent from truth is skipped
        assert_eq!(balanced_accuracy(&[2, 1], &[2, 0]).unwrap(), 0.5);
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn constant_predictor_scores_one_over_c() {
        let truth: Vec<usize> = (0..30).map(|i| i % 5).collect();
        assert!((balanced_accuracy(&[3; 30], &truth).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae_hours(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert!((mae_hours(&[12.0, 24.0], &[0.0, 0.0], 1.0 / 12.0).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(mae_hours(&[3.0], &[5.0], 1.0).unwrap(), 2.0);
        assert!(mae_hours(&[], &[], 1.0).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[0, 1, 2], &[0, 1, 2], 3, KappaWeighting::None).unwrap(), 1.0);
        let k = cohen_kappa(&[0, 1, 1], &[0, 0, 1], 2, KappaWeighting::None).unwrap();
        assert!((k - 0.4).abs() < 1e-12, "{k}");
        // with two bins linear weights coincide with the unweighted form
        let kl = cohen_kappa(&[0, 1, 1], &[0, 0, 1], 2, KappaWeighting::Linear).unwrap();
        assert!((kl - 0.4).abs() < 1e-12);
        assert!(cohen_kappa(&[1, 1], &[1, 1], 3, KappaWeighting::None).is_err());
        assert!(cohen_kappa(&[3], &[0], 3, KappaWeighting::None).is_err());
    }

    #[test]
    fn linear_kappa_hand_case() {
        // truth [0,1,2], pred [1,1,2], 3 bins, weights |i-j|/2
        // observed disagreement 1/3 * 1/2; expected: rows 1/3 each, cols (0, 2/3, 1/3)
        let exp: f64 = [0usize, 1, 2]
            .iter()
            .map(|&i| {
                (1.0 / 3.0) * ((2.0 / 3.0) * i.abs_diff(1) as f64 / 2.0 + (1.0 / 3.0) * i.abs_diff(2) as f64 / 2.0)
            })
            .sum();
        let want = 1.0 - (1.0 / 6.0) / exp;
        let got = cohen_kappa(&[1, 1, 2], &[0, 1, 2], 3, KappaWeighting::Linear).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn chance_agreement_averages_out_exhaustively() {
        // over every pair of bin sequences, mean p_o equals mean p_e
        for (n, bins) in [(3usize, 2usize), (4, 2), (3, 3)] {
            let total = bins.pow(n as u32);
            let seq = |mut code: usize| -> Vec<usize> {
                (0..n)
                    .map(|_| {
                        let b = code % bins;
                        code /= bins;
                        b
                    })
                    .collect()
            };
            let (mut po, mut pe) = (0.0, 0.0);
            for a in 0..total {
                for b in 0..total {
                    let (p, t) = (seq(a), seq(b));
                    po += p.iter().zip(&t).filter(|(x, y)| x == y).count() as f64 / n as f64;
                    pe += (0..bins)
                        .map(|k| {
                            let fp = p.iter().filter(|&&v| v == k).count() as f64 / n as f64;
                            let ft = t.iter().filter(|&&v| v == k).count() as f64 / n as f64;
                            fp * ft
                        })
                        .sum::<f64>();
                }
            }
            assert!((po - pe).abs() < 1e-9, "n={n} bins={bins}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<usize> = (0..20000).map(|_| rng.gen_range(0..4)).collect();
        let t: Vec<usize> = (0..20000).map(|_| rng.gen_range(0..4)).collect();
        assert!(cohen_kappa(&p, &t, 4, KappaWeighting::None).unwrap().abs() < 0.03);
    }

    #[test]
    fn los_bins() {
        let e = DEFAULT_LOS_BIN_EDGES_HOURS;
        assert_eq!(los_bin(0.0, &e), 0);
        assert_eq!(los_bin(23.9, &e), 0);
        assert_eq!(los_bin(24.0, &e), 1);
        assert_eq!(los_bin(200.0, &e), 8);
        assert_eq!(los_bin(400.0, &e), 9);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..12)
            .prop_flat_map(|n| (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(any::<bool>(), n)))
            .prop_filter("both classes", |(_, y)| y.iter().any(|&l| l) && y.iter().any(|&l| !l))
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance((s, y) in instance()) {
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auprc(&s, &y).unwrap(), auprc(&t, &y).unwrap());
            prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
        }

        #[test]
        fn negated_scores_complement_auroc((s, y) in instance()) {
            let mut sorted = s.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let a = auroc(&s, &y).unwrap();
            prop_assert!((auroc(&neg, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
            let flipped: Vec<bool> = y.iter().map(|l| !l).collect();
            prop_assert!((auroc(&neg, &flipped).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn metrics_lie_in_unit_interval((s, y) in instance()) {
            let ap = auprc(&s, &y).unwrap();
            let roc = auroc(&s, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!((0.0..=1.0).contains(&roc));
        }
    }
}
