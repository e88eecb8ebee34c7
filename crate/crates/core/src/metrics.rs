//! Evaluation metrics: accuracy, ROC/AUC, and equal error rate.
//!
//! Scores are the model's fake-class probabilities; label 1 means fake (the
//! positive class). AUC is computed by a threshold-sweep trapezoid over tie
//! groups with integer numerators, which makes it agree bit-for-bit with the
//! brute-force pairwise statistic `P(s+ > s-) + 0.5 P(tie)`.

use crate::error::{Error, Result};

/// Scored samples: `(fake-class probability, binary label)`.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    scores: Vec<(f64, u8)>,
}

impl ScoreSet {
    pub fn new(scores: Vec<(f64, u8)>) -> Result<Self> {
        if let Some((i, _)) = scores.iter().enumerate().find(|(_, (s, _))| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite score at index {i}")));
        }
        if let Some((i, (_, l))) = scores.iter().enumerate().find(|(_, (_, l))| *l > 1) {
            return Err(Error::Data(format!("label {l} at index {i} is not binary")));
        }
        Ok(ScoreSet { scores })
    }

    /// Parses `score,label` lines. A leading `score,label` header is
    /// allowed.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut scores = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.eq_ignore_ascii_case("score,label")) {
                continue;
            }
            let mut parts = line.split(',');
            let (Some(s), Some(l), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Data(format!(
                    "line {}: expected 2 columns (score,label)",
                    lineno + 1
                )));
            };
            let score: f64 = s.trim().parse().map_err(|_| {
                Error::Data(format!("line {}: bad score {s:?}", lineno + 1))
            })?;
            let label: u8 = l.trim().parse().map_err(|_| {
                Error::Data(format!("line {}: bad label {l:?}", lineno + 1))
            })?;
            scores.push((score, label));
        }
        Self::new(scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.scores.iter().filter(|(_, l)| *l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.scores.len() - self.positives()
    }

    pub fn scores(&self) -> &[(f64, u8)] {
        &self.scores
    }

    fn require_both_classes(&self, what: &str) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::Usage(format!(
                "{what} requires at least one positive and one negative sample"
            )));
        }
        Ok(())
    }
}

/// Fraction of samples where `(score >= threshold)` agrees with the label.
pub fn accuracy(set: &ScoreSet, threshold: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Usage("accuracy of an empty score set".into()));
    }
    let correct = set
        .scores
        .iter()
        .filter(|(s, l)| (*s >= threshold) == (*l == 1))
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Area under the ROC curve via a threshold sweep over tie groups.
///
/// The trapezoid numerator is accumulated in integers, so the result equals
/// the pairwise Mann-Whitney statistic exactly.
pub fn auc(set: &ScoreSet) -> Result<f64> {
    set.require_both_classes("AUC")?;
    let mut sorted = set.scores.clone();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let pos = set.positives() as u64;
    let neg = set.negatives() as u64;

    let mut numerator: u64 = 0; // 2 * P * N * area
    let mut tp_before: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        let mut p_group: u64 = 0;
        let mut n_group: u64 = 0;
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 == 1 {
                p_group += 1;
            } else {
                n_group += 1;
            }
            i += 1;
        }
        // Trapezoid across the tie group: FP advances by n, TP by p.
        numerator += n_group * (2 * tp_before + p_group);
        tp_before += p_group;
    }
    Ok(numerator as f64 / (2 * pos * neg) as f64)
}

/// One sweep point of the ROC trade-off.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR at every candidate threshold (the sorted unique scores plus a
/// sentinel above the maximum). FAR falls and FRR rises monotonically with
/// the threshold.
pub fn roc_points(set: &ScoreSet) -> Result<Vec<RocPoint>> {
    set.require_both_classes("ROC")?;
    let mut thresholds: Vec<f64> = set.scores.iter().map(|(s, _)| *s).collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    let last = *thresholds.last().expect("nonempty");
    thresholds.push(last + 1.0);

    let pos = set.positives() as f64;
    let neg = set.negatives() as f64;
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let far = set
                .scores
                .iter()
                .filter(|(s, l)| *l == 0 && *s >= t)
                .count() as f64
                / neg;
            let frr = set
                .scores
                .iter()
                .filter(|(s, l)| *l == 1 && *s < t)
                .count() as f64
                / pos;
            RocPoint {
                threshold: t,
                far,
                frr,
            }
        })
        .collect())
}

/// Equal error rate: the crossing of FAR and FRR, linearly interpolated
/// between the two adjacent sweep points where `FAR - FRR` changes sign.
/// Returns `(eer, threshold)`.
pub fn eer(set: &ScoreSet) -> Result<(f64, f64)> {
    let points = roc_points(set)?;
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let da = a.far - a.frr;
        let db = b.far - b.frr;
        if da == 0.0 {
            return Ok((a.far, a.threshold));
        }
        if da > 0.0 && db < 0.0 {
            let lambda = da / (da - db);
            let eer = a.far + lambda * (b.far - a.far);
            let threshold = a.threshold + lambda * (b.threshold - a.threshold);
            return Ok((eer, threshold));
        }
    }
    let last = points.last().expect("nonempty sweep");
    Ok((last.far.max(last.frr).min(1.0), last.threshold))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub positives: usize,
    pub negatives: usize,
    pub roc: Vec<RocPoint>,
}

/// Full report: ACC at threshold 0.5, AUC, EER, and the ROC sweep.
pub fn evaluate(set: &ScoreSet) -> Result<EvalReport> {
    let acc = accuracy(set, 0.5)?;
    let auc_value = auc(set)?;
    let (eer_value, eer_threshold) = eer(set)?;
    Ok(EvalReport {
        acc,
        auc: auc_value,
        eer: eer_value,
        eer_threshold,
        positives: set.positives(),
        negatives: set.negatives(),
        roc: roc_points(set)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::auc_pairwise;
    use rand::Rng;

    fn set(scores: &[(f64, u8)]) -> ScoreSet {
        ScoreSet::new(scores.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_hand_cases() {
        let s = set(&[(0.9, 1), (0.1, 0), (0.8, 1)]);
        assert_eq!(accuracy(&s, 0.5).unwrap(), 1.0);
        let s = set(&[(0.4, 1), (0.6, 0)]);
        assert_eq!(accuracy(&s, 0.5).unwrap(), 0.0);
        assert!(matches!(
            accuracy(&ScoreSet::new(vec![]).unwrap(), 0.5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn accuracy_matches_count_oracle_on_random_set() {
        let mut rng = crate::rng::substream(2024, "acc-fuzz");
        let scores: Vec<(f64, u8)> = (0..1000)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0..2) as u8))
            .collect();
        let s = ScoreSet::new(scores.clone()).unwrap();
        let direct = scores
            .iter()
            .filter(|(sc, l)| (*sc >= 0.5) == (*l == 1))
            .count() as f64
            / 1000.0;
        assert_eq!(accuracy(&s, 0.5).unwrap(), direct);
    }

    #[test]
    fn auc_hand_cases() {
        let perfect = set(&[(0.9, 1), (0.8, 1), (0.1, 0), (0.2, 0)]);
        assert_eq!(auc(&perfect).unwrap(), 1.0);
        // 3 of 4 pairs correctly ordered.
        let mixed = set(&[(0.8, 1), (0.4, 1), (0.6, 0), (0.2, 0)]);
        assert_eq!(auc(&mixed).unwrap(), 0.75);
        let ties = set(&[(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)]);
        assert_eq!(auc(&ties).unwrap(), 0.5);
        assert!(matches!(
            auc(&set(&[(0.5, 1), (0.9, 1)])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn auc_sweep_equals_pairwise_exactly_on_fuzzed_sets() {
        let mut rng = crate::rng::substream(5150, "auc-fuzz");
        for case in 0..120 {
            let n = rng.gen_range(2..=1000);
            // Quantized scores force plenty of ties.
            let scores: Vec<(f64, u8)> = (0..n)
                .map(|_| {
                    (
                        (rng.gen_range(0.0..1.0) * 20.0).round() / 20.0,
                        rng.gen_range(0..2) as u8,
                    )
                })
                .collect();
            let s = match ScoreSet::new(scores.clone()) {
                Ok(s) if s.positives() > 0 && s.negatives() > 0 => s,
                _ => continue,
            };
            let sweep = auc(&s).unwrap();
            let brute = auc_pairwise(&scores);
            assert_eq!(sweep.to_bits(), brute.to_bits(), "case {case}");
        }
    }

    #[test]
    fn eer_hand_cases() {
        let perfect = set(&[(0.9, 1), (0.8, 1), (0.1, 0), (0.2, 0)]);
        assert_eq!(eer(&perfect).unwrap().0, 0.0);

        // The 4-point step functions cross where FAR = FRR = 1/2.
        let mixed = set(&[(0.8, 1), (0.4, 1), (0.6, 0), (0.2, 0)]);
        let (e, t) = eer(&mixed).unwrap();
        assert_eq!(e, 0.5);
        assert_eq!(t, 0.6);
    }

    #[test]
    fn eer_invariant_under_score_and_label_inversion() {
        let s = set(&[(0.8, 1), (0.4, 1), (0.6, 0), (0.2, 0), (0.55, 1)]);
        let (e1, _) = eer(&s).unwrap();
        let inverted: Vec<(f64, u8)> = s
            .scores()
            .iter()
            .map(|(sc, l)| (-sc, 1 - l))
            .collect();
        let (e2, _) = eer(&ScoreSet::new(inverted).unwrap()).unwrap();
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn monotone_transforms_leave_auc_and_eer_unchanged() {
        let mut rng = crate::rng::substream(33, "monotone");
        for _ in 0..30 {
            let n = rng.gen_range(4..200);
            let mut scores: Vec<(f64, u8)> = (0..n)
                .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(0..2) as u8))
                .collect();
            scores[0].1 = 1;
            scores[1].1 = 0;
            let s = ScoreSet::new(scores.clone()).unwrap();
            // Strictly increasing map.
            let mapped: Vec<(f64, u8)> = scores
                .iter()
                .map(|(sc, l)| (sc.powi(3) + 2.0 * sc + 1.0, *l))
                .collect();
            let m = ScoreSet::new(mapped).unwrap();
            assert_eq!(auc(&s).unwrap(), auc(&m).unwrap());
            assert!((eer(&s).unwrap().0 - eer(&m).unwrap().0).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_of_negated_scores_complements() {
        let mut rng = crate::rng::substream(44, "negate");
        for _ in 0..30 {
            let n = rng.gen_range(4..300);
            // Tie-free: distinct scores by construction.
            let mut scores: Vec<(f64, u8)> = (0..n)
                .map(|i| (i as f64 + rng.gen_range(0.0..0.5), rng.gen_range(0..2) as u8))
                .collect();
            scores[0].1 = 1;
            scores[1].1 = 0;
            let s = ScoreSet::new(scores.clone()).unwrap();
            let negated: Vec<(f64, u8)> = scores.iter().map(|(sc, l)| (-sc, *l)).collect();
            let ns = ScoreSet::new(negated).unwrap();
            assert!((auc(&s).unwrap() + auc(&ns).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eer_bounded_by_minimax_plus_slack() {
        let mut rng = crate::rng::substream(55, "eer-bound");
        for _ in 0..30 {
            let n = rng.gen_range(4..200);
            let mut scores: Vec<(f64, u8)> = (0..n)
                .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0..2) as u8))
                .collect();
            scores[0].1 = 1;
            scores[1].1 = 0;
            let s = ScoreSet::new(scores).unwrap();
            let points = roc_points(&s).unwrap();
            let minimax = points
                .iter()
                .map(|p| p.far.max(p.frr))
                .fold(f64::INFINITY, f64::min);
            let (e, _) = eer(&s).unwrap();
            assert!(
                e <= minimax + 1.0 / s.len() as f64 + 1e-12,
                "eer {e} vs minimax {minimax}"
            );
        }
    }

    #[test]
    fn roc_points_monotone_in_threshold() {
        let s = set(&[(0.8, 1), (0.4, 1), (0.6, 0), (0.2, 0), (0.5, 1), (0.3, 0)]);
        let points = roc_points(&s).unwrap();
        for pair in points.windows(2) {
            assert!(pair[0].threshold < pair[1].threshold);
            assert!(pair[0].far >= pair[1].far, "FAR non-increasing");
            assert!(pair[0].frr <= pair[1].frr, "FRR non-decreasing");
        }
    }

    #[test]
    fn csv_parsing_errors_carry_line_numbers() {
        let ok = ScoreSet::from_csv("score,label\n0.7,1\n0.2,0\n").unwrap();
        assert_eq!(ok.len(), 2);
        let err = ScoreSet::from_csv("0.7,1\nnope,0\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ScoreSet::from_csv("0.7,1,extra\n").unwrap_err();
        assert!(err.to_string().contains("2 columns"), "{err}");
        let err = ScoreSet::from_csv("0.7,3\n").unwrap_err();
        assert!(err.to_string().contains("not binary"), "{err}");
    }
}
