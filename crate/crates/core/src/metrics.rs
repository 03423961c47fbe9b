//! Weighted classification metrics.
//!
//! The prediction rule everywhere is `score >= threshold`. Scores are ranked
//! once by [`RankedScores`]; every weighting of the same samples (IPW weights,
//! bootstrap multiplicities, adversarial perturbations) is then a linear sweep
//! producing a [`WeightedCurve`], from which ROC/PRC, areas, confusion counts
//! and matched thresholds are read off.

use serde::Serialize;

use crate::error::{degenerate, invalid_input, Result};
use crate::sum::NeumaierSum;

/// Slack when comparing an achieved rate against a target rate, so that a
/// target computed from the same weights by a different summation order still
/// matches exactly.
pub const MATCH_TOLERANCE: f64 = 1e-12;

/// One weighted binary observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
    pub weight: f64,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool, weight: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(invalid_input(format!("score must be finite, got {score}")));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(invalid_input(format!("weight must be positive, got {weight}")));
        }
        Ok(Self { score, label, weight })
    }
}

fn split_samples(samples: &[ScoredSample]) -> (Vec<f64>, Vec<bool>, Vec<f64>) {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut weights = Vec::with_capacity(samples.len());
    for s in samples {
        scores.push(s.score);
        labels.push(s.label);
        weights.push(s.weight);
    }
    (scores, labels, weights)
}

/// Samples sorted by descending score, with tied scores grouped.
#[derive(Debug, Clone)]
pub struct RankedScores {
    order: Vec<u32>,
    labels: Vec<bool>,
    group_starts: Vec<u32>,
    group_scores: Vec<f64>,
}

impl RankedScores {
    pub fn new(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(invalid_input("scores and labels differ in length"));
        }
        if scores.len() > u32::MAX as usize {
            return Err(invalid_input("too many samples"));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(invalid_input(format!("score must be finite, got {bad}")));
        }
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));
        let mut group_starts = Vec::new();
        let mut group_scores = Vec::new();
        for (pos, &idx) in order.iter().enumerate() {
            let s = scores[idx as usize];
            if group_scores.last() != Some(&s) {
                group_starts.push(pos as u32);
                group_scores.push(s);
            }
        }
        group_starts.push(order.len() as u32);
        Ok(Self {
            order,
            labels: labels.to_vec(),
            group_starts,
            group_scores,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Sweeps the ranking with per-sample weights (original order, `>= 0`).
    /// Score groups carrying zero total weight are dropped.
    pub fn curve(&self, weights: &[f64]) -> WeightedCurve {
        assert_eq!(weights.len(), self.order.len(), "weights must align with scores");
        let groups = self.group_scores.len();
        let mut curve = WeightedCurve {
            thresholds: Vec::with_capacity(groups),
            pos: Vec::with_capacity(groups),
            neg: Vec::with_capacity(groups),
            tp: Vec::with_capacity(groups),
            fp: Vec::with_capacity(groups),
        };
        let mut tp = NeumaierSum::new();
        let mut fp = NeumaierSum::new();
        for g in 0..groups {
            let mut pos = NeumaierSum::new();
            let mut neg = NeumaierSum::new();
            let (a, b) = (self.group_starts[g] as usize, self.group_starts[g + 1] as usize);
            for &idx in &self.order[a..b] {
                let w = weights[idx as usize];
                if w == 0.0 {
                    continue;
                }
                if self.labels[idx as usize] {
                    pos.add(w);
                } else {
                    neg.add(w);
                }
            }
            let (pos, neg) = (pos.value(), neg.value());
            if pos == 0.0 && neg == 0.0 {
                continue;
            }
            tp.add(pos);
            fp.add(neg);
            curve.thresholds.push(self.group_scores[g]);
            curve.pos.push(pos);
            curve.neg.push(neg);
            curve.tp.push(tp.value());
            curve.fp.push(fp.value());
        }
        curve
    }

    /// Curve with the given weights scaled per sample by `multiplicity`.
    pub fn curve_with_multiplicity(&self, weights: &[f64], multiplicity: &[u32]) -> WeightedCurve {
        let w: Vec<f64> = weights
            .iter()
            .zip(multiplicity)
            .map(|(w, m)| w * f64::from(*m))
            .collect();
        self.curve(&w)
    }
}

/// Cumulative weighted counts at each distinct threshold, highest first.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCurve {
    thresholds: Vec<f64>,
    pos: Vec<f64>,
    neg: Vec<f64>,
    tp: Vec<f64>,
    fp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// Descending; the first entry is `+inf` for the (0, 0) corner.
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// Descending.
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl WeightedCurve {
    pub fn from_samples(samples: &[ScoredSample]) -> Result<Self> {
        let (scores, labels, weights) = split_samples(samples);
        Ok(RankedScores::new(&scores, &labels)?.curve(&weights))
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn total_positive(&self) -> f64 {
        self.tp.last().copied().unwrap_or(0.0)
    }

    pub fn total_negative(&self) -> f64 {
        self.fp.last().copied().unwrap_or(0.0)
    }

    fn require_both_classes(&self) -> Result<(f64, f64)> {
        let (p, n) = (self.total_positive(), self.total_negative());
        if p <= 0.0 || n <= 0.0 {
            return Err(degenerate("need at least one positive and one negative"));
        }
        Ok((p, n))
    }

    fn require_positives(&self) -> Result<f64> {
        let p = self.total_positive();
        if p <= 0.0 {
            return Err(degenerate("no positive samples"));
        }
        Ok(p)
    }

    pub fn roc(&self) -> Result<RocCurve> {
        let (p, n) = self.require_both_classes()?;
        let mut roc = RocCurve {
            thresholds: vec![f64::INFINITY],
            tpr: vec![0.0],
            fpr: vec![0.0],
        };
        for k in 0..self.thresholds.len() {
            roc.thresholds.push(self.thresholds[k]);
            roc.tpr.push(self.tp[k] / p);
            roc.fpr.push(self.fp[k] / n);
        }
        Ok(roc)
    }

    /// Trapezoidal area under the ROC curve, accumulated group by group as
    /// the weighted concordance probability with ties counted one half.
    pub fn auc(&self) -> Result<f64> {
        let (p, n) = self.require_both_classes()?;
        let mut area = NeumaierSum::new();
        let mut tp_before = 0.0;
        for k in 0..self.thresholds.len() {
            if self.neg[k] > 0.0 {
                area.add(self.neg[k] * tp_before);
                area.add(0.5 * self.neg[k] * self.pos[k]);
            }
            tp_before = self.tp[k];
        }
        Ok(area.value() / p / n)
    }

    pub fn prc(&self) -> Result<PrCurve> {
        let p = self.require_positives()?;
        let mut prc = PrCurve {
            thresholds: Vec::with_capacity(self.thresholds.len()),
            precision: Vec::with_capacity(self.thresholds.len()),
            recall: Vec::with_capacity(self.thresholds.len()),
        };
        for k in 0..self.thresholds.len() {
            prc.thresholds.push(self.thresholds[k]);
            prc.precision.push(self.tp[k] / (self.tp[k] + self.fp[k]));
            prc.recall.push(self.tp[k] / p);
        }
        Ok(prc)
    }

    /// Step-interpolated area under the PR curve: `sum (R_k - R_{k-1}) P_k`.
    pub fn auprc(&self) -> Result<f64> {
        let p = self.require_positives()?;
        let mut area = NeumaierSum::new();
        for k in 0..self.thresholds.len() {
            if self.pos[k] > 0.0 {
                area.add(self.pos[k] * (self.tp[k] / (self.tp[k] + self.fp[k])));
            }
        }
        Ok(area.value() / p)
    }

    /// Number of leading groups predicted positive at `threshold`.
    fn flagged_groups(&self, threshold: f64) -> usize {
        self.thresholds.partition_point(|s| *s >= threshold)
    }

    pub fn confusion_at(&self, threshold: f64) -> Confusion {
        let k = self.flagged_groups(threshold);
        let (tp, fp) = if k == 0 { (0.0, 0.0) } else { (self.tp[k - 1], self.fp[k - 1]) };
        Confusion {
            tp,
            fp,
            tn: self.total_negative() - fp,
            fn_: self.total_positive() - tp,
        }
    }

    /// Largest threshold whose weighted TPR reaches `target`.
    pub fn threshold_at_tpr(&self, target: f64) -> Result<f64> {
        if !(target > 0.0 && target <= 1.0 + MATCH_TOLERANCE) {
            return Err(invalid_input(format!("target TPR must be in (0, 1], got {target}")));
        }
        let p = self.require_positives()?;
        let k = self
            .tp
            .iter()
            .position(|tp| tp / p >= target - MATCH_TOLERANCE)
            .expect("cumulative TPR reaches 1");
        Ok(self.thresholds[k])
    }

    /// Smallest threshold whose weighted TNR reaches `target`. A target of 1
    /// may require a threshold just above every score; a target of 0 returns
    /// the lowest score, which flags every sample.
    pub fn threshold_at_tnr(&self, target: f64) -> Result<f64> {
        if !(target >= 0.0 && target <= 1.0 + MATCH_TOLERANCE) {
            return Err(invalid_input(format!("target TNR must be in [0, 1], got {target}")));
        }
        let n = self.total_negative();
        if n <= 0.0 {
            return Err(degenerate("no negative samples"));
        }
        // TN at thresholds[k] is n - fp[k]; it shrinks as k grows.
        match (0..self.thresholds.len())
            .rev()
            .find(|&k| (n - self.fp[k]) / n >= target - MATCH_TOLERANCE)
        {
            Some(k) => Ok(self.thresholds[k]),
            None => Ok(self.thresholds[0].next_up()),
        }
    }
}

/// Trapezoidal AUC of weighted samples.
pub fn weighted_auc(samples: &[ScoredSample]) -> Result<f64> {
    WeightedCurve::from_samples(samples)?.auc()
}

pub fn weighted_roc(samples: &[ScoredSample]) -> Result<RocCurve> {
    WeightedCurve::from_samples(samples)?.roc()
}

pub fn weighted_prc(samples: &[ScoredSample]) -> Result<PrCurve> {
    WeightedCurve::from_samples(samples)?.prc()
}

pub fn auprc(samples: &[ScoredSample]) -> Result<f64> {
    WeightedCurve::from_samples(samples)?.auprc()
}

/// A sample scored over K mutually exclusive classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassSample {
    pub probabilities: Vec<f64>,
    pub class: usize,
    pub weight: f64,
}

/// Micro-averaged AUPRC: every (sample, class) pair becomes one binary sample
/// carrying the sample's weight.
pub fn micro_auprc(samples: &[MulticlassSample]) -> Result<f64> {
    let Some(first) = samples.first() else {
        return Err(invalid_input("no samples"));
    };
    let k = first.probabilities.len();
    let mut pooled = Vec::with_capacity(samples.len() * k);
    for s in samples {
        if s.probabilities.len() != k {
            return Err(invalid_input("samples disagree on the number of classes"));
        }
        if s.class >= k {
            return Err(invalid_input(format!("class {} out of range for {k} classes", s.class)));
        }
        let total: f64 = s.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid_input(format!("class scores sum to {total}, not 1")));
        }
        for (c, &p) in s.probabilities.iter().enumerate() {
            pooled.push(ScoredSample::new(p, c == s.class, s.weight)?);
        }
    }
    auprc(&pooled)
}

/// Weighted confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Confusion {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

/// Rates derived from a confusion table; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Rates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

impl Confusion {
    pub fn rates(&self) -> Rates {
        let Confusion { tp, fp, tn, fn_ } = *self;
        Rates {
            tpr: ratio(tp, tp + fn_),
            fpr: ratio(fp, fp + tn),
            tnr: ratio(tn, fp + tn),
            ppv: ratio(tp, tp + fp),
            npv: ratio(tn, tn + fn_),
            // harmonic mean of PPV and TPR, written so it stays defined when
            // there are no predicted positives but some missed positives
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        }
    }
}

/// Weighted confusion at `threshold`, by direct accumulation.
pub fn confusion_at(samples: &[ScoredSample], threshold: f64) -> Confusion {
    let mut acc = [NeumaierSum::new(); 4];
    for s in samples {
        let slot = match (s.score >= threshold, s.label) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        acc[slot].add(s.weight);
    }
    Confusion {
        tp: acc[0].value(),
        fp: acc[1].value(),
        tn: acc[2].value(),
        fn_: acc[3].value(),
    }
}

/// Confusion of fixed predictions under the given weights.
pub fn confusion_of_predictions(predictions: &[bool], labels: &[bool], weights: &[f64]) -> Confusion {
    let mut acc = [NeumaierSum::new(); 4];
    for ((&p, &l), &w) in predictions.iter().zip(labels).zip(weights) {
        let slot = match (p, l) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        acc[slot].add(w);
    }
    Confusion {
        tp: acc[0].value(),
        fp: acc[1].value(),
        tn: acc[2].value(),
        fn_: acc[3].value(),
    }
}

pub fn rates(confusion: &Confusion) -> Rates {
    confusion.rates()
}

/// `score >= level` for an ordinal score.
pub fn binarize_ordinal(levels: &[i32], level: i32) -> Vec<bool> {
    levels.iter().map(|&s| s >= level).collect()
}

pub fn threshold_at_tpr(samples: &[ScoredSample], target_tpr: f64) -> Result<f64> {
    WeightedCurve::from_samples(samples)?.threshold_at_tpr(target_tpr)
}

pub fn threshold_at_tnr(samples: &[ScoredSample], target_tnr: f64) -> Result<f64> {
    WeightedCurve::from_samples(samples)?.threshold_at_tnr(target_tnr)
}

/// One model's operating points matched to one ordinal level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedRow {
    pub model: String,
    pub level: i32,
    pub target_tpr: Option<f64>,
    /// Threshold matched to the baseline's TPR.
    pub threshold: Option<f64>,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub f1: Option<f64>,
    pub target_tnr: Option<f64>,
    /// Threshold matched to the baseline's TNR.
    pub threshold_tnr: Option<f64>,
    pub npv: Option<f64>,
    pub tnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub level: i32,
    pub target_tpr: Option<f64>,
    pub target_tnr: Option<f64>,
    pub rows: Vec<MatchedRow>,
}

/// Matched-threshold protocol on precomputed curves.
///
/// The baseline is binarized at each level; every model (the baseline
/// included) is then thresholded at its smallest achievable TPR (TNR) at or
/// above the baseline's, and its PPV (NPV) read off there.
pub fn matched_on_curves(
    models: &[(&str, &WeightedCurve)],
    baseline: &WeightedCurve,
    levels: &[i32],
) -> Vec<ThresholdReport> {
    levels
        .iter()
        .map(|&level| {
            let base = baseline.confusion_at(f64::from(level)).rates();
            let target_tpr = base.tpr.filter(|t| *t > 0.0);
            let target_tnr = base.tnr;
            let rows = models
                .iter()
                .map(|(name, curve)| {
                    let mut row = MatchedRow {
                        model: name.to_string(),
                        level,
                        target_tpr,
                        threshold: None,
                        ppv: None,
                        tpr: None,
                        f1: None,
                        target_tnr,
                        threshold_tnr: None,
                        npv: None,
                        tnr: None,
                    };
                    if let Some(t) = target_tpr.and_then(|t| curve.threshold_at_tpr(t).ok()) {
                        let r = curve.confusion_at(t).rates();
                        row.threshold = Some(t);
                        row.ppv = r.ppv;
                        row.tpr = r.tpr;
                        row.f1 = r.f1;
                    }
                    if let Some(t) = target_tnr.and_then(|t| curve.threshold_at_tnr(t).ok()) {
                        let r = curve.confusion_at(t).rates();
                        row.threshold_tnr = Some(t);
                        row.npv = r.npv;
                        row.tnr = r.tnr;
                    }
                    row
                })
                .collect();
            ThresholdReport {
                level,
                target_tpr,
                target_tnr,
                rows,
            }
        })
        .collect()
}

/// Matched-threshold comparison of named models against an ordinal baseline,
/// all scoring the same weighted encounters.
pub fn matched_comparison(
    models: &[(&str, &[f64])],
    baseline: &[f64],
    labels: &[bool],
    weights: &[f64],
    levels: &[i32],
) -> Result<Vec<ThresholdReport>> {
    let n = labels.len();
    if baseline.len() != n || weights.len() != n || models.iter().any(|(_, s)| s.len() != n) {
        return Err(invalid_input("all models must score the same encounters"));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(invalid_input("weights must be positive"));
    }
    let baseline_curve = RankedScores::new(baseline, labels)?.curve(weights);
    baseline_curve.require_both_classes()?;
    let curves = models
        .iter()
        .map(|(name, scores)| Ok((*name, RankedScores::new(scores, labels)?.curve(weights))))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &WeightedCurve)> = curves.iter().map(|(n, c)| (*n, c)).collect();
    Ok(matched_on_curves(&refs, &baseline_curve, levels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScreeningYield {
    pub untested_count: usize,
    pub flagged_untested_count: usize,
    pub expected_new_diagnoses: Option<f64>,
}

/// Untested encounters the model would flag, and the diagnoses expected among
/// them at the given PPV.
pub fn screening_yield(tested: &[bool], scores: &[f64], threshold: f64, ppv: Option<f64>) -> Result<ScreeningYield> {
    if tested.len() != scores.len() {
        return Err(invalid_input("tested flags and scores differ in length"));
    }
    let untested_count = tested.iter().filter(|t| !**t).count();
    let flagged_untested_count = tested
        .iter()
        .zip(scores)
        .filter(|(t, s)| !**t && **s >= threshold)
        .count();
    Ok(ScreeningYield {
        untested_count,
        flagged_untested_count,
        expected_new_diagnoses: ppv.map(|p| flagged_untested_count as f64 * p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cmp::Ordering;

    fn s(score: f64, label: bool, weight: f64) -> ScoredSample {
        ScoredSample::new(score, label, weight).unwrap()
    }

    /// Pairwise weighted concordance, ties one half.
    fn brute_auc(samples: &[ScoredSample]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for a in samples.iter().filter(|x| x.label) {
            for b in samples.iter().filter(|x| !x.label) {
                let w = a.weight * b.weight;
                den += w;
                num += w * match a.score.partial_cmp(&b.score).unwrap() {
                    Ordering::Greater => 1.0,
                    Ordering::Equal => 0.5,
                    Ordering::Less => 0.0,
                };
            }
        }
        num / den
    }

    /// Average precision by enumerating each positive's own threshold.
    fn brute_auprc(samples: &[ScoredSample]) -> f64 {
        let total_pos: f64 = samples.iter().filter(|x| x.label).map(|x| x.weight).sum();
        let mut ap = 0.0;
        for p in samples.iter().filter(|x| x.label) {
            let flagged: Vec<_> = samples.iter().filter(|x| x.score >= p.score).collect();
            let tp: f64 = flagged.iter().filter(|x| x.label).map(|x| x.weight).sum();
            let all: f64 = flagged.iter().map(|x| x.weight).sum();
            ap += p.weight * tp / all;
        }
        ap / total_pos
    }

    fn instance() -> impl Strategy<Value = Vec<ScoredSample>> {
        proptest::collection::vec((0u8..12, any::<bool>(), 0.05f64..5.0), 2..120).prop_map(|v| {
            v.into_iter()
                .map(|(sc, l, w)| s(f64::from(sc) / 4.0, l, w))
                .collect()
        })
    }

    #[test]
    fn separated_curve() {
        let samples = vec![s(0.9, true, 1.0), s(0.8, true, 1.0), s(0.2, false, 1.0), s(0.1, false, 1.0)];
        let roc = weighted_roc(&samples).unwrap();
        assert!(roc.tpr.iter().zip(&roc.fpr).any(|(t, f)| *t == 1.0 && *f == 0.0));
        assert_eq!(roc.tpr.first(), Some(&0.0));
        assert_eq!((*roc.tpr.last().unwrap(), *roc.fpr.last().unwrap()), (1.0, 1.0));
        assert_eq!(weighted_auc(&samples).unwrap(), 1.0);
        assert_eq!(auprc(&samples).unwrap(), 1.0);
    }

    #[test]
    fn constant_score() {
        let samples = vec![s(0.3, true, 1.0), s(0.3, false, 2.0), s(0.3, false, 1.0)];
        assert_eq!(weighted_auc(&samples).unwrap(), 0.5);
        assert!((auprc(&samples).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn three_sample_auc() {
        let samples = vec![s(0.9, true, 1.0), s(0.8, false, 1.0), s(0.7, true, 1.0)];
        assert_eq!(weighted_auc(&samples).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_degenerate() {
        let samples = vec![s(0.9, true, 1.0), s(0.8, true, 1.0)];
        assert!(matches!(weighted_auc(&samples), Err(crate::Error::DegenerateData(_))));
        let negatives = vec![s(0.9, false, 1.0)];
        assert!(matches!(auprc(&negatives), Err(crate::Error::DegenerateData(_))));
    }

    proptest! {
        #[test]
        fn auc_matches_concordance(samples in instance()) {
            prop_assume!(samples.iter().any(|x| x.label) && samples.iter().any(|x| !x.label));
            let auc = weighted_auc(&samples).unwrap();
            prop_assert!((auc - brute_auc(&samples)).abs() < 1e-12);
            // label flip symmetry
            let flipped: Vec<_> = samples.iter().map(|x| s(x.score, !x.label, x.weight)).collect();
            prop_assert!((weighted_auc(&flipped).unwrap() - (1.0 - auc)).abs() < 1e-12);
        }

        #[test]
        fn auprc_matches_enumeration(samples in instance()) {
            prop_assume!(samples.iter().any(|x| x.label));
            prop_assert!((auprc(&samples).unwrap() - brute_auprc(&samples)).abs() < 1e-12);
        }

        #[test]
        fn weight_scale_and_monotone_transform_invariance(samples in instance(), scale in 0.01f64..100.0) {
            prop_assume!(samples.iter().any(|x| x.label) && samples.iter().any(|x| !x.label));
            let scaled: Vec<_> = samples.iter().map(|x| s(x.score, x.label, x.weight * scale)).collect();
            let warped: Vec<_> = samples.iter().map(|x| s((3.0 * x.score).exp() - 7.0, x.label, x.weight)).collect();
            let auc = weighted_auc(&samples).unwrap();
            let ap = auprc(&samples).unwrap();
            prop_assert!((weighted_auc(&scaled).unwrap() - auc).abs() < 1e-12);
            prop_assert!((auprc(&scaled).unwrap() - ap).abs() < 1e-12);
            prop_assert!((weighted_auc(&warped).unwrap() - auc).abs() < 1e-12);
            prop_assert!((auprc(&warped).unwrap() - ap).abs() < 1e-12);
            let t = threshold_at_tpr(&samples, 0.5).unwrap();
            let tw = threshold_at_tpr(&warped, 0.5).unwrap();
            prop_assert_eq!(tw, (3.0 * t).exp() - 7.0);
        }

        #[test]
        fn rates_monotone_in_threshold(samples in instance(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (rl, rh) = (confusion_at(&samples, lo).rates(), confusion_at(&samples, hi).rates());
            if let (Some(x), Some(y)) = (rl.tpr, rh.tpr) { prop_assert!(y <= x + 1e-15); }
            if let (Some(x), Some(y)) = (rl.tnr, rh.tnr) { prop_assert!(y + 1e-15 >= x); }
        }

        #[test]
        fn curve_confusion_matches_direct(samples in instance(), t in 0.0f64..3.0) {
            let curve = WeightedCurve::from_samples(&samples).unwrap();
            let (a, b) = (curve.confusion_at(t), confusion_at(&samples, t));
            prop_assert!((a.tp - b.tp).abs() < 1e-9 && (a.fp - b.fp).abs() < 1e-9);
            prop_assert!((a.tn - b.tn).abs() < 1e-9 && (a.fn_ - b.fn_).abs() < 1e-9);
        }

        #[test]
        fn multiplicity_equals_materialized(samples in instance(), counts in proptest::collection::vec(0u32..4, 120)) {
            let counts = &counts[..samples.len()];
            prop_assume!(counts.iter().any(|c| *c > 0));
            let (scores, labels, weights) = split_samples(&samples);
            let via_counts = RankedScores::new(&scores, &labels).unwrap().curve_with_multiplicity(&weights, counts);
            let materialized: Vec<_> = samples.iter().zip(counts)
                .flat_map(|(x, c)| std::iter::repeat_n(*x, *c as usize)).collect();
            let direct = WeightedCurve::from_samples(&materialized).unwrap();
            prop_assert_eq!(via_counts.thresholds(), direct.thresholds());
            if let (Ok(a), Ok(b)) = (via_counts.auc(), direct.auc()) { prop_assert!((a - b).abs() < 1e-12); }
        }

        #[test]
        fn tnr_duality(samples in instance(), target in 0.01f64..1.0) {
            prop_assume!(samples.iter().any(|x| !x.label));
            let curve = WeightedCurve::from_samples(&samples).unwrap();
            let t = curve.threshold_at_tnr(target).unwrap();
            let achieved = curve.confusion_at(t).rates().tnr.unwrap();
            let dual: Vec<_> = samples.iter().map(|x| s(-x.score, !x.label, x.weight)).collect();
            let dual_curve = WeightedCurve::from_samples(&dual).unwrap();
            let td = dual_curve.threshold_at_tpr(target).unwrap();
            let dual_achieved = dual_curve.confusion_at(td).rates().tpr.unwrap();
            prop_assert!((achieved - dual_achieved).abs() < 1e-12);
            prop_assert!(achieved >= target - 1e-12);
        }
    }

    #[test]
    fn confusion_rates() {
        let c = Confusion { tp: 1.0, fp: 1.0, tn: 0.0, fn_: 1.0 };
        let r = c.rates();
        assert_eq!((r.ppv, r.tpr, r.f1), (Some(0.5), Some(0.5), Some(0.5)));
        assert_eq!(r.tnr, Some(0.0));
        assert_eq!(Confusion::default().rates(), Rates::default());

        let samples = vec![s(0.9, true, 2.0), s(0.1, true, 1.0), s(0.5, false, 1.0)];
        let r = confusion_at(&samples, 0.5).rates();
        assert!((r.tpr.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let all = confusion_at(&samples, -1.0).rates();
        assert_eq!((all.tpr, all.tnr), (Some(1.0), Some(0.0)));
        // no predicted positives: PPV undefined, never reported as 0
        let none = confusion_at(&samples, 2.0).rates();
        assert_eq!(none.ppv, None);
        assert_eq!(none.f1, Some(0.0));
    }

    #[test]
    fn ordinal_binarization() {
        assert_eq!(binarize_ordinal(&[5, 4, 7, 1], 5), vec![true, false, true, false]);
        assert!(binarize_ordinal(&[1, 2, 7], 1).iter().all(|b| *b));
        let scores = [1, 2, 3, 4, 5, 6, 7, 3, 5];
        for level in 1..7 {
            let hi = binarize_ordinal(&scores, level + 1);
            let lo = binarize_ordinal(&scores, level);
            assert!(hi.iter().zip(&lo).all(|(h, l)| !*h || *l));
        }
    }

    #[test]
    fn tpr_threshold_enumeration() {
        let samples = vec![s(0.9, true, 1.0), s(0.8, true, 1.0), s(0.7, true, 1.0), s(0.85, false, 1.0)];
        assert_eq!(threshold_at_tpr(&samples, 0.66).unwrap(), 0.8);
        assert_eq!(threshold_at_tpr(&samples, 1.0).unwrap(), 0.7);
        assert_eq!(threshold_at_tpr(&samples, 2.0 / 3.0).unwrap(), 0.8);
        assert_eq!(threshold_at_tpr(&samples, 1.0 / 3.0).unwrap(), 0.9);
        assert!(matches!(threshold_at_tpr(&samples, 1.5), Err(crate::Error::InvalidInput(_))));
        assert!(threshold_at_tpr(&samples, 0.0).is_err());
    }

    #[test]
    fn tnr_threshold_enumeration() {
        let samples = vec![s(0.1, false, 1.0), s(0.2, false, 1.0), s(0.3, false, 1.0), s(0.25, true, 1.0)];
        // both 0.3 and 0.25 leave TNR at 2/3; the smaller one wins
        assert_eq!(threshold_at_tnr(&samples, 0.66).unwrap(), 0.25);
        assert_eq!(threshold_at_tnr(&samples, 2.0 / 3.0).unwrap(), 0.25);
        // TNR 1 needs a threshold above the top negative
        let t1 = threshold_at_tnr(&samples, 1.0).unwrap();
        assert!(t1 > 0.3 && confusion_at(&samples, t1).rates().tnr == Some(1.0));
        // TNR 0: everything flagged, as with a threshold below all scores
        let t0 = threshold_at_tnr(&samples, 0.0).unwrap();
        assert_eq!(confusion_at(&samples, t0), confusion_at(&samples, f64::NEG_INFINITY));
    }

    #[test]
    fn micro_auprc_cases() {
        let one_hot: Vec<_> = (0..8)
            .map(|i| {
                let mut p = vec![0.0; 4];
                p[i % 4] = 1.0;
                MulticlassSample { probabilities: p, class: i % 4, weight: 1.0 + i as f64 }
            })
            .collect();
        assert_eq!(micro_auprc(&one_hot).unwrap(), 1.0);

        let uniform: Vec<_> = (0..8)
            .map(|i| MulticlassSample { probabilities: vec![0.25; 4], class: i % 3, weight: 1.0 })
            .collect();
        assert!((micro_auprc(&uniform).unwrap() - 0.25).abs() < 1e-15);

        let bad = vec![MulticlassSample { probabilities: vec![0.5, 0.4], class: 0, weight: 1.0 }];
        assert!(matches!(micro_auprc(&bad), Err(crate::Error::InvalidInput(_))));

        // a single binary framing reduces to plain AUPRC of the class-of-interest score
        let binary = vec![s(0.8, true, 1.0), s(0.6, false, 2.0), s(0.3, true, 1.0)];
        let framed: Vec<_> = binary
            .iter()
            .map(|x| MulticlassSample { probabilities: vec![x.score], class: if x.label { 0 } else { 1 }, weight: x.weight })
            .collect();
        // class index 1 is out of range for K=1: reduction only applies to positives vs rest
        assert!(micro_auprc(&framed).is_err());
        let framed2: Vec<_> = binary
            .iter()
            .map(|x| MulticlassSample {
                probabilities: vec![x.score, 1.0 - x.score],
                class: if x.label { 0 } else { 1 },
                weight: x.weight,
            })
            .collect();
        let pooled: Vec<_> = binary
            .iter()
            .flat_map(|x| [s(x.score, x.label, x.weight), s(1.0 - x.score, !x.label, x.weight)])
            .collect();
        assert!((micro_auprc(&framed2).unwrap() - auprc(&pooled).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn matched_identical_model_matches_baseline() {
        let levels: Vec<f64> = [1, 3, 5, 7, 2, 6, 4, 5, 3, 1, 7, 6].iter().map(|&x| f64::from(x)).collect();
        let labels = [false, false, true, true, false, true, false, true, false, false, true, false];
        let weights = [1.0, 2.0, 1.5, 1.0, 0.5, 1.0, 3.0, 1.0, 1.0, 2.0, 1.0, 1.0];
        let reports =
            matched_comparison(&[("copy", &levels), ("ada", &levels)], &levels, &labels, &weights, &[1, 2, 3, 4, 5, 6, 7])
                .unwrap();
        for rep in &reports {
            let (a, b) = (&rep.rows[0], &rep.rows[1]);
            assert_eq!((a.ppv, a.npv, a.threshold), (b.ppv, b.npv, b.threshold));
            if rep.target_tpr.is_some() {
                // the baseline matched to itself never lands below its own level
                assert!(b.threshold.unwrap() >= f64::from(rep.level));
                assert_eq!(a.tpr, rep.target_tpr);
            }
        }
        let r5 = &reports[4];
        let direct = confusion_at(
            &levels.iter().zip(&labels).zip(&weights).map(|((&sc, &l), &w)| s(sc, l, w)).collect::<Vec<_>>(),
            5.0,
        )
        .rates();
        assert_eq!(r5.target_tpr, direct.tpr);
    }

    #[test]
    fn matched_level_without_flagged_positives() {
        let base = [1.0, 1.0, 2.0, 1.0];
        let labels = [true, false, false, true];
        let reports = matched_comparison(&[("m", &[0.1, 0.2, 0.3, 0.4])], &base, &labels, &[1.0; 4], &[2, 7]).unwrap();
        for rep in reports {
            assert_eq!(rep.target_tpr, None);
            assert_eq!(rep.rows[0].ppv, None);
            assert_eq!(rep.rows[0].threshold, None);
        }
    }

    #[test]
    fn screening_yield_cases() {
        assert_eq!(
            screening_yield(&[true, true], &[0.9, 0.1], 0.5, Some(0.3)).unwrap(),
            ScreeningYield { untested_count: 0, flagged_untested_count: 0, expected_new_diagnoses: Some(0.0) }
        );
        let y = screening_yield(&[false, false, true], &[0.9, 0.1, 0.8], 0.5, Some(0.0)).unwrap();
        assert_eq!((y.untested_count, y.flagged_untested_count, y.expected_new_diagnoses), (2, 1, Some(0.0)));

        let flagged = 36_355;
        let tested = vec![false; flagged];
        let scores = vec![1.0; flagged];
        let y = screening_yield(&tested, &scores, 0.5, Some(0.148)).unwrap();
        assert!((y.expected_new_diagnoses.unwrap() - 5380.0).abs() < 1.0);
    }
}
