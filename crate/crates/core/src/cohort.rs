//! Encounters, HbA1c outcome classes and cohort construction.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::rng::unit_hash;

/// HbA1c threshold (percent) at and above which an encounter counts as diabetic.
pub const DIABETES_THRESHOLD: f64 = 6.5;

/// Four-way discretization of HbA1c, in increasing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HbA1cClass {
    /// < 5.7%
    Lt57,
    /// [5.7%, 6.5%)
    B57to64,
    /// [6.5%, 8.0%)
    B65to79,
    /// >= 8.0%
    Ge80,
}

impl HbA1cClass {
    pub const ALL: [HbA1cClass; 4] = [Self::Lt57, Self::B57to64, Self::B65to79, Self::Ge80];

    pub fn index(self) -> usize {
        self as usize
    }

    /// True for the two classes at or above the diabetes threshold.
    pub fn is_diabetic(self) -> bool {
        self >= Self::B65to79
    }
}

impl fmt::Display for HbA1cClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Lt57 => "<5.7",
            Self::B57to64 => "5.7-6.4",
            Self::B65to79 => "6.5-7.9",
            Self::Ge80 => ">=8.0",
        };
        f.write_str(s)
    }
}

/// Bins an HbA1c percentage. Bins are closed on the left.
pub fn bin_hba1c(value: f64) -> Result<HbA1cClass> {
    if !value.is_finite() || value <= 0.0 {
        return Err(invalid_input(format!("HbA1c must be positive and finite, got {value}")));
    }
    Ok(if value < 5.7 {
        HbA1cClass::Lt57
    } else if value < DIABETES_THRESHOLD {
        HbA1cClass::B57to64
    } else if value < 8.0 {
        HbA1cClass::B65to79
    } else {
        HbA1cClass::Ge80
    })
}

/// One outpatient visit.
///
/// Covariates are a dense vector aligned with the owning [`Cohort`]'s
/// `covariate_names`; a missing value is stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Encounter {
    pub patient_id: String,
    pub encounter_id: String,
    /// Days since the Unix epoch.
    pub timestamp: i64,
    pub age: f64,
    pub covariates: Vec<f64>,
    pub outcome_hba1c: Option<f64>,
    pub outcome_class: Option<HbA1cClass>,
    pub measured: bool,
    pub scores: BTreeMap<String, f64>,
    pub prior_diabetes: bool,
    /// Days from the encounter to onset or censoring.
    pub time_to_event: Option<f64>,
    pub event: Option<bool>,
}

impl Encounter {
    /// Sets the continuous outcome and its class together.
    pub fn set_outcome(&mut self, hba1c: Option<f64>) -> Result<()> {
        self.outcome_class = hba1c.map(bin_hba1c).transpose()?;
        self.outcome_hba1c = hba1c;
        Ok(())
    }

    /// Binary new-onset label, when the outcome is known.
    pub fn is_positive(&self) -> Option<bool> {
        self.outcome_class.map(HbA1cClass::is_diabetic)
    }

    pub fn score(&self, model: &str) -> Option<f64> {
        self.scores.get(model).copied()
    }

    /// Checks the observed-view invariants.
    pub fn validate(&self) -> Result<()> {
        let id = &self.encounter_id;
        if !(self.age >= 0.0) {
            return Err(invalid_input(format!("encounter {id}: negative or missing age")));
        }
        if let Some(t) = self.time_to_event {
            if !(t >= 0.0) {
                return Err(invalid_input(format!("encounter {id}: negative time_to_event")));
            }
        }
        match (self.outcome_hba1c, self.outcome_class) {
            (Some(v), Some(c)) if bin_hba1c(v)? == c => {}
            (None, None) => {}
            _ => {
                return Err(invalid_input(format!(
                    "encounter {id}: outcome class inconsistent with HbA1c"
                )))
            }
        }
        if self.measured != self.outcome_hba1c.is_some() {
            return Err(invalid_input(format!(
                "encounter {id}: measured flag disagrees with outcome presence"
            )));
        }
        Ok(())
    }
}

/// A set of encounters sharing one covariate and score layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub covariate_names: Vec<String>,
    pub score_names: Vec<String>,
    pub encounters: Vec<Encounter>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.encounters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encounters.is_empty()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Same layout, different encounters.
    pub fn with_encounters(&self, encounters: Vec<Encounter>) -> Cohort {
        Cohort {
            covariate_names: self.covariate_names.clone(),
            score_names: self.score_names.clone(),
            encounters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Default)]
pub struct CohortSplits {
    pub train: Vec<Encounter>,
    pub validation: Vec<Encounter>,
    pub test: Vec<Encounter>,
    pub assignment: BTreeMap<String, SplitLabel>,
}

/// Assigns each patient to a split with probability proportional to `ratios`.
///
/// One ratio puts everyone in train, two give train/test, three give
/// train/validation/test. The 4:1 outpatient split followed by a 3:1
/// train/validation split is `[3, 1, 1]`.
///
/// Assignment hashes `(seed, patient_id)`, so a patient keeps its split when
/// other patients are added to the dataset.
pub fn split_by_patient(encounters: &[Encounter], ratios: &[f64], seed: u64) -> Result<CohortSplits> {
    let labels: &[SplitLabel] = match ratios.len() {
        1 => &[SplitLabel::Train],
        2 => &[SplitLabel::Train, SplitLabel::Test],
        3 => &[SplitLabel::Train, SplitLabel::Validation, SplitLabel::Test],
        n => return Err(invalid_input(format!("expected 1 to 3 split ratios, got {n}"))),
    };
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(invalid_input("split ratios must be finite and nonnegative"));
    }
    let total: f64 = ratios.iter().sum();
    if total <= 0.0 {
        return Err(invalid_input("split ratios must sum to a positive value"));
    }
    let mut cumulative = Vec::with_capacity(ratios.len());
    let mut acc = 0.0;
    for r in ratios {
        acc += r / total;
        cumulative.push(acc);
    }
    let last_nonzero = ratios.iter().rposition(|r| *r > 0.0).unwrap_or(0);

    let mut splits = CohortSplits::default();
    for enc in encounters {
        let label = *splits.assignment.entry(enc.patient_id.clone()).or_insert_with(|| {
            let u = unit_hash(seed, &enc.patient_id);
            // zero-width buckets are never the first cumulative bound above u;
            // rounding can leave the last bound just below 1
            let k = cumulative
                .iter()
                .position(|c| u < *c)
                .unwrap_or(last_nonzero);
            labels[k]
        });
        match label {
            SplitLabel::Train => splits.train.push(enc.clone()),
            SplitLabel::Validation => splits.validation.push(enc.clone()),
            SplitLabel::Test => splits.test.push(enc.clone()),
        }
    }
    Ok(splits)
}

/// Encounter annotated with when (if ever) an ECG and an HbA1c were taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedEncounter {
    pub encounter: Encounter,
    pub ecg_time: Option<i64>,
    pub hba1c_time: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedMeasurement {
    /// The encounter carrying the selected HbA1c.
    pub encounter: Encounter,
    pub ecg_encounter_id: String,
    pub hba1c_time: i64,
    pub ecg_time: i64,
}

impl PairedMeasurement {
    pub fn gap_days(&self) -> i64 {
        (self.ecg_time - self.hba1c_time).abs()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExclusionReport {
    /// Patients with an HbA1c but no ECG.
    pub missing_ecg: usize,
    /// Patients with an ECG but no HbA1c.
    pub missing_hba1c: usize,
}

/// Pairs each patient's earliest HbA1c with the closest ECG in time.
///
/// Equidistant ECGs resolve to the earlier one; remaining ties go to input
/// order. Output is ordered by patient id.
pub fn pair_measurements(records: &[AnnotatedEncounter]) -> (Vec<PairedMeasurement>, ExclusionReport) {
    let mut by_patient: BTreeMap<&str, Vec<&AnnotatedEncounter>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.encounter.patient_id.as_str()).or_default().push(r);
    }

    let mut paired = Vec::new();
    let mut report = ExclusionReport::default();
    for group in by_patient.values() {
        let hba1c = group
            .iter()
            .filter_map(|r| r.hba1c_time.map(|t| (t, *r)))
            .min_by_key(|(t, _)| *t);
        let has_ecg = group.iter().any(|r| r.ecg_time.is_some());
        let Some((h_time, h_rec)) = hba1c else {
            if has_ecg {
                report.missing_hba1c += 1;
            }
            continue;
        };
        let ecg = group
            .iter()
            .filter_map(|r| r.ecg_time.map(|t| (t, *r)))
            .min_by_key(|(t, _)| ((t - h_time).abs(), *t));
        let Some((e_time, e_rec)) = ecg else {
            report.missing_ecg += 1;
            continue;
        };
        paired.push(PairedMeasurement {
            encounter: h_rec.encounter.clone(),
            ecg_encounter_id: e_rec.encounter.encounter_id.clone(),
            hba1c_time: h_time,
            ecg_time: e_time,
        });
    }
    (paired, report)
}

/// Prior-diabetes flag from a patient's history: a recorded diagnosis or any
/// earlier HbA1c at or above the diabetes threshold.
pub fn prior_diabetes_from_history(diagnosed: bool, prior_hba1c: &[f64]) -> bool {
    diagnosed || prior_hba1c.iter().any(|v| *v >= DIABETES_THRESHOLD)
}

/// Keeps encounters without prior diabetes.
pub fn filter_new_onset(encounters: &[Encounter]) -> Vec<Encounter> {
    encounters.iter().filter(|e| !e.prior_diabetes).cloned().collect()
}

/// An externally configured inclusion predicate, e.g. visit type or age.
pub struct InclusionRule {
    pub name: String,
    predicate: Box<dyn Fn(&Encounter) -> bool + Send + Sync>,
}

impl InclusionRule {
    pub fn new(name: impl Into<String>, predicate: impl Fn(&Encounter) -> bool + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            predicate: Box::new(predicate),
        }
    }

    pub fn min_age(years: f64) -> Self {
        Self::new(format!("age>={years}"), move |e| e.age >= years)
    }

    pub fn admits(&self, encounter: &Encounter) -> bool {
        (self.predicate)(encounter)
    }
}

/// Applies rules in order. Returns the retained encounters and, per rule, how
/// many encounters it was the first to reject.
pub fn apply_rules(encounters: &[Encounter], rules: &[InclusionRule]) -> (Vec<Encounter>, Vec<(String, usize)>) {
    let mut rejected = vec![0usize; rules.len()];
    let kept = encounters
        .iter()
        .filter(|e| match rules.iter().position(|r| !r.admits(e)) {
            Some(i) => {
                rejected[i] += 1;
                false
            }
            None => true,
        })
        .cloned()
        .collect();
    let counts = rules.iter().map(|r| r.name.clone()).zip(rejected).collect();
    (kept, counts)
}

/// `1 / (number of encounters of the patient)`, keyed by encounter id.
pub fn per_patient_weight(encounters: &[Encounter]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in encounters {
        *counts.entry(e.patient_id.as_str()).or_default() += 1;
    }
    encounters
        .iter()
        .map(|e| (e.encounter_id.clone(), 1.0 / counts[e.patient_id.as_str()] as f64))
        .collect()
}

/// Same weights as [`per_patient_weight`], aligned with the input order.
pub fn per_patient_weight_vec(encounters: &[Encounter]) -> Vec<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in encounters {
        *counts.entry(e.patient_id.as_str()).or_default() += 1;
    }
    encounters
        .iter()
        .map(|e| 1.0 / counts[e.patient_id.as_str()] as f64)
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn encounter(patient: &str, id: &str) -> Encounter {
        Encounter {
            patient_id: patient.into(),
            encounter_id: id.into(),
            timestamp: 0,
            age: 50.0,
            covariates: vec![],
            outcome_hba1c: None,
            outcome_class: None,
            measured: false,
            scores: BTreeMap::new(),
            prior_diabetes: false,
            time_to_event: None,
            event: None,
        }
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_hba1c(5.7).unwrap(), HbA1cClass::B57to64);
        assert_eq!(bin_hba1c(6.5).unwrap(), HbA1cClass::B65to79);
        assert_eq!(bin_hba1c(5.6999).unwrap(), HbA1cClass::Lt57);
        assert_eq!(bin_hba1c(7.99).unwrap(), HbA1cClass::B65to79);
        assert_eq!(bin_hba1c(8.0).unwrap(), HbA1cClass::Ge80);
        assert!(HbA1cClass::B65to79.is_diabetic());
        assert!(!HbA1cClass::B57to64.is_diabetic());
    }

    #[test]
    fn bin_rejects_bad_values() {
        for v in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(bin_hba1c(v), Err(crate::Error::InvalidInput(_))));
        }
    }

    proptest! {
        #[test]
        fn bin_is_monotone(a in 0.01f64..20.0, b in 0.01f64..20.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bin_hba1c(lo).unwrap() <= bin_hba1c(hi).unwrap());
        }

        #[test]
        fn splits_partition_patients(n in 1usize..200, per in 1usize..4, seed in any::<u64>()) {
            let encs: Vec<Encounter> = (0..n)
                .flat_map(|p| (0..per).map(move |k| encounter(&format!("P{p}"), &format!("E{p}-{k}"))))
                .collect();
            let s = split_by_patient(&encs, &[3.0, 1.0, 1.0], seed).unwrap();
            prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), encs.len());
            prop_assert_eq!(s.assignment.len(), n);
            for (list, label) in [(&s.train, SplitLabel::Train), (&s.validation, SplitLabel::Validation), (&s.test, SplitLabel::Test)] {
                for e in list.iter() {
                    prop_assert_eq!(s.assignment[&e.patient_id], label);
                }
            }
        }
    }

    #[test]
    fn single_patient_lands_in_one_split() {
        let encs: Vec<_> = (0..5).map(|k| encounter("P0", &format!("E{k}"))).collect();
        for seed in 0..20 {
            let s = split_by_patient(&encs, &[4.0, 1.0], seed).unwrap();
            let sizes = [s.train.len(), s.validation.len(), s.test.len()];
            assert_eq!(sizes.iter().filter(|&&x| x > 0).count(), 1);
            assert_eq!(sizes.iter().sum::<usize>(), 5);
        }
    }

    #[test]
    fn split_fraction_concentrates() {
        let encs: Vec<_> = (0..100_000).map(|p| encounter(&format!("P{p}"), &format!("E{p}"))).collect();
        let s = split_by_patient(&encs, &[4.0, 1.0], 42).unwrap();
        let frac = s.train.len() as f64 / encs.len() as f64;
        assert!((frac - 0.8).abs() < 0.0049, "train fraction {frac}");
        let again = split_by_patient(&encs, &[4.0, 1.0], 42).unwrap();
        assert_eq!(s.assignment, again.assignment);
    }

    #[test]
    fn split_errors_and_empty() {
        let encs = vec![encounter("P0", "E0")];
        assert!(split_by_patient(&encs, &[0.0, 0.0], 1).is_err());
        assert!(split_by_patient(&encs, &[], 1).is_err());
        assert!(split_by_patient(&encs, &[1.0, -1.0], 1).is_err());
        let empty = split_by_patient(&[], &[4.0, 1.0], 1).unwrap();
        assert!(empty.train.is_empty() && empty.test.is_empty() && empty.assignment.is_empty());
        // a zero-ratio bucket stays empty
        let many: Vec<_> = (0..500).map(|p| encounter(&format!("P{p}"), &format!("E{p}"))).collect();
        let s = split_by_patient(&many, &[1.0, 0.0, 1.0], 3).unwrap();
        assert!(s.validation.is_empty());
    }

    fn annotated(patient: &str, id: &str, ecg: Option<i64>, hba1c: Option<i64>) -> AnnotatedEncounter {
        AnnotatedEncounter {
            encounter: encounter(patient, id),
            ecg_time: ecg,
            hba1c_time: hba1c,
        }
    }

    #[test]
    fn pairs_closest_ecg() {
        let recs = vec![
            annotated("P", "h", None, Some(10)),
            annotated("P", "e3", Some(3), None),
            annotated("P", "e12", Some(12), None),
        ];
        let (pairs, report) = pair_measurements(&recs);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].ecg_encounter_id, "e12");
        assert_eq!(pairs[0].gap_days(), 2);
        assert_eq!(report, ExclusionReport::default());
    }

    #[test]
    fn pairs_single_and_tie_break() {
        let (pairs, _) = pair_measurements(&[annotated("P", "x", Some(4), Some(4))]);
        assert_eq!(pairs[0].ecg_encounter_id, "x");

        let recs = vec![
            annotated("P", "e12", Some(12), None),
            annotated("P", "h", None, Some(10)),
            annotated("P", "e8", Some(8), None),
        ];
        let (pairs, _) = pair_measurements(&recs);
        assert_eq!(pairs[0].ecg_encounter_id, "e8");
    }

    #[test]
    fn pairs_use_earliest_hba1c_and_report_exclusions() {
        let recs = vec![
            annotated("A", "h2", None, Some(50)),
            annotated("A", "h1", None, Some(20)),
            annotated("A", "e", Some(45), None),
            annotated("B", "hb", None, Some(1)),
            annotated("C", "ec", Some(1), None),
        ];
        let (pairs, report) = pair_measurements(&recs);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].encounter.encounter_id, "h1");
        assert_eq!(report, ExclusionReport { missing_ecg: 1, missing_hba1c: 1 });
    }

    #[test]
    fn new_onset_filter() {
        let mut a = encounter("A", "a");
        a.prior_diabetes = true;
        let mut b = encounter("B", "b");
        b.prior_diabetes = prior_diabetes_from_history(false, &[5.9, 6.5]);
        let mut c = encounter("C", "c");
        c.prior_diabetes = prior_diabetes_from_history(false, &[]);
        let kept = filter_new_onset(&[a, b, c]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].encounter_id, "c");
        assert_eq!(filter_new_onset(&kept), kept);
    }

    #[test]
    fn inclusion_rules_count_first_rejection() {
        let mut young = encounter("Y", "y");
        young.age = 12.0;
        let old = encounter("O", "o");
        let rules = vec![InclusionRule::min_age(18.0), InclusionRule::new("never", |_| false)];
        let (kept, counts) = apply_rules(&[young, old], &rules);
        assert!(kept.is_empty());
        assert_eq!(counts, vec![("age>=18".to_string(), 1), ("never".to_string(), 1)]);
    }

    #[test]
    fn patient_weights() {
        let mut encs = vec![encounter("solo", "s")];
        encs.extend((0..4).map(|k| encounter("multi", &format!("m{k}"))));
        let w = per_patient_weight(&encs);
        assert_eq!(w["s"], 1.0);
        assert_eq!(w["m2"], 0.25);
        let total: f64 = w.values().sum();
        assert!((total - 2.0).abs() < 1e-12);
        assert_eq!(per_patient_weight_vec(&encs), vec![1.0, 0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn validate_invariants() {
        let mut e = encounter("P", "E");
        e.measured = true;
        assert!(e.validate().is_err());
        e.set_outcome(Some(6.7)).unwrap();
        assert_eq!(e.is_positive(), Some(true));
        e.validate().unwrap();
        e.outcome_class = Some(HbA1cClass::Lt57);
        assert!(e.validate().is_err());
        let mut f = encounter("P", "F");
        f.time_to_event = Some(-1.0);
        assert!(f.validate().is_err());
    }
}
