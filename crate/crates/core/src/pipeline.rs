//! End-to-end runs over a cohort: weighting, evaluation, sensitivity and
//! survival.
//!
//! The evaluation set is the measured encounters of new-onset candidates
//! (no prior diabetes). The propensity model is trained on all new-onset
//! candidates, measured or not.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cohort::{per_patient_weight_vec, Cohort, Encounter};
use crate::error::{degenerate, invalid_config, invalid_input, Result};
use crate::inference::{
    estimate_from_rounds, percentile_interval, pvalue_from_deltas, replicate, BootstrapConfig, MetricEstimate,
    Resampler,
};
use crate::ipw::{ipw_weights_from_propensities, WeightedCohort};
use crate::metrics::{matched_on_curves, screening_yield, PrCurve, RankedScores, RocCurve, ScreeningYield, ThresholdReport, WeightedCurve};
use crate::propensity::{calibration, fit_propensity, CalibrationReport, Design, FitConfig, PropensityFit, Truncation};
use crate::sensitivity::{
    context_checks, predictions, sensitivity_sweep, PropensitySpec, SensitivityResult, SweepInput,
};
use crate::survival::{cumulative_incidence, km_fit, log_rank, Incidence, KMCurve, LogRank, SurvivalRecord};

/// Where the propensities of observed encounters come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PropensitySource {
    Fit(FitConfig),
    /// Propensity per encounter id, e.g. a column file or the simulator truth.
    Given { label: String, values: BTreeMap<String, f64> },
}

impl PropensitySource {
    pub fn label(&self) -> &str {
        match self {
            PropensitySource::Fit(_) => "fit",
            PropensitySource::Given { label, .. } => label,
        }
    }
}

/// Observed encounters with their weights.
#[derive(Debug, Clone)]
pub struct Weighting {
    pub n_total: usize,
    /// Encounters without prior diabetes, measured or not.
    pub candidates: Vec<Encounter>,
    /// Measured candidates, in cohort order.
    pub observed: Vec<Encounter>,
    pub weights: WeightedCohort,
    pub fit: Option<PropensityFit>,
}

impl Weighting {
    pub fn labels(&self) -> Vec<bool> {
        self.observed.iter().map(|e| e.is_positive() == Some(true)).collect()
    }

    pub fn scores(&self, model: &str) -> Result<Vec<f64>> {
        self.observed
            .iter()
            .map(|e| e.score(model).ok_or_else(|| invalid_input(format!("no score column for model {model}"))))
            .collect()
    }
}

pub fn covariate_design(encounters: &[Encounter]) -> Result<Design> {
    let rows: Vec<Vec<f64>> = encounters.iter().map(|e| e.covariates.clone()).collect();
    Design::from_rows(&rows)
}

/// Fits the propensity model on all candidates, per-patient weighted.
pub fn fit_candidates(cohort: &Cohort, config: &FitConfig) -> Result<(Vec<Encounter>, PropensityFit)> {
    let candidates = crate::cohort::filter_new_onset(&cohort.encounters);
    if candidates.is_empty() {
        return Err(degenerate("no encounters without prior diabetes"));
    }
    let design = covariate_design(&candidates)?;
    let measured: Vec<bool> = candidates.iter().map(|e| e.measured).collect();
    let pw = per_patient_weight_vec(&candidates);
    let fit = fit_propensity(&design, &measured, Some(&pw), &cohort.covariate_names, config)?;
    Ok((candidates, fit))
}

/// Calibration of a fitted propensity over the candidates it was trained on.
pub fn propensity_calibration(candidates: &[Encounter], fit: &PropensityFit, n_bins: usize) -> Result<CalibrationReport> {
    let preds: Vec<f64> = candidates
        .iter()
        .map(|e| fit.predict_proba(&e.covariates))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = candidates.iter().map(|e| e.measured).collect();
    calibration(&preds, &labels, n_bins)
}

pub fn weight_observed(cohort: &Cohort, source: &PropensitySource, truncation: Option<Truncation>) -> Result<Weighting> {
    let (candidates, fit) = match source {
        PropensitySource::Fit(cfg) => {
            let (c, f) = fit_candidates(cohort, cfg)?;
            (c, Some(f))
        }
        PropensitySource::Given { .. } => (crate::cohort::filter_new_onset(&cohort.encounters), None),
    };
    let observed: Vec<Encounter> = candidates.iter().filter(|e| e.measured).cloned().collect();
    if observed.is_empty() {
        return Err(degenerate("no measured encounters to evaluate"));
    }
    let props: Vec<f64> = match (source, &fit) {
        (PropensitySource::Fit(_), Some(f)) => observed
            .iter()
            .map(|e| f.predict_proba(&e.covariates))
            .collect::<Result<_>>()?,
        (PropensitySource::Given { label, values }, _) => observed
            .iter()
            .map(|e| {
                values.get(&e.encounter_id).copied().ok_or_else(|| {
                    invalid_input(format!("{label} propensity missing for encounter {}", e.encounter_id))
                })
            })
            .collect::<Result<_>>()?,
        _ => unreachable!(),
    };
    let marginal = observed.len() as f64 / candidates.len() as f64;
    let weights = ipw_weights_from_propensities(&observed, &props, truncation, marginal)?;
    Ok(Weighting {
        n_total: cohort.len(),
        candidates,
        observed,
        weights,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluateConfig {
    pub models: Vec<String>,
    /// Ordinal baseline binarized at each level.
    pub baseline: String,
    pub levels: Vec<i32>,
    pub bootstrap: BootstrapConfig,
    /// Resample patients instead of encounters.
    pub cluster_bootstrap: bool,
    /// Level whose matched threshold defines screening yield.
    pub yield_level: i32,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            models: vec!["ecg".into(), "questionnaire".into(), "ada".into()],
            baseline: "ada".into(),
            levels: (1..=7).collect(),
            bootstrap: BootstrapConfig::default(),
            cluster_bootstrap: false,
            yield_level: 5,
        }
    }
}

impl EvaluateConfig {
    pub fn validate(&self) -> Result<()> {
        self.bootstrap.validate()?;
        if self.models.is_empty() {
            return Err(invalid_config("at least one model is required"));
        }
        if self.levels.is_empty() {
            return Err(invalid_config("at least one baseline level is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.models.iter().find(|m| !seen.insert(m.as_str())) {
            return Err(invalid_config(format!("model {dup} listed twice")));
        }
        Ok(())
    }

    /// Evaluated models, with the baseline appended if not listed.
    fn all_models(&self) -> Vec<String> {
        let mut m = self.models.clone();
        if !m.contains(&self.baseline) {
            m.push(self.baseline.clone());
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelMetrics {
    pub model: String,
    pub auc: MetricEstimate,
    pub auprc: MetricEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseTest {
    pub metric: String,
    pub model_a: String,
    pub model_b: String,
    /// One-sided p for `metric(a) > metric(b)`.
    pub pvalue: f64,
    pub rounds: usize,
    pub excluded_rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedInterval {
    pub model: String,
    pub level: i32,
    pub ppv: Option<Interval>,
    pub npv: Option<Interval>,
    pub f1: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YieldRow {
    pub model: String,
    pub level: i32,
    pub threshold: f64,
    #[serde(flatten)]
    pub screening: ScreeningYield,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub n_encounters: usize,
    pub n_candidates: usize,
    pub n_observed: usize,
    pub n_observed_positive: usize,
    pub marginal_measured: f64,
    pub propensity_source: String,
    pub selected_l2: Option<f64>,
    pub weights: WeightSummary,
    pub metrics: Vec<ModelMetrics>,
    pub pairwise: Vec<PairwiseTest>,
    pub matched: Vec<ThresholdReport>,
    pub matched_intervals: Vec<MatchedInterval>,
    pub screening: Vec<YieldRow>,
}

#[derive(Debug, Clone)]
pub struct EvaluationOutput {
    pub report: EvaluationReport,
    /// Per model, on the full weighted evaluation set.
    pub curves: Vec<(String, RocCurve, PrCurve)>,
}

struct RoundResult {
    auc: Vec<Option<f64>>,
    auprc: Vec<Option<f64>>,
    matched: Vec<ThresholdReport>,
}

fn round_metrics(
    ranked: &[RankedScores],
    baseline: usize,
    names: &[&str],
    weights: &[f64],
    counts: Option<&[u32]>,
    levels: &[i32],
) -> RoundResult {
    let curves: Vec<WeightedCurve> = ranked
        .iter()
        .map(|r| match counts {
            Some(c) => r.curve_with_multiplicity(weights, c),
            None => r.curve(weights),
        })
        .collect();
    let refs: Vec<(&str, &WeightedCurve)> = names.iter().copied().zip(&curves).collect();
    let matched = if curves[baseline].total_positive() > 0.0 && curves[baseline].total_negative() > 0.0 {
        matched_on_curves(&refs, &curves[baseline], levels)
    } else {
        Vec::new()
    };
    RoundResult {
        auc: curves.iter().map(|c| c.auc().ok()).collect(),
        auprc: curves.iter().map(|c| c.auprc().ok()).collect(),
        matched,
    }
}

fn matched_value(rounds: &[RoundResult], level_idx: usize, model_idx: usize, pick: fn(&crate::metrics::MatchedRow) -> Option<f64>) -> Vec<Option<f64>> {
    rounds
        .iter()
        .map(|r| r.matched.get(level_idx).and_then(|rep| pick(&rep.rows[model_idx])))
        .collect()
}

pub fn evaluate(weighting: &Weighting, config: &EvaluateConfig) -> Result<EvaluationOutput> {
    config.validate()?;
    let models = config.all_models();
    let names: Vec<&str> = models.iter().map(String::as_str).collect();
    let baseline = names.iter().position(|m| *m == config.baseline).expect("baseline is appended");
    let labels = weighting.labels();
    let weights = weighting.weights.ipw();
    let ranked: Vec<RankedScores> = models
        .iter()
        .map(|m| RankedScores::new(&weighting.scores(m)?, &labels))
        .collect::<Result<_>>()?;
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(degenerate("evaluation set needs both positive and negative encounters"));
    }

    let full = round_metrics(&ranked, baseline, &names, &weights, None, &config.levels);
    let resampler = if config.cluster_bootstrap {
        let keys: Vec<&str> = weighting.observed.iter().map(|e| e.patient_id.as_str()).collect();
        Resampler::clusters(&keys)
    } else {
        Resampler::encounters(labels.len())
    };
    let rounds: Vec<RoundResult> = replicate(&resampler, &config.bootstrap, |c| {
        Some(round_metrics(&ranked, baseline, &names, &weights, Some(c), &config.levels))
    })
    .into_iter()
    .map(|r| r.expect("rounds always produce a result"))
    .collect();
    let alpha = config.bootstrap.alpha;

    let mut metrics = Vec::new();
    for (m, name) in models.iter().enumerate() {
        let auc_rounds: Vec<Option<f64>> = rounds.iter().map(|r| r.auc[m]).collect();
        let auprc_rounds: Vec<Option<f64>> = rounds.iter().map(|r| r.auprc[m]).collect();
        metrics.push(ModelMetrics {
            model: name.clone(),
            auc: estimate_from_rounds(full.auc[m].expect("both classes present"), &auc_rounds, alpha)?,
            auprc: estimate_from_rounds(full.auprc[m].expect("positives present"), &auprc_rounds, alpha)?,
        });
    }

    let mut pairwise = Vec::new();
    for (metric, pick) in [("auc", 0usize), ("auprc", 1usize)] {
        for a in 0..models.len() {
            for b in 0..models.len() {
                if a == b {
                    continue;
                }
                let deltas: Vec<Option<f64>> = rounds
                    .iter()
                    .map(|r| {
                        let v = if pick == 0 { &r.auc } else { &r.auprc };
                        Some(v[a]? - v[b]?)
                    })
                    .collect();
                let excluded = deltas.iter().filter(|d| d.is_none()).count();
                let pvalue = pvalue_from_deltas(&deltas).ok_or_else(|| degenerate("no valid bootstrap round"))?;
                pairwise.push(PairwiseTest {
                    metric: metric.to_string(),
                    model_a: models[a].clone(),
                    model_b: models[b].clone(),
                    pvalue,
                    rounds: deltas.len(),
                    excluded_rounds: excluded,
                });
            }
        }
    }

    let interval = |v: Vec<Option<f64>>| percentile_interval(&v, alpha).map(|(lo, hi)| Interval { lo, hi });
    let mut matched_intervals = Vec::new();
    for (li, &level) in config.levels.iter().enumerate() {
        for (m, name) in models.iter().enumerate() {
            matched_intervals.push(MatchedInterval {
                model: name.clone(),
                level,
                ppv: interval(matched_value(&rounds, li, m, |r| r.ppv)),
                npv: interval(matched_value(&rounds, li, m, |r| r.npv)),
                f1: interval(matched_value(&rounds, li, m, |r| r.f1)),
            });
        }
    }

    let mut screening = Vec::new();
    if let Some(rep) = full.matched.iter().find(|r| r.level == config.yield_level) {
        let untested: Vec<&Encounter> = weighting.candidates.iter().filter(|e| !e.measured).collect();
        let tested = vec![false; untested.len()];
        for row in &rep.rows {
            let Some(threshold) = row.threshold else { continue };
            let scores: Vec<f64> = untested
                .iter()
                .map(|e| e.score(&row.model).ok_or_else(|| invalid_input(format!("no score column for model {}", row.model))))
                .collect::<Result<_>>()?;
            screening.push(YieldRow {
                model: row.model.clone(),
                level: rep.level,
                threshold,
                screening: screening_yield(&tested, &scores, threshold, row.ppv)?,
            });
        }
    }

    let curves = ranked
        .iter()
        .zip(&models)
        .map(|(r, name)| {
            let c = r.curve(&weights);
            Ok((name.clone(), c.roc()?, c.prc()?))
        })
        .collect::<Result<_>>()?;

    let wmin = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let wmax = weights.iter().copied().fold(0.0, f64::max);
    let wmean = weights.iter().copied().collect::<crate::sum::NeumaierSum>().value() / weights.len() as f64;
    let report = EvaluationReport {
        n_encounters: weighting.n_total,
        n_candidates: weighting.candidates.len(),
        n_observed: weighting.observed.len(),
        n_observed_positive: n_pos,
        marginal_measured: weighting.weights.marginal_measured,
        propensity_source: String::new(),
        selected_l2: weighting.fit.as_ref().map(|f| f.selected_l2),
        weights: WeightSummary {
            min: wmin,
            max: wmax,
            mean: wmean,
        },
        metrics,
        pairwise,
        matched: full.matched,
        matched_intervals,
        screening,
    };
    Ok(EvaluationOutput { report, curves })
}

/// Threshold of `model` matched to the weighted TPR of `baseline >= level`.
pub fn matched_threshold(weighting: &Weighting, model: &str, baseline: &str, level: i32) -> Result<f64> {
    let labels = weighting.labels();
    let weights = weighting.weights.ipw();
    let base = RankedScores::new(&weighting.scores(baseline)?, &labels)?.curve(&weights);
    let target = base
        .confusion_at(f64::from(level))
        .rates()
        .tpr
        .filter(|t| *t > 0.0)
        .ok_or_else(|| degenerate(format!("baseline {baseline} flags no positives at level {level}")))?;
    RankedScores::new(&weighting.scores(model)?, &labels)?.curve(&weights).threshold_at_tpr(target)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityConfig {
    pub focal: String,
    pub baseline: String,
    pub level: i32,
    pub gamma_grid: Vec<f64>,
    pub refine: bool,
    /// Used for the drop-age refit.
    pub fit: FitConfig,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            focal: "ecg".into(),
            baseline: "ada".into(),
            level: 5,
            gamma_grid: crate::sensitivity::default_gamma_grid(),
            refine: true,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub focal: String,
    pub baseline: String,
    pub level: i32,
    pub focal_threshold: f64,
    pub baseline_threshold: f64,
    #[serde(flatten)]
    pub result: SensitivityResult,
}

pub fn sensitivity_analysis(
    weighting: &Weighting,
    feature_names: &[String],
    config: &SensitivityConfig,
) -> Result<SensitivityReport> {
    let focal_threshold = matched_threshold(weighting, &config.focal, &config.baseline, config.level)?;
    let baseline_threshold = matched_threshold(weighting, &config.baseline, &config.baseline, config.level)?;
    let focal = predictions(&weighting.scores(&config.focal)?, focal_threshold);
    let baseline = predictions(&weighting.scores(&config.baseline)?, baseline_threshold);
    let labels = weighting.labels();
    let weights = weighting.weights.ipw();
    let input = SweepInput {
        focal: &focal,
        baseline: &baseline,
        labels: &labels,
        weights: &weights,
    };
    let mut result = sensitivity_sweep(&input, &config.gamma_grid, config.refine)?;
    let spec = PropensitySpec {
        population: &weighting.candidates,
        feature_names,
        fit: &config.fit,
        use_patient_weights: true,
    };
    result.context = context_checks(&weighting.observed, &focal, &baseline, &spec)?;
    Ok(SensitivityReport {
        focal: config.focal.clone(),
        baseline: config.baseline.clone(),
        level: config.level,
        focal_threshold,
        baseline_threshold,
        result,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalConfig {
    pub model: String,
    pub threshold: f64,
    /// Ordinal baseline and the level defining its high-risk group.
    pub baseline: Option<(String, i32)>,
    pub horizon_days: f64,
    pub z_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub n: usize,
    pub events: usize,
    pub incidence: Incidence,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRankRow {
    pub group_a: String,
    pub group_b: String,
    #[serde(flatten)]
    pub test: LogRank,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalReport {
    pub model: String,
    pub threshold: f64,
    pub horizon_days: f64,
    pub n_followed: usize,
    pub groups: Vec<GroupSummary>,
    pub log_rank: Vec<LogRankRow>,
}

#[derive(Debug, Clone)]
pub struct SurvivalOutput {
    pub report: SurvivalReport,
    pub curves: Vec<(String, KMCurve)>,
}

/// Follow-up of measured negatives, censored at the horizon.
fn follow_up(encounters: &[Encounter], horizon: f64) -> Vec<(&Encounter, f64, bool)> {
    encounters
        .iter()
        .filter(|e| e.measured && e.is_positive() == Some(false))
        .filter_map(|e| {
            let t = e.time_to_event?;
            let event = e.event?;
            Some(if t > horizon { (e, horizon, false) } else { (e, t, event) })
        })
        .collect()
}

pub fn survival_analysis(cohort: &Cohort, config: &SurvivalConfig) -> Result<SurvivalOutput> {
    if !(config.horizon_days >= 0.0) {
        return Err(invalid_config("horizon must be nonnegative"));
    }
    let candidates = crate::cohort::filter_new_onset(&cohort.encounters);
    let followed = follow_up(&candidates, config.horizon_days);
    if followed.is_empty() {
        return Err(degenerate("no measured negative encounters with follow-up"));
    }
    let mut splits: Vec<(String, String, Vec<SurvivalRecord>, Vec<SurvivalRecord>)> = Vec::new();
    let split = |name: &str, high: &dyn Fn(&Encounter) -> Result<bool>| -> Result<(String, String, Vec<SurvivalRecord>, Vec<SurvivalRecord>)> {
        let (hi_name, lo_name) = (format!("{name}:high"), format!("{name}:low"));
        let (mut hi, mut lo) = (Vec::new(), Vec::new());
        for (e, t, ev) in &followed {
            if high(e)? {
                hi.push(SurvivalRecord::new(*t, *ev, hi_name.clone())?);
            } else {
                lo.push(SurvivalRecord::new(*t, *ev, lo_name.clone())?);
            }
        }
        Ok((hi_name, lo_name, hi, lo))
    };
    let score_of = |e: &Encounter, m: &str| {
        e.score(m).ok_or_else(|| invalid_input(format!("no score column for model {m}")))
    };
    splits.push(split(&config.model, &|e| Ok(score_of(e, &config.model)? >= config.threshold))?);
    if let Some((b, level)) = &config.baseline {
        splits.push(split(b, &|e| Ok(score_of(e, b)? >= f64::from(*level)))?);
    }

    let mut groups = Vec::new();
    let mut curves = Vec::new();
    let mut tests = Vec::new();
    for (hi_name, lo_name, hi, lo) in &splits {
        for (name, recs) in [(hi_name, hi), (lo_name, lo)] {
            if recs.is_empty() {
                continue;
            }
            let c = km_fit(recs, config.z_alpha)?;
            groups.push(GroupSummary {
                group: name.clone(),
                n: recs.len(),
                events: recs.iter().filter(|r| r.event).count(),
                incidence: cumulative_incidence(&c, config.horizon_days)?,
            });
            curves.push((name.clone(), c));
        }
        if !hi.is_empty() && !lo.is_empty() {
            tests.push(LogRankRow {
                group_a: hi_name.clone(),
                group_b: lo_name.clone(),
                test: log_rank(hi, lo)?,
            });
        }
    }
    if splits.len() == 2 && !splits[0].2.is_empty() && !splits[1].2.is_empty() {
        tests.push(LogRankRow {
            group_a: splits[0].0.clone(),
            group_b: splits[1].0.clone(),
            test: log_rank(&splits[0].2, &splits[1].2)?,
        });
    }
    Ok(SurvivalOutput {
        report: SurvivalReport {
            model: config.model.clone(),
            threshold: config.threshold,
            horizon_days: config.horizon_days,
            n_followed: followed.len(),
            groups,
            log_rank: tests,
        },
        curves,
    })
}
