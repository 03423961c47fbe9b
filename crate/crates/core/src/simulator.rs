//! Synthetic complete populations with known missingness.
//!
//! Each patient draws standard-normal covariates `z`; the latent diabetes
//! risk is `u = beta . z + eps`. The binary outcome is `u >= t` with `t` set
//! so the prevalence matches its target, and HbA1c is an affine map of `u`
//! placing `t` at 6.5%. Model scores blend standardized `u` with independent
//! noise, the blend coefficient found by bisection on the exact empirical
//! AUC. The measurement indicator depends on `z` only (MAR), so the true
//! propensity is known for every encounter.
//!
//! Draws come from counter-based streams keyed by patient or encounter index,
//! so generation runs in parallel and the output does not depend on thread
//! count.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Encounter};
use crate::error::{invalid_config, Error, Result};
use crate::metrics::{RankedScores, WeightedCurve};
use crate::propensity::sigmoid;
use crate::rng::{domain, stream};
use crate::survival::SurvivalRecord;

/// Target `P(level >= k | positive)` for ordinal levels k = 2..7.
pub const ORDINAL_LEVEL_TPR: [f64; 6] = [0.97, 0.92, 0.85, 0.704, 0.45, 0.20];
/// Fraction of positives whose noise-free risk places them in the latent
/// high-risk group; mirrors the ordinal baseline's level-5 sensitivity.
pub const LATENT_HIGH_TPR: f64 = 0.704;
/// Follow-up horizon in days.
pub const FOLLOW_UP_DAYS: f64 = 365.0;

const CALIBRATION_MIN: usize = 20_000;
const CALIBRATION_MAX: usize = 200_000;
const AUC_TOLERANCE: f64 = 0.01;
const RHO_MAX: f64 = 0.995;
const FIRST_DAY: i64 = 15_706;
const DAY_SPAN: f64 = 3_180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_patients: usize,
    /// Number of covariates; the first is age.
    pub covariate_dim: usize,
    /// Each patient has between 1 and this many encounters.
    pub max_encounters_per_patient: usize,
    pub prevalence_target: f64,
    pub observed_rate_target: f64,
    pub model_auc_targets: BTreeMap<String, f64>,
    /// Models reported as integer levels 1..=7 instead of continuous scores.
    pub ordinal_models: Vec<String>,
    /// Strength of the dependence of measurement on the risk direction of
    /// `z`; 0 gives missingness completely at random.
    pub missingness_outcome_corr: f64,
    /// One-year onset hazards for the latent high and low groups.
    pub onset_rate_high: f64,
    pub onset_rate_low: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_patients: 100_000,
            covariate_dim: 4,
            max_encounters_per_patient: 1,
            prevalence_target: 0.049,
            observed_rate_target: 0.01,
            model_auc_targets: [("ecg", 0.80), ("questionnaire", 0.76), ("ada", 0.69)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            ordinal_models: vec!["ada".to_string()],
            missingness_outcome_corr: 1.0,
            onset_rate_high: -(0.88f64.ln()),
            onset_rate_low: -(0.96f64.ln()),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(invalid_config(format!("{name} must be in (0, 1), got {v}")))
            }
        };
        if self.n_patients == 0 {
            return Err(invalid_config("n_patients must be at least 1"));
        }
        if self.covariate_dim == 0 {
            return Err(invalid_config("covariate_dim must be at least 1"));
        }
        if self.max_encounters_per_patient == 0 {
            return Err(invalid_config("max_encounters_per_patient must be at least 1"));
        }
        open_unit("prevalence_target", self.prevalence_target)?;
        open_unit("observed_rate_target", self.observed_rate_target)?;
        for (name, &auc) in &self.model_auc_targets {
            // 1.0 is a valid request that calibration will reject
            if !(auc > 0.0 && auc <= 1.0) {
                return Err(invalid_config(format!("AUC target for {name} must be in (0, 1], got {auc}")));
            }
            if name.is_empty() || name.contains([',', '"', '\n']) {
                return Err(invalid_config(format!("unusable model name {name:?}")));
            }
        }
        if !self.missingness_outcome_corr.is_finite() {
            return Err(invalid_config("missingness_outcome_corr must be finite"));
        }
        for (name, v) in [("onset_rate_high", self.onset_rate_high), ("onset_rate_low", self.onset_rate_low)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_config(format!("{name} must be a nonnegative hazard, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_ordinal(&self, model: &str) -> bool {
        self.ordinal_models.iter().any(|m| m == model)
    }

    /// `cov_age, cov_z1, ...` without the prefix.
    pub fn covariate_names(&self) -> Vec<String> {
        std::iter::once("age".to_string())
            .chain((1..self.covariate_dim).map(|j| format!("z{j}")))
            .collect()
    }

    fn beta(&self) -> Vec<f64> {
        (0..self.covariate_dim).map(|j| 0.8 * 0.75f64.powi(j as i32)).collect()
    }
}

/// Everything fixed by calibration, reusable for inspection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimCalibration {
    pub sample_size: usize,
    pub risk_threshold: f64,
    pub risk_mean: f64,
    pub risk_sd: f64,
    pub blend: BTreeMap<String, f64>,
    pub calibrated_auc: BTreeMap<String, f64>,
    /// Cutpoints for levels 2..=7 on the blended score.
    pub ordinal_cutpoints: BTreeMap<String, Vec<f64>>,
    pub propensity_intercept: f64,
    pub latent_high_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimPopulation {
    pub config: SimConfig,
    pub covariate_names: Vec<String>,
    pub score_names: Vec<String>,
    /// Complete view: every encounter carries its outcome, and negatives
    /// carry follow-up.
    pub encounters: Vec<Encounter>,
    pub true_propensity: Vec<f64>,
    pub observed_mask: Vec<bool>,
    /// Noise-free risk `beta . z`.
    pub latent_risk: Vec<f64>,
    pub latent_high: Vec<bool>,
    pub calibration: SimCalibration,
}

#[derive(Debug, Clone)]
struct Latent {
    age: f64,
    /// Standardized covariates used by the risk and propensity models.
    zs: Vec<f64>,
    eps: f64,
    eta: Vec<f64>,
    mask_u: f64,
}

fn draw_covariates(rng: &mut ChaCha8Rng, dim: usize) -> (f64, Vec<f64>) {
    let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let age = (50.0 + 15.0 * z[0]).clamp(18.0, 90.0);
    let mut zs = z;
    zs[0] = (age - 50.0) / 15.0;
    (age, zs)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quantile_desc(values: &mut [f64], fraction: f64) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * values.len() as f64) - 1e-9).ceil().clamp(1.0, values.len() as f64) as usize;
    values[k - 1]
}

fn discretize(score: f64, cutpoints: &[f64]) -> f64 {
    1.0 + cutpoints.iter().filter(|&&c| score >= c).count() as f64
}

struct Calibrator<'a> {
    standardized: Vec<f64>,
    labels: Vec<bool>,
    latents: &'a [Latent],
}

impl Calibrator<'_> {
    fn scores(&self, model: usize, rho: f64) -> Vec<f64> {
        let c = (1.0 - rho * rho).sqrt();
        self.standardized
            .iter()
            .zip(self.latents)
            .map(|(us, l)| rho * us + c * l.eta[model])
            .collect()
    }

    fn cutpoints(&self, scores: &[f64]) -> Vec<f64> {
        let mut pos: Vec<f64> = scores.iter().zip(&self.labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
        ORDINAL_LEVEL_TPR.iter().map(|&q| quantile_desc(&mut pos, q)).collect()
    }

    fn auc(&self, scores: &[f64]) -> Result<f64> {
        let ranked = RankedScores::new(scores, &self.labels)?;
        ranked.curve(&vec![1.0; scores.len()]).auc()
    }

    /// `(auc, cutpoints)` of a model at blend `rho`.
    fn evaluate(&self, model: usize, rho: f64, ordinal: bool) -> Result<(f64, Vec<f64>)> {
        let s = self.scores(model, rho);
        if ordinal {
            let cuts = self.cutpoints(&s);
            let levels: Vec<f64> = s.iter().map(|&x| discretize(x, &cuts)).collect();
            Ok((self.auc(&levels)?, cuts))
        } else {
            Ok((self.auc(&s)?, Vec::new()))
        }
    }

    fn calibrate(&self, name: &str, model: usize, target: f64, ordinal: bool) -> Result<(f64, f64, Vec<f64>)> {
        let (lo_auc, _) = self.evaluate(model, 0.0, ordinal)?;
        let (hi_auc, _) = self.evaluate(model, RHO_MAX, ordinal)?;
        if target > hi_auc || target < lo_auc - AUC_TOLERANCE {
            return Err(Error::CalibrationFailure(format!(
                "AUC target {target} for {name} outside the attainable range [{lo_auc:.4}, {hi_auc:.4}]"
            )));
        }
        let (mut lo, mut hi) = (0.0, RHO_MAX);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let (auc, _) = self.evaluate(model, mid, ordinal)?;
            if auc < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-7 {
                break;
            }
        }
        let rho = 0.5 * (lo + hi);
        let (auc, cuts) = self.evaluate(model, rho, ordinal)?;
        if (auc - target).abs() > AUC_TOLERANCE {
            return Err(Error::CalibrationFailure(format!(
                "AUC for {name} calibrated to {auc:.4}, target {target}"
            )));
        }
        Ok((rho, auc, cuts))
    }
}

fn patient_draw(config: &SimConfig, p: usize) -> (f64, Vec<f64>, usize, f64) {
    let mut rng = stream(config.seed, domain::PATIENT, p as u64);
    let (age, zs) = draw_covariates(&mut rng, config.covariate_dim);
    let n_enc = 1 + rng.random_range(0..config.max_encounters_per_patient);
    let day: f64 = rng.random();
    (age, zs, n_enc, day)
}

fn encounter_noise(seed: u64, dom: u64, e: usize, n_models: usize) -> (ChaCha8Rng, f64, Vec<f64>, f64) {
    let mut rng = stream(seed, dom, e as u64);
    let eps: f64 = rng.sample(StandardNormal);
    let eta: Vec<f64> = (0..n_models).map(|_| rng.sample(StandardNormal)).collect();
    let mask_u: f64 = rng.random();
    (rng, eps, eta, mask_u)
}

/// Draws a complete population.
pub fn generate(config: &SimConfig) -> Result<SimPopulation> {
    config.validate()?;
    let models: Vec<String> = config.model_auc_targets.keys().cloned().collect();
    let beta = config.beta();
    let beta_norm = dot(&beta, &beta).sqrt();

    let patients: Vec<(f64, Vec<f64>, usize, f64)> =
        (0..config.n_patients).into_par_iter().map(|p| patient_draw(config, p)).collect();
    let mut owner = Vec::new();
    for (p, pd) in patients.iter().enumerate() {
        owner.extend(std::iter::repeat_n(p, pd.2));
    }
    let n = owner.len();

    struct Drawn {
        latent: Latent,
        day: i64,
        onset_unit: f64,
        censor_unit: f64,
    }
    let drawn: Vec<Drawn> = (0..n)
        .into_par_iter()
        .map(|e| {
            let pd = &patients[owner[e]];
            let (mut rng, eps, eta, mask_u) = encounter_noise(config.seed, domain::ENCOUNTER, e, models.len());
            let jitter: f64 = rng.random();
            let onset_unit: f64 = rng.sample(Exp1);
            let censor_unit: f64 = rng.random();
            let frac = if pd.2 == 1 { pd.3 } else { (pd.3 + jitter * 0.25).fract() };
            Drawn {
                latent: Latent {
                    age: pd.0,
                    zs: pd.1.clone(),
                    eps,
                    eta,
                    mask_u,
                },
                day: FIRST_DAY + (frac * DAY_SPAN).floor() as i64,
                onset_unit,
                censor_unit,
            }
        })
        .collect();

    let aux;
    let calib_latents: &[Latent] = if n >= CALIBRATION_MIN {
        aux = drawn[..n.min(CALIBRATION_MAX)].iter().map(|d| d.latent.clone()).collect::<Vec<_>>();
        &aux
    } else {
        aux = (0..CALIBRATION_MIN)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(config.seed, domain::CALIBRATION, i as u64);
                let (age, zs) = draw_covariates(&mut rng, config.covariate_dim);
                let (_, eps, eta, mask_u) =
                    encounter_noise(config.seed, domain::CALIBRATION, i + CALIBRATION_MIN, models.len());
                Latent { age, zs, eps, eta, mask_u }
            })
            .collect::<Vec<_>>();
        &aux
    };
    let calibration = calibrate(config, &models, &beta, beta_norm, calib_latents)?;

    let cal = &calibration;
    let built: Vec<(Encounter, f64, bool, f64, bool)> = drawn
        .into_par_iter()
        .enumerate()
        .map(|(e, d)| {
            let l = &d.latent;
            let g = dot(&beta, &l.zs);
            let u = g + l.eps;
            let us = (u - cal.risk_mean) / cal.risk_sd;
            let hba1c = (6.5 + 0.6 * (u - cal.risk_threshold) / cal.risk_sd).max(3.0);
            let positive = u >= cal.risk_threshold;
            let mut scores = BTreeMap::new();
            for (m, name) in models.iter().enumerate() {
                let rho = cal.blend[name];
                let s = rho * us + (1.0 - rho * rho).sqrt() * l.eta[m];
                let s = match cal.ordinal_cutpoints.get(name) {
                    Some(cuts) => discretize(s, cuts),
                    None => s,
                };
                scores.insert(name.clone(), s);
            }
            let p = sigmoid(cal.propensity_intercept + config.missingness_outcome_corr * g / beta_norm);
            let observed = l.mask_u < p;
            let high = g >= cal.latent_high_threshold;
            let (time_to_event, event) = if positive {
                (None, None)
            } else {
                let hazard = if high { config.onset_rate_high } else { config.onset_rate_low };
                let onset = if hazard > 0.0 {
                    d.onset_unit * FOLLOW_UP_DAYS / hazard
                } else {
                    f64::INFINITY
                };
                let censor = FOLLOW_UP_DAYS * (1.0 - d.censor_unit);
                (Some(onset.min(censor)), Some(onset <= censor))
            };
            let mut covariates = l.zs.clone();
            covariates[0] = l.age;
            let mut enc = Encounter {
                patient_id: format!("P{:07}", owner[e]),
                encounter_id: format!("E{e:08}"),
                timestamp: d.day,
                age: l.age,
                covariates,
                outcome_hba1c: None,
                outcome_class: None,
                measured: observed,
                scores,
                prior_diabetes: false,
                time_to_event,
                event,
            };
            enc.set_outcome(Some(hba1c)).expect("simulated HbA1c is positive");
            (enc, p, observed, g, high)
        })
        .collect();

    let mut pop = SimPopulation {
        config: config.clone(),
        covariate_names: config.covariate_names(),
        score_names: models,
        encounters: Vec::with_capacity(n),
        true_propensity: Vec::with_capacity(n),
        observed_mask: Vec::with_capacity(n),
        latent_risk: Vec::with_capacity(n),
        latent_high: Vec::with_capacity(n),
        calibration,
    };
    for (enc, p, obs, g, high) in built {
        pop.encounters.push(enc);
        pop.true_propensity.push(p);
        pop.observed_mask.push(obs);
        pop.latent_risk.push(g);
        pop.latent_high.push(high);
    }
    Ok(pop)
}

fn calibrate(
    config: &SimConfig,
    models: &[String],
    beta: &[f64],
    beta_norm: f64,
    latents: &[Latent],
) -> Result<SimCalibration> {
    let g: Vec<f64> = latents.iter().map(|l| dot(beta, &l.zs)).collect();
    let u: Vec<f64> = g.iter().zip(latents).map(|(g, l)| g + l.eps).collect();
    let nc = u.len();
    let k = (config.prevalence_target * nc as f64).round() as usize;
    if k == 0 || k >= nc {
        return Err(Error::CalibrationFailure(format!(
            "prevalence target {} leaves no positives or no negatives",
            config.prevalence_target
        )));
    }
    let mut sorted = u.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let mean = u.iter().sum::<f64>() / nc as f64;
    let sd = (u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nc as f64).sqrt();
    let labels: Vec<bool> = u.iter().map(|&x| x >= threshold).collect();

    let calibrator = Calibrator {
        standardized: u.iter().map(|x| (x - mean) / sd).collect(),
        labels: labels.clone(),
        latents,
    };
    let fitted: Vec<(f64, f64, Vec<f64>)> = models
        .par_iter()
        .enumerate()
        .map(|(m, name)| calibrator.calibrate(name, m, config.model_auc_targets[name], config.is_ordinal(name)))
        .collect::<Result<_>>()?;
    let mut blend = BTreeMap::new();
    let mut calibrated_auc = BTreeMap::new();
    let mut ordinal_cutpoints = BTreeMap::new();
    for (name, (rho, auc, cuts)) in models.iter().zip(fitted) {
        blend.insert(name.clone(), rho);
        calibrated_auc.insert(name.clone(), auc);
        if config.is_ordinal(name) {
            ordinal_cutpoints.insert(name.clone(), cuts);
        }
    }

    let direction: Vec<f64> = g.iter().map(|x| config.missingness_outcome_corr * x / beta_norm).collect();
    let mean_p = |a: f64| direction.iter().map(|d| sigmoid(a + d)).sum::<f64>() / nc as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < config.observed_rate_target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let intercept = 0.5 * (lo + hi);
    if (mean_p(intercept) - config.observed_rate_target).abs() > 1e-6 {
        return Err(Error::CalibrationFailure(format!(
            "observed rate {} unattainable",
            config.observed_rate_target
        )));
    }

    let mut pos_g: Vec<f64> = g.iter().zip(&labels).filter(|(_, l)| **l).map(|(g, _)| *g).collect();
    let latent_high_threshold = quantile_desc(&mut pos_g, LATENT_HIGH_TPR);

    Ok(SimCalibration {
        sample_size: nc,
        risk_threshold: threshold,
        risk_mean: mean,
        risk_sd: sd,
        blend,
        calibrated_auc,
        ordinal_cutpoints,
        propensity_intercept: intercept,
        latent_high_threshold,
    })
}

impl SimPopulation {
    pub fn len(&self) -> usize {
        self.encounters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encounters.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.encounters.iter().map(|e| e.is_positive() == Some(true)).collect()
    }

    pub fn scores(&self, model: &str) -> Option<Vec<f64>> {
        self.encounters.iter().map(|e| e.score(model)).collect()
    }

    /// What an analyst sees: unmeasured encounters lose their outcome and
    /// follow-up.
    pub fn masked_cohort(&self) -> Cohort {
        let encounters = self
            .encounters
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if !e.measured {
                    e.outcome_hba1c = None;
                    e.outcome_class = None;
                    e.time_to_event = None;
                    e.event = None;
                }
                e
            })
            .collect();
        Cohort {
            covariate_names: self.covariate_names.clone(),
            score_names: self.score_names.clone(),
            encounters,
        }
    }

    /// Indices of observed encounters.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed_mask[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMetric {
    Auc,
    Auprc,
    Prevalence,
    /// PPV of `score >= threshold`.
    Ppv(f64),
}

/// Complete-population metric with unit weights.
pub fn oracle_metrics(pop: &SimPopulation, model: &str, metric: OracleMetric) -> Result<f64> {
    let labels = pop.labels();
    if let OracleMetric::Prevalence = metric {
        return Ok(labels.iter().filter(|l| **l).count() as f64 / labels.len() as f64);
    }
    let scores = pop
        .scores(model)
        .ok_or_else(|| crate::error::invalid_input(format!("no model named {model}")))?;
    let curve: WeightedCurve = RankedScores::new(&scores, &labels)?.curve(&vec![1.0; labels.len()]);
    match metric {
        OracleMetric::Auc => curve.auc(),
        OracleMetric::Auprc => curve.auprc(),
        OracleMetric::Ppv(t) => curve
            .confusion_at(t)
            .rates()
            .ppv
            .ok_or_else(|| crate::error::degenerate("no encounter reaches the threshold")),
        OracleMetric::Prevalence => unreachable!(),
    }
}

/// Follow-up records of all binary-negative encounters, grouped by latent
/// risk ("high" / "low").
pub fn generate_survival(pop: &SimPopulation) -> Vec<SurvivalRecord> {
    pop.encounters
        .iter()
        .zip(&pop.latent_high)
        .filter_map(|(e, &high)| {
            Some(SurvivalRecord {
                time: e.time_to_event?,
                event: e.event?,
                group: if high { "high" } else { "low" }.to_string(),
            })
        })
        .collect()
}
