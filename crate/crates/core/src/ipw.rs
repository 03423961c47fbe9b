//! Inverse probability weighting of observed encounters.
//!
//! Expectations over the complete population are estimated from measured
//! encounters only, each weighted by `1 / p(m = 1 | z)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::Encounter;
use crate::error::{invalid_input, Result};
use crate::propensity::{impute, PropensityModel, Truncation};
use crate::sum::NeumaierSum;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedSample {
    pub encounter_id: String,
    /// Truncated propensity the weight was derived from.
    pub propensity: f64,
    pub ipw_weight: f64,
    pub patient_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedCohort {
    pub samples: Vec<WeightedSample>,
    pub marginal_measured: f64,
}

impl WeightedCohort {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Evaluation weights.
    pub fn ipw(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.ipw_weight).collect()
    }

    /// `ipw_weight * patient_weight`, used where per-patient down-weighting applies.
    pub fn combined(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.ipw_weight * s.patient_weight).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    HorvitzThompson,
    #[default]
    Hajek,
}

/// Raw fraction of encounters with a measurement.
pub fn marginal_measured(all: &[Encounter]) -> Result<f64> {
    if all.is_empty() {
        return Err(invalid_input("cannot estimate the measured fraction of an empty cohort"));
    }
    Ok(all.iter().filter(|e| e.measured).count() as f64 / all.len() as f64)
}

/// Weights from a fitted model. `imputation_means`, when given, fills missing
/// covariates before prediction.
pub fn ipw_weights(
    observed: &[Encounter],
    model: &PropensityModel,
    imputation_means: Option<&[f64]>,
    marginal: f64,
) -> Result<WeightedCohort> {
    check_measured(observed)?;
    let props: Vec<f64> = observed
        .par_iter()
        .map(|e| match imputation_means {
            Some(m) => model.predict_proba(&impute(&e.covariates, m)),
            None => model.predict_proba(&e.covariates),
        })
        .collect::<Result<_>>()?;
    ipw_weights_from_propensities(observed, &props, Some(model.truncation()), marginal)
}

fn check_measured(observed: &[Encounter]) -> Result<()> {
    if let Some(e) = observed.iter().find(|e| !e.measured) {
        return Err(invalid_input(format!(
            "encounter {} is unmeasured; weights apply to observed encounters only",
            e.encounter_id
        )));
    }
    Ok(())
}

/// Weights from externally supplied propensities. With `truncation = None`
/// the probabilities are used as given and must lie in (0, 1].
pub fn ipw_weights_from_propensities(
    observed: &[Encounter],
    propensities: &[f64],
    truncation: Option<Truncation>,
    marginal: f64,
) -> Result<WeightedCohort> {
    check_measured(observed)?;
    if propensities.len() != observed.len() {
        return Err(invalid_input("one propensity per observed encounter is required"));
    }
    if !(marginal > 0.0 && marginal <= 1.0) {
        return Err(invalid_input(format!("marginal measured rate {marginal} outside (0, 1]")));
    }
    let pw = crate::cohort::per_patient_weight_vec(observed);
    let samples = observed
        .iter()
        .zip(propensities)
        .zip(pw)
        .map(|((e, &p), patient_weight)| {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid_input(format!("propensity {p} for {} outside [0, 1]", e.encounter_id)));
            }
            let p = match truncation {
                Some(t) => t.apply(p),
                None if p > 0.0 => p,
                None => {
                    return Err(invalid_input(format!(
                        "zero propensity for {} without truncation",
                        e.encounter_id
                    )))
                }
            };
            Ok(WeightedSample {
                encounter_id: e.encounter_id.clone(),
                propensity: p,
                ipw_weight: 1.0 / p,
                patient_weight,
            })
        })
        .collect::<Result<_>>()?;
    Ok(WeightedCohort {
        samples,
        marginal_measured: marginal,
    })
}

/// IPW estimate of a complete-population mean from observed-sample values.
pub fn ipw_expectation(f_values: &[f64], weights: &[f64], marginal: f64, mode: Estimator) -> Result<f64> {
    if f_values.is_empty() {
        return Err(invalid_input("IPW expectation of an empty sample"));
    }
    if f_values.len() != weights.len() {
        return Err(invalid_input("values and weights differ in length"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(invalid_input(format!("weights must be positive, got {w}")));
    }
    let weighted: NeumaierSum = f_values.iter().zip(weights).map(|(f, w)| f * w).collect();
    Ok(match mode {
        Estimator::HorvitzThompson => weighted.value() / f_values.len() as f64 * marginal,
        Estimator::Hajek => weighted.value() / weights.iter().copied().collect::<NeumaierSum>().value(),
    })
}

/// [`ipw_expectation`] over a [`WeightedCohort`] using its IPW weights.
pub fn cohort_expectation(f_values: &[f64], cohort: &WeightedCohort, mode: Estimator) -> Result<f64> {
    ipw_expectation(f_values, &cohort.ipw(), cohort.marginal_measured, mode)
}
