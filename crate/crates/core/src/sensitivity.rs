//! Worst-case reweighting against a focal model.
//!
//! Encounters the focal model gets wrong are up-weighted by `gamma` and the
//! ones it gets right are down-weighted by `1 / gamma`. Predictions are fixed
//! before the sweep; only weights move. The crossing `gamma` is where the
//! focal model's F1 advantage over the baseline disappears.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::cohort::Encounter;
use crate::error::{invalid_input, Result};
use crate::ipw::{ipw_weights_from_propensities, marginal_measured};
use crate::metrics::confusion_of_predictions;
use crate::propensity::{fit_propensity, Design, FitConfig};

pub const BISECTION_TOLERANCE: f64 = 1e-4;

/// 1.0, 1.05, ..., 2.0.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=20).map(|i| 1.0 + f64::from(i) * 0.05).collect()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(invalid_input(format!("gamma must be finite and at least 1, got {gamma}")));
    }
    Ok(())
}

pub fn adversarial_weights(base: &[f64], focal_correct: &[bool], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if base.len() != focal_correct.len() {
        return Err(invalid_input("weights and correctness flags differ in length"));
    }
    Ok(base
        .iter()
        .zip(focal_correct)
        .map(|(&w, &ok)| if ok { w / gamma } else { w * gamma })
        .collect())
}

/// Fixed binary predictions of both models plus the evaluation sample.
#[derive(Debug, Clone, Copy)]
pub struct SweepInput<'a> {
    pub focal: &'a [bool],
    pub baseline: &'a [bool],
    pub labels: &'a [bool],
    pub weights: &'a [f64],
}

impl SweepInput<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.focal.len() != n || self.baseline.len() != n || self.weights.len() != n {
            return Err(invalid_input("sensitivity inputs differ in length"));
        }
        if n == 0 {
            return Err(invalid_input("sensitivity sweep on an empty sample"));
        }
        Ok(())
    }

    fn correct(&self) -> Vec<bool> {
        self.focal.iter().zip(self.labels).map(|(p, l)| p == l).collect()
    }

    /// Both F1 scores at `gamma`.
    pub fn f1_at(&self, gamma: f64) -> Result<F1Pair> {
        self.validate()?;
        let w = adversarial_weights(self.weights, &self.correct(), gamma)?;
        Ok(self.f1_with(&w))
    }

    fn f1_with(&self, weights: &[f64]) -> F1Pair {
        F1Pair {
            focal: confusion_of_predictions(self.focal, self.labels, weights).rates().f1,
            baseline: confusion_of_predictions(self.baseline, self.labels, weights).rates().f1,
        }
    }
}

pub fn predictions(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Pair {
    pub focal: Option<f64>,
    pub baseline: Option<f64>,
}

impl F1Pair {
    pub fn difference(&self) -> Option<f64> {
        Some(self.focal? - self.baseline?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityResult {
    pub gamma_grid: Vec<f64>,
    pub f1_focal: Vec<Option<f64>>,
    pub f1_baseline: Vec<Option<f64>>,
    /// Smallest gamma at which the focal F1 no longer exceeds the baseline's.
    pub crossing_gamma: Option<f64>,
    pub context: BTreeMap<String, F1Pair>,
}

/// Evaluates both F1 scores across `grid` and locates the crossing.
///
/// The crossing is the first grid point whose difference is `<= 0`; when
/// `refine` is set and an earlier grid point has a positive difference, it is
/// narrowed by bisection to [`BISECTION_TOLERANCE`].
pub fn sensitivity_sweep(input: &SweepInput<'_>, grid: &[f64], refine: bool) -> Result<SensitivityResult> {
    input.validate()?;
    if grid.is_empty() {
        return Err(invalid_input("gamma grid is empty"));
    }
    for &g in grid {
        check_gamma(g)?;
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid_input("gamma grid must be strictly increasing"));
    }
    let correct = input.correct();
    let eval = |g: f64| -> F1Pair {
        let w: Vec<f64> = input
            .weights
            .iter()
            .zip(&correct)
            .map(|(&w, &ok)| if ok { w / g } else { w * g })
            .collect();
        input.f1_with(&w)
    };
    let pairs: Vec<F1Pair> = grid.par_iter().map(|&g| eval(g)).collect();
    let crossed = |p: &F1Pair| p.difference().is_some_and(|d| d <= 0.0);
    let crossing_gamma = pairs.iter().position(crossed).map(|k| {
        if k == 0 || !refine {
            return grid[k];
        }
        let (mut lo, mut hi) = (grid[k - 1], grid[k]);
        while hi - lo > BISECTION_TOLERANCE {
            let mid = 0.5 * (lo + hi);
            if crossed(&eval(mid)) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    });
    Ok(SensitivityResult {
        gamma_grid: grid.to_vec(),
        f1_focal: pairs.iter().map(|p| p.focal).collect(),
        f1_baseline: pairs.iter().map(|p| p.baseline).collect(),
        crossing_gamma,
        context: BTreeMap::new(),
    })
}

/// What the propensity model was trained on, for refitting variants.
#[derive(Debug, Clone, Copy)]
pub struct PropensitySpec<'a> {
    /// Every encounter the propensity is trained on, measured or not.
    pub population: &'a [Encounter],
    pub feature_names: &'a [String],
    pub fit: &'a FitConfig,
    pub use_patient_weights: bool,
}

/// Re-evaluates both F1 scores (a) with a propensity refitted without the
/// `age` covariate and (b) with all weights set to one.
///
/// `evaluated` must be measured encounters aligned with the predictions.
pub fn context_checks(
    evaluated: &[Encounter],
    focal: &[bool],
    baseline: &[bool],
    spec: &PropensitySpec<'_>,
) -> Result<BTreeMap<String, F1Pair>> {
    let labels: Vec<bool> = evaluated
        .iter()
        .map(|e| e.is_positive().ok_or_else(|| invalid_input(format!("{} has no outcome", e.encounter_id))))
        .collect::<Result<_>>()?;
    let ones = vec![1.0; evaluated.len()];
    let unweighted = SweepInput {
        focal,
        baseline,
        labels: &labels,
        weights: &ones,
    };
    let mut out = BTreeMap::new();
    out.insert("unweighted".to_string(), unweighted.f1_at(1.0)?);

    match spec.feature_names.iter().position(|n| n == "age") {
        None => warn!("no covariate named \"age\"; skipping the drop_age context check"),
        Some(age) => {
            let rows: Vec<Vec<f64>> = spec.population.iter().map(|e| e.covariates.clone()).collect();
            let design = Design::from_rows(&rows)?.without_column(age);
            let names: Vec<String> = spec
                .feature_names
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != age)
                .map(|(_, n)| n.clone())
                .collect();
            let measured: Vec<bool> = spec.population.iter().map(|e| e.measured).collect();
            let pw = spec
                .use_patient_weights
                .then(|| crate::cohort::per_patient_weight_vec(spec.population));
            let fit = fit_propensity(&design, &measured, pw.as_deref(), &names, spec.fit)?;
            let props: Vec<f64> = evaluated
                .iter()
                .map(|e| {
                    let mut z = e.covariates.clone();
                    z.remove(age);
                    fit.predict_proba(&z)
                })
                .collect::<Result<_>>()?;
            let marginal = marginal_measured(spec.population)?;
            let weighted = ipw_weights_from_propensities(evaluated, &props, Some(fit.model.truncation()), marginal)?;
            let w = weighted.ipw();
            let input = SweepInput {
                focal,
                baseline,
                labels: &labels,
                weights: &w,
            };
            out.insert("drop_age".to_string(), input.f1_at(1.0)?);
        }
    }
    Ok(out)
}
