//! Probability-of-measurement model `p(m = 1 | z)`.
//!
//! The reference learner is L2-regularized logistic regression fitted by
//! damped Newton iterations; the regularization strength is picked by
//! stratified k-fold cross-validated AUPRC. Anything else that produces
//! probabilities can stand in for it through
//! [`crate::ipw::ipw_weights_from_propensities`].

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid_config, invalid_input, Result};
use crate::metrics::RankedScores;
use crate::rng::{domain, stream};
use crate::sum::NeumaierSum;

/// Clamp bounds applied to predicted propensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self { lo: 0.02, hi: 0.98 }
    }
}

impl Truncation {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return Err(invalid_config(format!(
                "truncation bounds must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, p: f64) -> f64 {
        p.clamp(self.lo, self.hi)
    }
}

pub fn truncate_proba(p: f64, lo: f64, hi: f64) -> Result<f64> {
    Ok(Truncation::new(lo, hi)?.apply(p))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Fitted logistic propensity model.
///
/// `coefficients[0]` is the intercept, followed by one weight per name in
/// `feature_names`. The JSON form is exactly these four fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub feature_names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub truncation_lo: f64,
    pub truncation_hi: f64,
}

impl PropensityModel {
    pub fn new(feature_names: Vec<String>, coefficients: Vec<f64>, truncation: Truncation) -> Result<Self> {
        let model = Self {
            feature_names,
            coefficients,
            truncation_lo: truncation.lo,
            truncation_hi: truncation.hi,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        Truncation::new(self.truncation_lo, self.truncation_hi)?;
        if self.coefficients.len() != self.feature_names.len() + 1 {
            return Err(invalid_input(format!(
                "{} coefficients for {} features (expected intercept + one per feature)",
                self.coefficients.len(),
                self.feature_names.len()
            )));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(invalid_input("coefficients must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn truncation(&self) -> Truncation {
        Truncation {
            lo: self.truncation_lo,
            hi: self.truncation_hi,
        }
    }

    fn linear(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(invalid_input(format!(
                "covariate vector has {} entries, model expects {}",
                z.len(),
                self.dim()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid_input("covariates must be finite (impute missing values first)"));
        }
        Ok(self.coefficients[0] + self.coefficients[1..].iter().zip(z).map(|(b, x)| b * x).sum::<f64>())
    }

    /// Untruncated `p(m = 1 | z)`, kept strictly inside (0, 1) even where
    /// the logistic rounds to an endpoint.
    pub fn predict_proba(&self, z: &[f64]) -> Result<f64> {
        self.linear(z).map(|x| sigmoid(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
    }

    /// Affine score `beta_0 + beta . z`.
    pub fn decision_function(&self, z: &[f64]) -> Result<f64> {
        self.linear(z)
    }

    pub fn predict_truncated(&self, z: &[f64]) -> Result<f64> {
        Ok(self.truncation().apply(self.predict_proba(z)?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

pub fn predict_proba(model: &PropensityModel, z: &[f64]) -> Result<f64> {
    model.predict_proba(z)
}

/// Row-major covariate matrix; missing entries are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(invalid_input("covariate rows differ in length"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of the selected rows with NaN entries replaced by `means`.
    fn imputed_subset(&self, indices: &[usize], means: &[f64]) -> Design {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend(self.row(i).iter().zip(means).map(|(v, m)| if v.is_nan() { *m } else { *v }));
        }
        Design {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy without column `col`.
    pub fn without_column(&self, col: usize) -> Design {
        let mut data = Vec::with_capacity(self.rows * (self.cols - 1));
        for i in 0..self.rows {
            let r = self.row(i);
            data.extend_from_slice(&r[..col]);
            data.extend_from_slice(&r[col + 1..]);
        }
        Design {
            rows: self.rows,
            cols: self.cols - 1,
            data,
        }
    }
}

/// Column means over the given rows, ignoring missing entries.
pub fn column_means(design: &Design, indices: &[usize]) -> Vec<f64> {
    let mut sums = vec![NeumaierSum::new(); design.cols];
    let mut counts = vec![0usize; design.cols];
    for &i in indices {
        for (j, v) in design.row(i).iter().enumerate() {
            if !v.is_nan() {
                sums[j].add(*v);
                counts[j] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s.value() / c as f64 })
        .collect()
}

/// Replaces missing entries of `row` with `means`.
pub fn impute(row: &[f64], means: &[f64]) -> Vec<f64> {
    row.iter().zip(means).map(|(v, m)| if v.is_nan() { *m } else { *v }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub max_iter: usize,
    /// Convergence threshold on the largest gradient entry, relative to the
    /// total sample weight.
    pub tolerance: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub l2_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub truncation: Truncation,
    pub settings: FitSettings,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            l2_grid: vec![0.01, 0.1, 1.0, 10.0],
            folds: 5,
            seed: 0,
            truncation: Truncation::default(),
            settings: FitSettings::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2_grid.is_empty() || self.l2_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(invalid_config("regularization grid must be nonempty and nonnegative"));
        }
        if self.folds < 2 {
            return Err(invalid_config("need at least 2 cross-validation folds"));
        }
        if self.settings.max_iter == 0 {
            return Err(invalid_config("max_iter must be positive"));
        }
        Truncation::new(self.truncation.lo, self.truncation.hi)?;
        Ok(())
    }
}

/// Result of a single penalized logistic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    /// Objective after each accepted iterate, starting from the zero vector.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

fn objective(design: &Design, y: &[bool], w: &[f64], beta: &[f64], l2: f64) -> f64 {
    let mut loss = NeumaierSum::new();
    for i in 0..design.rows {
        let eta = beta[0] + beta[1..].iter().zip(design.row(i)).map(|(b, x)| b * x).sum::<f64>();
        let yi = if y[i] { 1.0 } else { 0.0 };
        loss.add(w[i] * (softplus(eta) - yi * eta));
    }
    let penalty: f64 = beta[1..].iter().map(|b| b * b).sum();
    loss.value() + 0.5 * l2 * penalty
}

/// In-place Cholesky solve of `a x = b` for a small dense SPD matrix.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    true
}

/// Minimizes `sum_i w_i logloss_i + l2/2 |beta_{1..}|^2` by Newton steps with
/// backtracking, so the objective never increases between iterates.
pub fn fit_logistic(design: &Design, y: &[bool], weights: &[f64], l2: f64, settings: FitSettings) -> LogisticFit {
    let p = design.cols + 1;
    let mut beta = vec![0.0; p];
    let mut loss = objective(design, y, weights, &beta, l2);
    let mut history = vec![loss];
    let total_weight: f64 = weights.iter().sum();
    let mut converged = false;

    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let mut x = vec![0.0; p];
    for _ in 0..settings.max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        x[0] = 1.0;
        for i in 0..design.rows {
            x[1..].copy_from_slice(design.row(i));
            let eta: f64 = beta.iter().zip(&x).map(|(b, v)| b * v).sum();
            let mu = sigmoid(eta);
            let yi = if y[i] { 1.0 } else { 0.0 };
            let r = weights[i] * (mu - yi);
            let c = weights[i] * mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += r * x[a];
                let cx = c * x[a];
                for b in 0..=a {
                    hess[a * p + b] += cx * x[b];
                }
            }
        }
        for a in 1..p {
            grad[a] += l2 * beta[a];
            hess[a * p + a] += l2;
        }
        for a in 0..p {
            for b in 0..a {
                hess[b * p + a] = hess[a * p + b];
            }
        }
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax <= settings.tolerance * total_weight.max(1.0) {
            converged = true;
            break;
        }

        let mut step = grad.clone();
        let mut jitter = 0.0;
        loop {
            let mut h = hess.clone();
            for a in 0..p {
                h[a * p + a] += jitter;
            }
            step.copy_from_slice(&grad);
            if cholesky_solve(&mut h, &mut step, p) {
                break;
            }
            jitter = if jitter == 0.0 { 1e-10 * total_weight.max(1.0) } else { jitter * 10.0 };
        }

        let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
            let cand_loss = objective(design, y, weights, &candidate, l2);
            if cand_loss <= loss - 1e-4 * t * slope {
                accepted = Some((candidate, cand_loss));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, cand_loss)) = accepted else {
            // no descent left at floating-point resolution
            converged = true;
            break;
        };
        let improvement = loss - cand_loss;
        beta = candidate;
        loss = cand_loss;
        history.push(loss);
        if improvement <= 1e-15 * loss.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    LogisticFit {
        coefficients: beta,
        loss_history: history,
        converged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvScore {
    pub l2: f64,
    pub mean_auprc: Option<f64>,
    pub fold_auprc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub model: PropensityModel,
    /// Means used to impute missing covariates, learned on all training rows.
    pub imputation_means: Vec<f64>,
    pub selected_l2: f64,
    pub cv: Vec<CvScore>,
    /// Objective trace of the final refit.
    pub loss_history: Vec<f64>,
}

impl PropensityFit {
    /// Truncated propensity for a raw (possibly incomplete) covariate row.
    pub fn predict_truncated(&self, row: &[f64]) -> Result<f64> {
        self.model.predict_truncated(&impute(row, &self.imputation_means))
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        self.model.predict_proba(&impute(row, &self.imputation_means))
    }
}

/// Stratified fold assignment, deterministic in `seed`.
fn assign_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, domain::FOLDS, 0);
    let mut assignment = vec![0usize; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

fn weighted_auprc(scores: &[f64], labels: &[bool], weights: &[f64]) -> Option<f64> {
    RankedScores::new(scores, labels).ok()?.curve(weights).auprc().ok()
}

/// Fits the propensity model, choosing the L2 strength with the best mean
/// cross-validated AUPRC and refitting on all rows.
///
/// Missing covariates (NaN) are mean-imputed with means from each training
/// fold only.
pub fn fit_propensity(
    covariates: &Design,
    measured: &[bool],
    sample_weights: Option<&[f64]>,
    feature_names: &[String],
    config: &FitConfig,
) -> Result<PropensityFit> {
    config.validate()?;
    let n = covariates.rows();
    if measured.len() != n {
        return Err(invalid_input("measured flags and covariate rows differ in length"));
    }
    if feature_names.len() != covariates.cols() {
        return Err(invalid_input("feature names do not match covariate columns"));
    }
    let unit;
    let weights = match sample_weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return Err(invalid_input("sample weights must be positive and align with rows"));
            }
            w
        }
        None => {
            unit = vec![1.0; n];
            &unit[..]
        }
    };
    let positives = measured.iter().filter(|m| **m).count();
    if positives < 2 || n - positives < 2 {
        return Err(degenerate(format!(
            "need at least 2 measured and 2 unmeasured rows, got {positives} and {}",
            n - positives
        )));
    }

    let fold_of = assign_folds(measured, config.folds, config.seed);
    let per_fold: Vec<Vec<Option<f64>>> = (0..config.folds)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let valid: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
            let means = column_means(covariates, &train);
            let xt = covariates.imputed_subset(&train, &means);
            let xv = covariates.imputed_subset(&valid, &means);
            let yt: Vec<bool> = train.iter().map(|&i| measured[i]).collect();
            let wt: Vec<f64> = train.iter().map(|&i| weights[i]).collect();
            let yv: Vec<bool> = valid.iter().map(|&i| measured[i]).collect();
            let wv: Vec<f64> = valid.iter().map(|&i| weights[i]).collect();
            config
                .l2_grid
                .iter()
                .map(|&l2| {
                    let fit = fit_logistic(&xt, &yt, &wt, l2, config.settings);
                    let scores: Vec<f64> = (0..xv.rows())
                        .map(|i| {
                            let row = xv.row(i);
                            fit.coefficients[0]
                                + fit.coefficients[1..].iter().zip(row).map(|(b, x)| b * x).sum::<f64>()
                        })
                        .collect();
                    weighted_auprc(&scores, &yv, &wv)
                })
                .collect()
        })
        .collect();

    let cv: Vec<CvScore> = config
        .l2_grid
        .iter()
        .enumerate()
        .map(|(g, &l2)| {
            let fold_auprc: Vec<Option<f64>> = per_fold.iter().map(|f| f[g]).collect();
            let defined: Vec<f64> = fold_auprc.iter().flatten().copied().collect();
            let mean_auprc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
            CvScore { l2, mean_auprc, fold_auprc }
        })
        .collect();
    let best = cv
        .iter()
        .filter_map(|c| c.mean_auprc.map(|m| (c.l2, m)))
        .fold(None::<(f64, f64)>, |acc, (l2, m)| match acc {
            Some((_, bm)) if bm >= m => acc,
            _ => Some((l2, m)),
        })
        .ok_or_else(|| degenerate("no cross-validation fold had a measured validation row"))?;

    let all: Vec<usize> = (0..n).collect();
    let means = column_means(covariates, &all);
    let x = covariates.imputed_subset(&all, &means);
    let fit = fit_logistic(&x, measured, weights, best.0, config.settings);
    let model = PropensityModel::new(feature_names.to_vec(), fit.coefficients, config.truncation)?;
    Ok(PropensityFit {
        model,
        imputation_means: means,
        selected_l2: best.0,
        cv,
        loss_history: fit.loss_history,
    })
}

/// Reliability table with expected calibration error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub bin_edges: Vec<f64>,
    /// `None` for empty bins.
    pub bin_mean_predicted: Vec<Option<f64>>,
    pub bin_observed_rate: Vec<Option<f64>>,
    pub bin_counts: Vec<usize>,
    pub ece: f64,
}

/// Equal-width calibration bins on [0, 1]; `ece = sum_b (n_b / N) |mean_pred_b - rate_b|`.
pub fn calibration(predictions: &[f64], labels: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    if predictions.is_empty() {
        return Err(invalid_input("calibration needs at least one prediction"));
    }
    if predictions.len() != labels.len() {
        return Err(invalid_input("predictions and labels differ in length"));
    }
    if n_bins == 0 {
        return Err(invalid_input("need at least one calibration bin"));
    }
    if let Some(p) = predictions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid_input(format!("prediction {p} outside [0, 1]")));
    }
    let mut pred_sum = vec![NeumaierSum::new(); n_bins];
    let mut pos = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&p, &y) in predictions.iter().zip(labels) {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        pred_sum[b].add(p);
        counts[b] += 1;
        pos[b] += usize::from(y);
    }
    let total = predictions.len() as f64;
    let mut ece = NeumaierSum::new();
    let mut mean_pred = Vec::with_capacity(n_bins);
    let mut rate = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        if counts[b] == 0 {
            mean_pred.push(None);
            rate.push(None);
            continue;
        }
        let c = counts[b] as f64;
        let (m, r) = (pred_sum[b].value() / c, pos[b] as f64 / c);
        ece.add(c / total * (m - r).abs());
        mean_pred.push(Some(m));
        rate.push(Some(r));
    }
    Ok(CalibrationReport {
        bin_edges: (0..=n_bins).map(|b| b as f64 / n_bins as f64).collect(),
        bin_mean_predicted: mean_pred,
        bin_observed_rate: rate,
        bin_counts: counts,
        ece: ece.value(),
    })
}
