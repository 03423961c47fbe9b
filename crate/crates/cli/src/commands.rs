use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ipweval::cohort::{filter_new_onset, Cohort, Encounter};
use ipweval::inference::BootstrapConfig;
use ipweval::io;
use ipweval::ipw::ipw_weights_from_propensities;
use ipweval::pipeline::{
    self, fit_candidates, propensity_calibration, sensitivity_analysis, survival_analysis, weight_observed,
    EvaluateConfig, PropensitySource, SensitivityConfig, SurvivalConfig,
};
use ipweval::propensity::{FitConfig, FitSettings, Truncation};
use ipweval::simulator::{generate, SimConfig};
use serde::Serialize;
use serde_json::Value;

use crate::error::{io_error, CliError};
use crate::output::{file_stem, json_bytes, Artifacts, Envelope};
use crate::settings::{parse_bool, parse_levels, parse_list, parse_truncation, Settings};

const DEFAULT_TRUNCATION: &str = "0.02,0.98";
/// Two-sided 95% normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

fn read_cohort(path: &Path) -> Result<Cohort, CliError> {
    let f = File::open(path).map_err(|e| io_error(path, e))?;
    io::read_cohort(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require_scores<'a>(cohort: &Cohort, models: impl IntoIterator<Item = &'a String>) -> Result<(), CliError> {
    for m in models {
        if !cohort.score_names.contains(m) {
            return Err(CliError::Usage(format!("cohort has no score column score_{m}")));
        }
    }
    Ok(())
}

fn string_list(raw: &str) -> Result<Vec<String>, String> {
    let v: Vec<String> = parse_list(raw)?;
    if v.is_empty() {
        return Err("empty list".into());
    }
    Ok(v)
}

fn render_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Stands in for "no truncation" where a model must carry bounds; predictions
/// already lie strictly inside them.
fn untruncated() -> Truncation {
    Truncation::new(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0).expect("valid bounds")
}

fn fit_config(s: &mut Settings, seed: u64, truncation: Option<Truncation>) -> Result<FitConfig, CliError> {
    let defaults = FitConfig::default();
    let l2_grid = s.get_with("l2_grid", &render_list(&defaults.l2_grid), parse_list::<f64>)?;
    let folds = s.get("folds", defaults.folds)?;
    let cfg = FitConfig {
        l2_grid,
        folds,
        seed,
        truncation: truncation.unwrap_or_else(untruncated),
        settings: FitSettings::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

enum SourceKind {
    Fit,
    Column,
    Truth,
}

struct SourcePlan {
    kind: SourceKind,
    file: PathBuf,
    column: String,
}

fn source_plan(s: &mut Settings, input: &Path) -> Result<SourcePlan, CliError> {
    let kind = s.get_with("propensity", "fit", |v| match v {
        "fit" => Ok(SourceKind::Fit),
        "column" => Ok(SourceKind::Column),
        "truth" => Ok(SourceKind::Truth),
        other => Err(format!("expected fit, column or truth, got {other:?}")),
    })?;
    let (file, column) = match kind {
        SourceKind::Fit => (input.to_path_buf(), String::new()),
        SourceKind::Column => (
            s.get("propensity_file", input.display().to_string())?.into(),
            s.get("propensity_column", "propensity".to_string())?,
        ),
        SourceKind::Truth => (
            s.required::<String>("propensity_file")?.into(),
            s.get("propensity_column", "true_propensity".to_string())?,
        ),
    };
    Ok(SourcePlan { kind, file, column })
}

impl SourcePlan {
    fn resolve(&self, fit: FitConfig) -> Result<PropensitySource, CliError> {
        let label = match self.kind {
            SourceKind::Fit => return Ok(PropensitySource::Fit(fit)),
            SourceKind::Column => format!("column:{}", self.column),
            SourceKind::Truth => "truth".to_string(),
        };
        let f = File::open(&self.file).map_err(|e| io_error(&self.file, e))?;
        let values = io::read_keyed_column(BufReader::new(f), &self.column)
            .map_err(|e| CliError::Data(format!("{}: {e}", self.file.display())))?;
        Ok(PropensitySource::Given { label, values })
    }
}

#[derive(Serialize)]
struct WithArtifacts<T: Serialize> {
    #[serde(flatten)]
    body: T,
    artifacts: BTreeMap<String, String>,
}

fn finish_report<T: Serialize>(
    mut files: Artifacts,
    report_name: &str,
    command: &str,
    s: &Settings,
    seed: Option<u64>,
    body: T,
    out: &Path,
) -> Result<(), CliError> {
    let body = WithArtifacts {
        body,
        artifacts: files.digests(),
    };
    files.add(report_name, json_bytes(&Envelope::new(command, s, seed, body))?);
    files.write_to(out)?;
    Ok(())
}

pub fn simulate(mut s: Settings, out: &Path) -> Result<(), CliError> {
    let d = SimConfig::default();
    let auc_default = d
        .model_auc_targets
        .iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join(",");
    let cfg = SimConfig {
        n_patients: s.get("n_patients", d.n_patients)?,
        covariate_dim: s.get("covariate_dim", d.covariate_dim)?,
        max_encounters_per_patient: s.get("max_encounters_per_patient", d.max_encounters_per_patient)?,
        prevalence_target: s.get("prevalence_target", d.prevalence_target)?,
        observed_rate_target: s.get("observed_rate_target", d.observed_rate_target)?,
        model_auc_targets: s.get_with("model_auc_targets", &auc_default, |raw| {
            string_list(raw)?
                .iter()
                .map(|pair| {
                    let (k, v) = pair.split_once(':').ok_or_else(|| format!("expected model:auc, got {pair:?}"))?;
                    let v: f64 = v.trim().parse().map_err(|e| format!("{v:?}: {e}"))?;
                    Ok((k.trim().to_string(), v))
                })
                .collect()
        })?,
        ordinal_models: s.get_with("ordinal_models", &d.ordinal_models.join(","), |raw| {
            parse_list::<String>(raw)
        })?,
        missingness_outcome_corr: s.get("missingness_outcome_corr", d.missingness_outcome_corr)?,
        onset_rate_high: s.get("onset_rate_high", d.onset_rate_high)?,
        onset_rate_low: s.get("onset_rate_low", d.onset_rate_low)?,
        seed: s.get("seed", d.seed)?,
    };
    s.finish("simulate")?;
    cfg.validate()?;
    for m in &cfg.ordinal_models {
        if !cfg.model_auc_targets.contains_key(m) {
            return Err(CliError::Usage(format!("ordinal model {m} has no AUC target")));
        }
    }
    let pop = generate(&cfg)?;
    let cohort = pop.masked_cohort();
    let mut files = Artifacts::default();
    files.render("cohort.csv", |b| io::write_cohort(&cohort, b))?;
    files.render("truth.csv", |b| io::write_truth(&pop, b))?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        n_patients: usize,
        n_encounters: usize,
        n_observed: usize,
        covariates: &'a [String],
        models: &'a [String],
        calibration: &'a ipweval::simulator::SimCalibration,
    }
    let body = Manifest {
        n_patients: cfg.n_patients,
        n_encounters: pop.encounters.len(),
        n_observed: pop.observed_mask.iter().filter(|m| **m).count(),
        covariates: &pop.covariate_names,
        models: &pop.score_names,
        calibration: &pop.calibration,
    };
    finish_report(files, "manifest.json", "simulate", &s, Some(cfg.seed), body, out)
}

pub fn fit_propensity(mut s: Settings, out: &Path) -> Result<(), CliError> {
    let input: PathBuf = s.required::<String>("input")?.into();
    let seed = s.get("seed", 0u64)?;
    let truncation = s.get_with("truncate", DEFAULT_TRUNCATION, parse_truncation)?;
    let fit_cfg = fit_config(&mut s, seed, truncation)?;
    let bins = s.get("calibration_bins", 10usize)?;
    s.finish("fit-propensity")?;
    if bins == 0 {
        return Err(CliError::Usage("calibration_bins must be at least 1".into()));
    }

    let cohort = read_cohort(&input)?;
    let (candidates, fit) = fit_candidates(&cohort, &fit_cfg)?;
    let calibration = propensity_calibration(&candidates, &fit, bins)?;
    let observed: Vec<Encounter> = candidates.iter().filter(|e| e.measured).cloned().collect();
    let props: Vec<f64> = observed
        .iter()
        .map(|e| fit.predict_proba(&e.covariates))
        .collect::<ipweval::Result<_>>()?;
    let marginal = observed.len() as f64 / candidates.len() as f64;
    let weights = ipw_weights_from_propensities(&observed, &props, truncation, marginal)?;

    let mut files = Artifacts::default();
    let mut model_json = fit.model.to_json()?.into_bytes();
    model_json.push(b'\n');
    files.add("propensity.json", model_json);
    files.render("weights.csv", |b| io::write_weights(&weights, b))?;

    #[derive(Serialize)]
    struct FitReport<'a> {
        n_candidates: usize,
        n_measured: usize,
        marginal_measured: f64,
        feature_names: &'a [String],
        selected_l2: f64,
        cv: &'a [ipweval::propensity::CvScore],
        coefficients: &'a [f64],
        imputation_means: &'a [f64],
        loss_history: &'a [f64],
        calibration: &'a ipweval::propensity::CalibrationReport,
    }
    let body = FitReport {
        n_candidates: candidates.len(),
        n_measured: observed.len(),
        marginal_measured: marginal,
        feature_names: &fit.model.feature_names,
        selected_l2: fit.selected_l2,
        cv: &fit.cv,
        coefficients: &fit.model.coefficients,
        imputation_means: &fit.imputation_means,
        loss_history: &fit.loss_history,
        calibration: &calibration,
    };
    finish_report(files, "fit_report.json", "fit-propensity", &s, Some(seed), body, out)
}

pub fn evaluate(mut s: Settings, out: &Path) -> Result<(), CliError> {
    let input: PathBuf = s.required::<String>("input")?.into();
    let seed = s.get("seed", 0u64)?;
    let defaults = EvaluateConfig::default();
    let rounds = s.get("rounds", defaults.bootstrap.rounds)?;
    let alpha = s.get("alpha", defaults.bootstrap.alpha)?;
    let levels = s.get_with("levels", "1..7", parse_levels)?;
    let models = s.optional::<String>("models")?;
    let baseline = s.get("baseline", defaults.baseline.clone())?;
    let cluster_bootstrap = s.get_with("cluster_bootstrap", "false", parse_bool)?;
    let yield_level = s.get("yield_level", defaults.yield_level)?;
    let truncation = s.get_with("truncate", DEFAULT_TRUNCATION, parse_truncation)?;
    let plan = source_plan(&mut s, &input)?;
    let fit_cfg = fit_config(&mut s, seed, truncation)?;
    s.finish("evaluate")?;
    let models = models
        .map(|m| string_list(&m).map_err(|e| CliError::Usage(format!("invalid value for models: {e}"))))
        .transpose()?;
    let bootstrap = BootstrapConfig { rounds, alpha, seed };
    bootstrap.validate()?;

    let cohort = read_cohort(&input)?;
    let models = match models {
        Some(m) => m,
        None => {
            s.note("models", cohort.score_names.join(","));
            cohort.score_names.clone()
        }
    };
    let cfg = EvaluateConfig {
        models,
        baseline,
        levels,
        bootstrap,
        cluster_bootstrap,
        yield_level,
    };
    cfg.validate()?;
    require_scores(&cohort, cfg.models.iter().chain([&cfg.baseline]))?;

    let source = plan.resolve(fit_cfg)?;
    let weighting = weight_observed(&cohort, &source, truncation)?;
    let mut output = pipeline::evaluate(&weighting, &cfg)?;
    output.report.propensity_source = source.label().to_string();

    let mut files = Artifacts::default();
    files.render("weights.csv", |b| io::write_weights(&weighting.weights, b))?;
    for (model, roc, prc) in &output.curves {
        let stem = file_stem(model);
        files.render(format!("roc_{stem}.csv"), |b| io::write_roc(roc, b))?;
        files.render(format!("prc_{stem}.csv"), |b| io::write_prc(prc, b))?;
    }
    finish_report(files, "report.json", "evaluate", &s, Some(seed), &output.report, out)
}

pub fn sensitivity(mut s: Settings, out: &Path) -> Result<(), CliError> {
    let input: PathBuf = s.required::<String>("input")?.into();
    let seed = s.get("seed", 0u64)?;
    let d = SensitivityConfig::default();
    let focal = s.get("focal", d.focal.clone())?;
    let baseline = s.get("baseline", d.baseline.clone())?;
    let level = s.get("level", d.level)?;
    let gamma_grid = s.get_with("gamma_grid", &render_list(&d.gamma_grid), parse_list::<f64>)?;
    let refine = s.get_with("refine", "true", parse_bool)?;
    let truncation = s.get_with("truncate", DEFAULT_TRUNCATION, parse_truncation)?;
    let plan = source_plan(&mut s, &input)?;
    let fit_cfg = fit_config(&mut s, seed, truncation)?;
    s.finish("sensitivity")?;
    if gamma_grid.is_empty() {
        return Err(CliError::Usage("gamma_grid must not be empty".into()));
    }
    if let Some(g) = gamma_grid.iter().find(|g| !(**g >= 1.0 && g.is_finite())) {
        return Err(CliError::Usage(format!("gamma values must be finite and at least 1, got {g}")));
    }

    let cohort = read_cohort(&input)?;
    require_scores(&cohort, [&focal, &baseline])?;
    let source = plan.resolve(fit_cfg.clone())?;
    let weighting = weight_observed(&cohort, &source, truncation)?;
    let cfg = SensitivityConfig {
        focal,
        baseline,
        level,
        gamma_grid,
        refine,
        fit: fit_cfg,
    };
    let report = sensitivity_analysis(&weighting, &cohort.covariate_names, &cfg)?;

    #[derive(Serialize)]
    struct Body<'a> {
        propensity_source: &'a str,
        #[serde(flatten)]
        report: &'a pipeline::SensitivityReport,
    }
    let mut files = Artifacts::default();
    files.render("sensitivity.csv", |b| io::write_sweep(&report.result, b))?;
    let body = Body {
        propensity_source: source.label(),
        report: &report,
    };
    finish_report(files, "sensitivity.json", "sensitivity", &s, Some(seed), body, out)
}

/// Matched threshold of `model` at `level` from an evaluate report.
fn threshold_from_report(path: &Path, model: &str, level: i32) -> Result<f64, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let not_found = || CliError::Data(format!("{} has no matched threshold for {model} at level {level}", path.display()));
    v.get("matched")
        .and_then(Value::as_array)
        .and_then(|levels| levels.iter().find(|r| r.get("level").and_then(Value::as_i64) == Some(i64::from(level))))
        .and_then(|r| r.get("rows").and_then(Value::as_array))
        .and_then(|rows| rows.iter().find(|r| r.get("model").and_then(Value::as_str) == Some(model)))
        .and_then(|r| r.get("threshold").and_then(Value::as_f64))
        .ok_or_else(not_found)
}

pub fn survival(mut s: Settings, out: &Path) -> Result<(), CliError> {
    let input: PathBuf = s.required::<String>("input")?.into();
    let model = s.get("model", "ecg".to_string())?;
    let threshold = s.optional::<f64>("threshold")?;
    let threshold_from = s.optional::<String>("threshold_from")?;
    let level = s.get("level", 5i32)?;
    let baseline = s.get("baseline", "ada".to_string())?;
    let horizon = s.get("horizon", ipweval::simulator::FOLLOW_UP_DAYS)?;
    let z_alpha = s.get("z_alpha", Z_95)?;
    s.finish("survival")?;
    let threshold = match (threshold, threshold_from) {
        (Some(t), None) => t,
        (None, Some(p)) => threshold_from_report(Path::new(&p), &model, level)?,
        _ => return Err(CliError::Usage("give exactly one of threshold or threshold_from".into())),
    };
    if !threshold.is_finite() {
        return Err(CliError::Usage("threshold must be finite".into()));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(CliError::Usage("horizon must be a nonnegative number of days".into()));
    }
    if !(z_alpha > 0.0 && z_alpha.is_finite()) {
        return Err(CliError::Usage("z_alpha must be positive".into()));
    }

    let cohort = read_cohort(&input)?;
    let baseline = (baseline != "none").then_some(baseline);
    require_scores(&cohort, std::iter::once(&model).chain(baseline.as_ref()))?;
    if filter_new_onset(&cohort.encounters).is_empty() {
        return Err(CliError::Data("no encounters without prior diabetes".into()));
    }
    let cfg = SurvivalConfig {
        model,
        threshold,
        baseline: baseline.map(|b| (b, level)),
        horizon_days: horizon,
        z_alpha,
    };
    let output = survival_analysis(&cohort, &cfg)?;
    let curves: Vec<(&str, &ipweval::survival::KMCurve)> =
        output.curves.iter().map(|(n, c)| (n.as_str(), c)).collect();
    let mut files = Artifacts::default();
    files.render("km.csv", |b| io::write_km(&curves, b))?;
    finish_report(files, "survival.json", "survival", &s, None, &output.report, out)
}
