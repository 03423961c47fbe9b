//! CSV reading and writing.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use csv::{ReaderBuilder, StringRecord, WriterBuilder};

use crate::cohort::{Cohort, Encounter};
use crate::error::{invalid_input, Result};
use crate::ipw::WeightedCohort;
use crate::metrics::{PrCurve, RocCurve};
use crate::sensitivity::SensitivityResult;
use crate::simulator::SimPopulation;
use crate::survival::KMCurve;

const FIXED_HEAD: [&str; 7] = [
    "patient_id",
    "encounter_id",
    "timestamp",
    "age",
    "measured",
    "hba1c",
    "prior_diabetes",
];

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn float_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn write_cohort<W: Write>(cohort: &Cohort, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    let mut header: Vec<String> = FIXED_HEAD.iter().map(|s| s.to_string()).collect();
    header.extend(cohort.covariate_names.iter().map(|n| format!("cov_{n}")));
    header.extend(cohort.score_names.iter().map(|n| format!("score_{n}")));
    header.push("time_to_event".into());
    header.push("event".into());
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for e in &cohort.encounters {
        row.clear();
        row.push(e.patient_id.clone());
        row.push(e.encounter_id.clone());
        row.push(e.timestamp.to_string());
        row.push(e.age.to_string());
        row.push(flag(e.measured).into());
        row.push(opt_f64(e.outcome_hba1c));
        row.push(flag(e.prior_diabetes).into());
        if e.covariates.len() != cohort.covariate_names.len() {
            return Err(invalid_input(format!("encounter {} has the wrong covariate count", e.encounter_id)));
        }
        row.extend(e.covariates.iter().map(|&v| float_cell(v)));
        for name in &cohort.score_names {
            let s = e
                .score(name)
                .ok_or_else(|| invalid_input(format!("encounter {} lacks score {name}", e.encounter_id)))?;
            row.push(s.to_string());
        }
        row.push(opt_f64(e.time_to_event));
        row.push(e.event.map(|b| flag(b).to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(field: &str, column: &str, line: u64) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| invalid_input(format!("line {line}: column {column}: not a number: {field:?}")))
}

fn parse_opt_f64(field: &str, column: &str, line: u64) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(field, column, line).map(Some)
    }
}

fn parse_flag(field: &str, column: &str, line: u64) -> Result<Option<bool>> {
    match field.trim() {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(invalid_input(format!("line {line}: column {column}: expected 0 or 1, got {other:?}"))),
    }
}

struct Layout {
    fixed: [usize; 7],
    covariates: Vec<(String, usize)>,
    scores: Vec<(String, usize)>,
    time_to_event: Option<usize>,
    event: Option<usize>,
}

impl Layout {
    fn from_header(header: &StringRecord) -> Result<Self> {
        let find = |name: &str| header.iter().position(|h| h == name);
        let mut fixed = [0; 7];
        for (slot, name) in fixed.iter_mut().zip(FIXED_HEAD) {
            *slot = find(name).ok_or_else(|| invalid_input(format!("cohort CSV lacks column {name}")))?;
        }
        let prefixed = |prefix: &str| -> Vec<(String, usize)> {
            header
                .iter()
                .enumerate()
                .filter_map(|(i, h)| h.strip_prefix(prefix).map(|n| (n.to_string(), i)))
                .collect()
        };
        Ok(Self {
            fixed,
            covariates: prefixed("cov_"),
            scores: prefixed("score_"),
            time_to_event: find("time_to_event"),
            event: find("event"),
        })
    }
}

pub fn read_cohort<R: Read>(input: R) -> Result<Cohort> {
    let mut reader = ReaderBuilder::new().has_headers(true).from_reader(input);
    let layout = Layout::from_header(reader.headers()?)?;
    let mut encounters = Vec::new();
    let mut record = StringRecord::new();
    while reader.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let get = |i: usize| record.get(i).unwrap_or("");
        let [pid, eid, ts, age, measured, hba1c, prior] = layout.fixed;
        let mut e = Encounter {
            patient_id: get(pid).to_string(),
            encounter_id: get(eid).to_string(),
            timestamp: get(ts)
                .trim()
                .parse()
                .map_err(|_| invalid_input(format!("line {line}: column timestamp: not an integer")))?,
            age: parse_f64(get(age), "age", line)?,
            covariates: layout
                .covariates
                .iter()
                .map(|(n, i)| Ok(parse_opt_f64(get(*i), n, line)?.unwrap_or(f64::NAN)))
                .collect::<Result<_>>()?,
            outcome_hba1c: None,
            outcome_class: None,
            measured: parse_flag(get(measured), "measured", line)?
                .ok_or_else(|| invalid_input(format!("line {line}: measured is empty")))?,
            scores: BTreeMap::new(),
            prior_diabetes: parse_flag(get(prior), "prior_diabetes", line)?.unwrap_or(false),
            time_to_event: match layout.time_to_event {
                Some(i) => parse_opt_f64(get(i), "time_to_event", line)?,
                None => None,
            },
            event: match layout.event {
                Some(i) => parse_flag(get(i), "event", line)?,
                None => None,
            },
        };
        if e.patient_id.is_empty() || e.encounter_id.is_empty() {
            return Err(invalid_input(format!("line {line}: empty patient or encounter id")));
        }
        e.set_outcome(parse_opt_f64(get(hba1c), "hba1c", line)?)
            .map_err(|err| invalid_input(format!("line {line}: {err}")))?;
        for (n, i) in &layout.scores {
            let v = parse_f64(get(*i), n, line)?;
            if !v.is_finite() {
                return Err(invalid_input(format!("line {line}: score {n} is not finite")));
            }
            e.scores.insert(n.clone(), v);
        }
        e.validate().map_err(|err| invalid_input(format!("line {line}: {err}")))?;
        encounters.push(e);
    }
    Ok(Cohort {
        covariate_names: layout.covariates.into_iter().map(|(n, _)| n).collect(),
        score_names: layout.scores.into_iter().map(|(n, _)| n).collect(),
        encounters,
    })
}

/// Oracle sidecar of a simulated population.
pub fn write_truth<W: Write>(pop: &SimPopulation, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    w.write_record([
        "encounter_id",
        "true_propensity",
        "latent_risk",
        "latent_high",
        "hba1c",
        "time_to_event",
        "event",
    ])?;
    for (i, e) in pop.encounters.iter().enumerate() {
        w.write_record([
            e.encounter_id.clone(),
            pop.true_propensity[i].to_string(),
            pop.latent_risk[i].to_string(),
            flag(pop.latent_high[i]).to_string(),
            opt_f64(e.outcome_hba1c),
            opt_f64(e.time_to_event),
            e.event.map(|b| flag(b).to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric column of a CSV keyed by `encounter_id`.
pub fn read_keyed_column<R: Read>(input: R, column: &str) -> Result<BTreeMap<String, f64>> {
    let mut reader = ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    let key = header
        .iter()
        .position(|h| h == "encounter_id")
        .ok_or_else(|| invalid_input("CSV lacks column encounter_id"))?;
    let col = header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| invalid_input(format!("CSV lacks column {column}")))?;
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let v = parse_f64(rec.get(col).unwrap_or(""), column, line)?;
        out.insert(rec.get(key).unwrap_or("").to_string(), v);
    }
    Ok(out)
}

pub fn write_weights<W: Write>(weights: &WeightedCohort, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    w.write_record(["encounter_id", "propensity", "ipw_weight"])?;
    for s in &weights.samples {
        w.write_record([s.encounter_id.clone(), s.propensity.to_string(), s.ipw_weight.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_roc<W: Write>(curve: &RocCurve, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    w.write_record(["threshold", "fpr", "tpr"])?;
    for k in 0..curve.thresholds.len() {
        w.write_record([curve.thresholds[k].to_string(), curve.fpr[k].to_string(), curve.tpr[k].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_prc<W: Write>(curve: &PrCurve, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    w.write_record(["threshold", "recall", "precision"])?;
    for k in 0..curve.thresholds.len() {
        w.write_record([
            curve.thresholds[k].to_string(),
            curve.recall[k].to_string(),
            curve.precision[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `gamma, f1_focal, f1_baseline, difference`; undefined F1 values are empty.
pub fn write_sweep<W: Write>(result: &SensitivityResult, out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    w.write_record(["gamma", "f1_focal", "f1_baseline", "difference"])?;
    for (k, g) in result.gamma_grid.iter().enumerate() {
        let (a, b) = (result.f1_focal[k], result.f1_baseline[k]);
        let d = a.zip(b).map(|(a, b)| a - b);
        w.write_record([g.to_string(), opt_f64(a), opt_f64(b), opt_f64(d)])?;
    }
    w.flush()?;
    Ok(())
}

/// One block of rows per group, starting with the `t = 0` row.
pub fn write_km<W: Write>(curves: &[(&str, &KMCurve)], out: W) -> Result<()> {
    let mut w = WriterBuilder::new().from_writer(out);
    w.write_record(["group", "time", "survival", "ci_lo", "ci_hi", "at_risk", "events"])?;
    for (group, c) in curves {
        w.write_record([group, "0", "1", "1", "1", &c.n.to_string(), "0"])?;
        for k in 0..c.event_times.len() {
            w.write_record([
                group.to_string(),
                c.event_times[k].to_string(),
                c.survival[k].to_string(),
                c.ci_lo[k].to_string(),
                c.ci_hi[k].to_string(),
                c.at_risk[k].to_string(),
                c.events[k].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
