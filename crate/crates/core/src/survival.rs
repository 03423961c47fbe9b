//! Kaplan-Meier curves, cumulative incidence and the log-rank test.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid_input, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    /// Days from index to onset or censoring.
    pub time: f64,
    /// True when onset was observed.
    pub event: bool,
    pub group: String,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool, group: impl Into<String>) -> Result<Self> {
        if !(time >= 0.0 && time.is_finite()) {
            return Err(invalid_input(format!("survival time must be finite and nonnegative, got {time}")));
        }
        Ok(Self {
            time,
            event,
            group: group.into(),
        })
    }
}

/// Product-limit estimate evaluated at each distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMCurve {
    pub event_times: Vec<f64>,
    pub survival: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub n: usize,
    /// False when there were no events, so no band can be formed.
    pub ci_defined: bool,
}

impl KMCurve {
    /// Index of the last event time `<= t`.
    fn step_index(&self, t: f64) -> Option<usize> {
        self.event_times.partition_point(|&e| e <= t).checked_sub(1)
    }

    /// Right-continuous `S(t)`.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.step_index(t).map_or(1.0, |i| self.survival[i])
    }

    /// `(S, lo, hi)` at `t`.
    pub fn band_at(&self, t: f64) -> (f64, f64, f64) {
        self.step_index(t)
            .map_or((1.0, 1.0, 1.0), |i| (self.survival[i], self.ci_lo[i], self.ci_hi[i]))
    }
}

fn sorted_times(records: &[SurvivalRecord]) -> Result<Vec<(f64, bool)>> {
    let mut v: Vec<(f64, bool)> = Vec::with_capacity(records.len());
    for r in records {
        if !(r.time >= 0.0 && r.time.is_finite()) {
            return Err(invalid_input(format!("survival time must be finite and nonnegative, got {}", r.time)));
        }
        v.push((r.time, r.event));
    }
    // events before censorings at equal times
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    Ok(v)
}

/// Kaplan-Meier fit with Greenwood-exponential (log-log) bands.
pub fn km_fit(records: &[SurvivalRecord], z_alpha: f64) -> Result<KMCurve> {
    if records.is_empty() {
        return Err(invalid_input("Kaplan-Meier fit needs at least one record"));
    }
    if !(z_alpha > 0.0 && z_alpha.is_finite()) {
        return Err(invalid_input("z_alpha must be positive"));
    }
    let data = sorted_times(records)?;
    let n = data.len();
    let mut curve = KMCurve {
        event_times: Vec::new(),
        survival: Vec::new(),
        ci_lo: Vec::new(),
        ci_hi: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        n,
        ci_defined: false,
    };
    let mut s = 1.0;
    let mut greenwood = 0.0;
    let mut i = 0;
    while i < n {
        let t = data[i].0;
        let at_risk = n - i;
        let mut d = 0;
        let mut j = i;
        while j < n && data[j].0 == t {
            d += usize::from(data[j].1);
            j += 1;
        }
        if d > 0 {
            s *= (at_risk - d) as f64 / at_risk as f64;
            let (lo, hi) = if d == at_risk {
                greenwood = f64::INFINITY;
                (0.0, 0.0)
            } else {
                greenwood += d as f64 / (at_risk as f64 * (at_risk - d) as f64);
                let ln_s = s.ln();
                let v = greenwood / (ln_s * ln_s);
                let spread = z_alpha * v.sqrt();
                (s.powf(spread.exp()), s.powf((-spread).exp()))
            };
            curve.event_times.push(t);
            curve.survival.push(s);
            curve.ci_lo.push(lo);
            curve.ci_hi.push(hi);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
            if s == 0.0 {
                break;
            }
        }
        i = j;
    }
    curve.ci_defined = !curve.event_times.is_empty();
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Incidence {
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// `1 - S(horizon)`, including a step exactly at the horizon.
pub fn cumulative_incidence(curve: &KMCurve, horizon: f64) -> Result<Incidence> {
    if !(horizon >= 0.0) {
        return Err(invalid_input(format!("horizon must be nonnegative, got {horizon}")));
    }
    let (s, lo, hi) = curve.band_at(horizon);
    Ok(Incidence {
        estimate: 1.0 - s,
        ci_lo: 1.0 - hi,
        ci_hi: 1.0 - lo,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskGroup {
    High,
    Low,
}

impl RiskGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskGroup::High => "high",
            RiskGroup::Low => "low",
        }
    }
}

/// High when `score >= threshold`.
pub fn stratify_risk(scores: &[f64], threshold: f64) -> Vec<RiskGroup> {
    scores
        .iter()
        .map(|&s| if s >= threshold { RiskGroup::High } else { RiskGroup::Low })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRank {
    pub statistic: f64,
    /// `None` when the variance vanishes.
    pub pvalue: Option<f64>,
}

/// Upper tail of chi-square with one degree of freedom.
pub fn chi2_1_sf(statistic: f64) -> f64 {
    erfc((statistic / 2.0).sqrt())
}

/// Two-group log-rank test with the hypergeometric variance.
pub fn log_rank(group_a: &[SurvivalRecord], group_b: &[SurvivalRecord]) -> Result<LogRank> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(invalid_input("log-rank test needs two nonempty groups"));
    }
    let a = sorted_times(group_a)?;
    let b = sorted_times(group_b)?;
    let (mut ia, mut ib) = (0usize, 0usize);
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    while ia < a.len() || ib < b.len() {
        let t = match (a.get(ia), b.get(ib)) {
            (Some(x), Some(y)) => x.0.min(y.0),
            (Some(x), None) => x.0,
            (None, Some(y)) => y.0,
            (None, None) => unreachable!(),
        };
        let na = (a.len() - ia) as f64;
        let nb = (b.len() - ib) as f64;
        let (mut da, mut db) = (0.0, 0.0);
        while ia < a.len() && a[ia].0 == t {
            da += f64::from(u8::from(a[ia].1));
            ia += 1;
        }
        while ib < b.len() && b[ib].0 == t {
            db += f64::from(u8::from(b[ib].1));
            ib += 1;
        }
        let d = da + db;
        if d == 0.0 {
            continue;
        }
        let n = na + nb;
        observed += da;
        expected += d * na / n;
        if n > 1.0 {
            variance += d * (na / n) * (1.0 - na / n) * (n - d) / (n - 1.0);
        }
    }
    if !(variance > 0.0) {
        return Ok(LogRank {
            statistic: f64::NAN,
            pvalue: None,
        });
    }
    let statistic = (observed - expected).powi(2) / variance;
    Ok(LogRank {
        statistic,
        pvalue: Some(chi2_1_sf(statistic)),
    })
}
