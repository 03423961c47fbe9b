//! Bootstrap confidence intervals and paired bootstrap p-values.
//!
//! A resample is represented by per-sample multiplicities rather than a
//! materialized copy, so metric closures can reuse precomputed rankings
//! (see [`crate::metrics::RankedScores::curve_with_multiplicity`]).
//! Round `r` draws from its own RNG stream keyed by `(seed, r)`, and rounds
//! are stored by index, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid_config, invalid_input, Result};
use crate::rng::{domain, stream};

/// Which unit is drawn with replacement.
#[derive(Debug, Clone, PartialEq)]
pub enum Resampler {
    Encounters { n: usize },
    /// Whole clusters (patients) are drawn; every member of a drawn cluster
    /// gains one multiplicity.
    Clusters { members: Vec<Vec<u32>>, n: usize },
}

impl Resampler {
    pub fn encounters(n: usize) -> Self {
        Resampler::Encounters { n }
    }

    /// Clusters from one key per sample (e.g. patient id).
    pub fn clusters<K: Ord>(keys: &[K]) -> Self {
        let mut index: std::collections::BTreeMap<&K, usize> = std::collections::BTreeMap::new();
        let mut members: Vec<Vec<u32>> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            let next = index.len();
            let c = *index.entry(k).or_insert(next);
            if c == members.len() {
                members.push(Vec::new());
            }
            members[c].push(i as u32);
        }
        Resampler::Clusters { members, n: keys.len() }
    }

    pub fn len(&self) -> usize {
        match self {
            Resampler::Encounters { n } | Resampler::Clusters { n, .. } => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiplicity of every sample in bootstrap round `round`.
    pub fn counts(&self, seed: u64, round: u64) -> Vec<u32> {
        let mut rng = stream(seed, domain::BOOTSTRAP, round);
        let mut counts = vec![0u32; self.len()];
        match self {
            Resampler::Encounters { n } => {
                for _ in 0..*n {
                    counts[rng.random_range(0..*n)] += 1;
                }
            }
            Resampler::Clusters { members, .. } => {
                for _ in 0..members.len() {
                    for &i in &members[rng.random_range(0..members.len())] {
                        counts[i as usize] += 1;
                    }
                }
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub rounds: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            alpha: 0.05,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid_config("bootstrap rounds must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid_config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricEstimate {
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub rounds: usize,
    pub excluded_rounds: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTest {
    pub point_a: f64,
    pub point_b: f64,
    pub pvalue: f64,
    pub rounds: usize,
    pub excluded_rounds: usize,
}

/// Evaluates `metric` on every round's multiplicities, in parallel.
/// `None` marks a round where the metric is undefined.
pub fn replicate<T, F>(resampler: &Resampler, config: &BootstrapConfig, metric: F) -> Vec<Option<T>>
where
    T: Send,
    F: Fn(&[u32]) -> Option<T> + Sync,
{
    (0..config.rounds as u64)
        .into_par_iter()
        .map(|r| metric(&resampler.counts(config.seed, r)))
        .collect()
}

/// Nearest-rank percentile: the `ceil(q * n)`-th smallest value (1-based).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[k - 1]
}

/// `(alpha/2, 1 - alpha/2)` nearest-rank bounds of the defined round values.
pub fn percentile_interval(values: &[Option<f64>], alpha: f64) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some((nearest_rank(&v, alpha / 2.0), nearest_rank(&v, 1.0 - alpha / 2.0)))
}

/// Percentile bootstrap interval for a metric of multiplicity-weighted data.
///
/// `metric` receives per-sample multiplicities; the point estimate uses all
/// ones.
pub fn bootstrap_ci<F>(resampler: &Resampler, config: &BootstrapConfig, metric: F) -> Result<MetricEstimate>
where
    F: Fn(&[u32]) -> Option<f64> + Sync,
{
    config.validate()?;
    if resampler.is_empty() {
        return Err(invalid_input("bootstrap of an empty sample"));
    }
    let point = metric(&vec![1; resampler.len()]).ok_or_else(|| degenerate("metric undefined on the full sample"))?;
    let values = replicate(resampler, config, &metric);
    let excluded = values.iter().filter(|v| v.is_none()).count();
    let (ci_lo, ci_hi) =
        percentile_interval(&values, config.alpha).ok_or_else(|| degenerate("metric undefined on every resample"))?;
    Ok(MetricEstimate {
        point,
        ci_lo,
        ci_hi,
        rounds: config.rounds,
        excluded_rounds: excluded,
        alpha: config.alpha,
    })
}

/// Summarizes round values computed elsewhere (e.g. several metrics sharing
/// one set of resamples).
pub fn estimate_from_rounds(point: f64, values: &[Option<f64>], alpha: f64) -> Result<MetricEstimate> {
    let (ci_lo, ci_hi) =
        percentile_interval(values, alpha).ok_or_else(|| degenerate("metric undefined on every resample"))?;
    Ok(MetricEstimate {
        point,
        ci_lo,
        ci_hi,
        rounds: values.len(),
        excluded_rounds: values.iter().filter(|v| v.is_none()).count(),
        alpha,
    })
}

/// [`bootstrap_ci`] for a statistic of a plain slice, materializing each
/// resample.
pub fn bootstrap_ci_slice<F>(data: &[f64], config: &BootstrapConfig, statistic: F) -> Result<MetricEstimate>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    bootstrap_ci(&Resampler::encounters(data.len()), config, |counts| {
        let resample: Vec<f64> = data
            .iter()
            .zip(counts)
            .flat_map(|(&x, &c)| std::iter::repeat_n(x, c as usize))
            .collect();
        statistic(&resample)
    })
}

/// `(1 + #{delta <= 0}) / (valid + 1)` over the defined round deltas.
pub fn pvalue_from_deltas(deltas: &[Option<f64>]) -> Option<f64> {
    let valid: Vec<f64> = deltas.iter().flatten().copied().collect();
    if valid.is_empty() {
        return None;
    }
    let nonpositive = valid.iter().filter(|d| **d <= 0.0).count();
    Some((1 + nonpositive) as f64 / (valid.len() + 1) as f64)
}

/// One-sided paired bootstrap test that metric A exceeds metric B.
///
/// `metric` returns `(metric_a, metric_b)` for the same multiplicities, so
/// both models see identical resamples.
pub fn paired_pvalue<F>(resampler: &Resampler, config: &BootstrapConfig, metric: F) -> Result<PairedTest>
where
    F: Fn(&[u32]) -> Option<(f64, f64)> + Sync,
{
    config.validate()?;
    if resampler.is_empty() {
        return Err(invalid_input("bootstrap of an empty sample"));
    }
    let (point_a, point_b) =
        metric(&vec![1; resampler.len()]).ok_or_else(|| degenerate("metric undefined on the full sample"))?;
    let deltas: Vec<Option<f64>> = replicate(resampler, config, |c| metric(c).map(|(a, b)| a - b));
    let excluded = deltas.iter().filter(|d| d.is_none()).count();
    let pvalue = pvalue_from_deltas(&deltas).ok_or_else(|| degenerate("metric undefined on every resample"))?;
    Ok(PairedTest {
        point_a,
        point_b,
        pvalue,
        rounds: config.rounds,
        excluded_rounds: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn mean(x: &[f64]) -> Option<f64> {
        (!x.is_empty()).then(|| x.iter().sum::<f64>() / x.len() as f64)
    }

    #[test]
    fn nearest_rank_positions() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.025), 3.0);
        assert_eq!(nearest_rank(&v, 0.975), 98.0);
        assert_eq!(nearest_rank(&v, 0.5), 50.0);
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        assert_eq!(nearest_rank(&v, 1.0), 100.0);
        assert_eq!(nearest_rank(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn constant_metric_has_degenerate_interval() {
        let est = bootstrap_ci(&Resampler::encounters(50), &BootstrapConfig::default(), |_| Some(0.42)).unwrap();
        assert_eq!((est.point, est.ci_lo, est.ci_hi), (0.42, 0.42, 0.42));
        assert_eq!(est.excluded_rounds, 0);
    }

    #[test]
    fn counts_sum_to_sample_size_and_are_reproducible() {
        let r = Resampler::encounters(1000);
        let a = r.counts(3, 7);
        assert_eq!(a.iter().map(|&c| c as usize).sum::<usize>(), 1000);
        assert_eq!(a, r.counts(3, 7));
        assert_ne!(a, r.counts(3, 8));
    }

    #[test]
    fn cluster_resampling_keeps_members_together() {
        let keys = ["a", "a", "b", "c", "c", "c"];
        let r = Resampler::clusters(&keys);
        for round in 0..20 {
            let c = r.counts(1, round);
            assert_eq!(c[0], c[1]);
            assert_eq!(c[3], c[4]);
            assert_eq!(c[4], c[5]);
        }
    }

    #[test]
    fn identical_models_give_p_one() {
        let t = paired_pvalue(&Resampler::encounters(30), &BootstrapConfig::default(), |c| {
            let s = c.iter().sum::<u32>() as f64;
            Some((s, s))
        })
        .unwrap();
        assert_eq!(t.pvalue, 1.0);
    }

    #[test]
    fn pvalue_resolution_is_one_over_101() {
        let data: Vec<f64> = (0..200).map(|i| f64::from(i % 7) - 3.0).collect();
        let t = paired_pvalue(&Resampler::encounters(data.len()), &BootstrapConfig { seed: 11, ..Default::default() }, |c| {
            let total: f64 = c.iter().map(|&m| f64::from(m)).sum();
            let m = data.iter().zip(c).map(|(x, &k)| x * f64::from(k)).sum::<f64>() / total;
            Some((m, 0.0))
        })
        .unwrap();
        let k = t.pvalue * 101.0;
        assert!((k - k.round()).abs() < 1e-9, "{}", t.pvalue);
        assert!(t.pvalue >= 1.0 / 101.0 && t.pvalue <= 1.0);
    }

    #[test]
    fn undefined_rounds_are_excluded() {
        let cfg = BootstrapConfig { rounds: 40, ..Default::default() };
        let est = bootstrap_ci(&Resampler::encounters(5), &cfg, |c| (c[0] != 0).then_some(1.0)).unwrap();
        assert!(est.excluded_rounds > 0 && est.excluded_rounds < 40);
        assert!(matches!(
            bootstrap_ci(&Resampler::encounters(5), &cfg, |_| None),
            Err(crate::Error::DegenerateData(_))
        ));
        assert!(bootstrap_ci(&Resampler::encounters(0), &cfg, |_| Some(1.0)).is_err());
        assert!(bootstrap_ci(&Resampler::encounters(3), &BootstrapConfig { rounds: 0, ..cfg }, |_| Some(1.0)).is_err());
    }

    #[test]
    fn mean_ci_width_matches_clt() {
        let n = 10_000;
        let expected = 2.0 * 1.96 / (n as f64).sqrt();
        let mut widths = Vec::new();
        for rep in 0..10u64 {
            let mut rng = stream(rep, 77, 0);
            let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let est = bootstrap_ci_slice(&data, &BootstrapConfig { seed: rep, ..Default::default() }, mean).unwrap();
            widths.push(est.ci_hi - est.ci_lo);
        }
        let avg = widths.iter().sum::<f64>() / widths.len() as f64;
        assert!((avg / expected - 1.0).abs() < 0.3, "avg width {avg} vs {expected}");
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let data: Vec<f64> = (0..500).map(|i| (f64::from(i) * 0.37).sin()).collect();
        let cfg = BootstrapConfig { seed: 5, ..Default::default() };
        let par = bootstrap_ci_slice(&data, &cfg, mean).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| bootstrap_ci_slice(&data, &cfg, mean).unwrap());
        assert_eq!(par, seq);
    }

    proptest! {
        #[test]
        fn pvalue_in_unit_interval(deltas in proptest::collection::vec(proptest::option::of(-1.0f64..1.0), 1..120)) {
            if let Some(p) = pvalue_from_deltas(&deltas) {
                let valid = deltas.iter().flatten().count();
                prop_assert!(p > 0.0 && p <= 1.0);
                prop_assert!(p >= 1.0 / (valid as f64 + 1.0));
            } else {
                prop_assert!(deltas.iter().all(Option::is_none));
            }
        }

        #[test]
        fn interval_bounds_are_order_statistics(values in proptest::collection::vec(-100.0f64..100.0, 1..150), alpha in 0.01f64..0.5) {
            let wrapped: Vec<Option<f64>> = values.iter().copied().map(Some).collect();
            let (lo, hi) = percentile_interval(&wrapped, alpha).unwrap();
            prop_assert!(lo <= hi);
            prop_assert!(values.contains(&lo) && values.contains(&hi));
        }
    }
}
