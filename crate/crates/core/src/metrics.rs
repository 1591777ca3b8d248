//! Estimation error, recovery decision, and Monte-Carlo rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::RunRecord;
use crate::scene::TimingOffsets;
use crate::solver::Method;

/// An estimate counts as recovered when its error is below this, in seconds.
pub const RECOVERY_THRESHOLD: f64 = 1e-4;

/// Upper edge of the coarse error band, in seconds.
pub const COARSE_BAND_EDGE: f64 = 1e-2;

pub const BAND_FINE: &str = "er<1e-4";
pub const BAND_COARSE: &str = "1e-4<=er<1e-2";

/// Mean absolute start-time error plus mean absolute emission-time error.
pub fn estimation_error(est: &TimingOffsets, truth: &TimingOffsets) -> Result<f64> {
    if est.num_mics() != truth.num_mics() || est.num_sources() != truth.num_sources() {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {}x{}, truth is {}x{}",
            est.num_mics(),
            est.num_sources(),
            truth.num_mics(),
            truth.num_sources()
        )));
    }
    let mean_abs = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    };
    Ok(mean_abs(&est.delta, &truth.delta) + mean_abs(&est.eta, &truth.eta))
}

pub fn is_recovered(er: f64) -> bool {
    er < RECOVERY_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub recovery_rate: f64,
    pub convergence_rate: f64,
    pub band_ratios: BTreeMap<String, f64>,
    /// Recovered initialisations per configuration, in configuration order.
    pub per_config_counts: Vec<usize>,
    pub inits_per_config: usize,
}

/// Rates for one group of runs (same `M`, `N`, method and noise level).
///
/// Every configuration must carry the same number of initialisations.
pub fn summarize(records: &[RunRecord]) -> Result<MetricSummary> {
    let mut by_config: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_config.entry(r.config).or_default().push(r.er);
    }
    let inits = by_config.values().next().map_or(0, Vec::len);
    if by_config.values().any(|v| v.len() != inits) {
        return Err(Error::InvalidArgument(
            "ragged grouping: configurations have different initialisation counts".into(),
        ));
    }
    let per_config_counts: Vec<usize> = by_config
        .values()
        .map(|ers| ers.iter().filter(|e| is_recovered(**e)).count())
        .collect();
    let total = records.len();
    let ratio = |count: usize| {
        if total == 0 {
            0.0
        } else {
            count as f64 / total as f64
        }
    };
    let recovered: usize = per_config_counts.iter().sum();
    let configs_hit = per_config_counts.iter().filter(|c| **c != 0).count();
    let coarse = records
        .iter()
        .filter(|r| r.er >= RECOVERY_THRESHOLD && r.er < COARSE_BAND_EDGE)
        .count();
    let mut band_ratios = BTreeMap::new();
    band_ratios.insert(BAND_FINE.to_string(), ratio(recovered));
    band_ratios.insert(BAND_COARSE.to_string(), ratio(coarse));
    Ok(MetricSummary {
        recovery_rate: ratio(recovered),
        convergence_rate: if by_config.is_empty() {
            0.0
        } else {
            configs_hit as f64 / by_config.len() as f64
        },
        band_ratios,
        per_config_counts,
        inits_per_config: inits,
    })
}

/// Grouping key for per-experiment summaries.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GroupKey {
    pub method: Method,
    pub m: usize,
    pub n: usize,
    pub sigma: f64,
}

/// One CSV row per `(M, N, method, sigma)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub m: usize,
    pub n: usize,
    pub method: Method,
    pub sigma: f64,
    pub recovery_rate: f64,
    pub convergence_rate: f64,
    pub ratio_fine: f64,
    pub ratio_coarse: f64,
    pub configs: usize,
    pub inits: usize,
}

impl SummaryRow {
    pub fn new(key: GroupKey, summary: &MetricSummary) -> Self {
        Self {
            m: key.m,
            n: key.n,
            method: key.method,
            sigma: key.sigma,
            recovery_rate: summary.recovery_rate,
            convergence_rate: summary.convergence_rate,
            ratio_fine: summary.band_ratios[BAND_FINE],
            ratio_coarse: summary.band_ratios[BAND_COARSE],
            configs: summary.per_config_counts.len(),
            inits: summary.inits_per_config,
        }
    }
}

/// Splits records by `(method, M, N, sigma)` and summarizes each group.
pub fn summarize_groups(records: &[RunRecord]) -> Result<Vec<(GroupKey, MetricSummary)>> {
    let mut groups: Vec<(GroupKey, Vec<RunRecord>)> = Vec::new();
    for r in records {
        let key = GroupKey {
            method: r.method,
            m: r.m,
            n: r.n,
            sigma: r.sigma,
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.clone()),
            None => groups.push((key, vec![r.clone()])),
        }
    }
    groups.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    groups
        .into_iter()
        .map(|(k, v)| Ok((k, summarize(&v)?)))
        .collect()
}
