//! Posterior summaries with equal-tailed intervals.

use serde::{Deserialize, Serialize};

use super::diagnostics::{bulk_ess, split_rhat};
use super::PosteriorDraws;
use crate::error::{Error, Result};
use crate::math::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
    /// Too few draws to resolve the requested tail probability; the interval
    /// is the sample range.
    pub insufficient_draws: bool,
}

impl ParamSummary {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub level: f64,
    pub params: Vec<ParamSummary>,
}

impl Summary {
    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Summarise one parameter given its per-chain draws. Quantiles use linear
/// interpolation between order statistics (`h = (N - 1) p`).
pub fn summarize_column(name: &str, chains: &[Vec<f64>], level: f64) -> Result<ParamSummary> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("interval level must lie in (0, 1), got {level}")));
    }
    let mut pooled: Vec<f64> = chains.concat();
    if pooled.is_empty() {
        return Err(Error::Domain(format!("no draws for {name}")));
    }
    let n = pooled.len();
    let mean = pooled.iter().sum::<f64>() / n as f64;
    pooled.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0;
    let insufficient = tail * (n as f64) < 1.0;
    let (lower, upper) = if insufficient {
        (pooled[0], pooled[n - 1])
    } else {
        (quantile_sorted(&pooled, tail), quantile_sorted(&pooled, 1.0 - tail))
    };
    Ok(ParamSummary {
        name: name.to_string(),
        mean,
        median: quantile_sorted(&pooled, 0.5),
        lower,
        upper,
        rhat: split_rhat(chains),
        ess: bulk_ess(chains),
        insufficient_draws: insufficient,
    })
}

pub(super) fn summarize(draws: &PosteriorDraws, level: f64) -> Result<Summary> {
    let params = draws
        .names
        .iter()
        .map(|name| {
            let chains = draws.chains(name).expect("known name");
            summarize_column(name, &chains, level)
        })
        .collect::<Result<_>>()?;
    Ok(Summary { level, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolated_interval() {
        let x: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = summarize_column("x", &[x[..50].to_vec(), x[50..].to_vec()], 0.9).unwrap();
        assert!((s.lower - 5.95).abs() < 1e-12);
        assert!((s.upper - 95.05).abs() < 1e-12);
        assert!((s.median - 50.5).abs() < 1e-12);
        assert!(!s.insufficient_draws);
    }

    #[test]
    fn extreme_level_falls_back_to_range() {
        let x: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = summarize_column("x", &[x], 0.9999).unwrap();
        assert_eq!((s.lower, s.upper), (1.0, 100.0));
        assert!(s.insufficient_draws);
        assert!(s.rhat.is_none());
    }

    #[test]
    fn symmetric_draws() {
        let x: Vec<f64> = (-500..=500).map(|i| f64::from(i) / 10.0).collect();
        let s = summarize_column("x", &[x], 0.95).unwrap();
        assert!((s.mean - s.median).abs() < 1e-12);
        assert!(summarize_column("x", &[vec![1.0]], 1.0).is_err());
    }
}
