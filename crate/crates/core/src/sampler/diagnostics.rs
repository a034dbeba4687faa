//! Rank-normalised split R-hat and bulk effective sample size.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::math::quantile_sorted;

/// Split every chain in half, dropping the middle draw of odd-length chains.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replace every draw by the normal score of its pooled rank (average ranks
/// for ties).
fn rank_normalise(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut idx: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, x)| (*x, c, i)))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = std.inverse_cdf((rank - 0.375) / (total as f64 + 0.25));
        for &(_, c, k) in &idx[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

fn chain_mean_var(c: &[f64]) -> (f64, f64) {
    let n = c.len() as f64;
    let m = c.iter().sum::<f64>() / n;
    let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Classic potential scale reduction of already-split chains. `None` if the
/// within-chain variance vanishes.
fn basic_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains[0].len() as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| chain_mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / stats.len() as f64;
    if !(w > 0.0) {
        return None;
    }
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / stats.len() as f64;
    let b = n * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>() / (stats.len() as f64 - 1.0);
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().all(|c| c.iter().all(|x| *x == first))
}

fn usable(chains: &[Vec<f64>]) -> bool {
    chains.len() >= 2 && chains.iter().all(|c| c.len() >= 4) && chains.iter().all(|c| c.len() == chains[0].len())
}

/// Split R-hat: the largest of the rank-normalised bulk and folded values
/// and the classic split value on the raw draws. Rank normalisation caps
/// the statistic for fully separated chains, so the raw value is kept to
/// expose gross disagreement. `None` for constant draws or fewer than 2
/// chains of at least 4 draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if !usable(chains) || is_constant(chains) {
        return None;
    }
    let s = split(chains);
    let bulk = basic_rhat(&rank_normalise(&s))?;
    let mut pooled: Vec<f64> = s.concat();
    pooled.sort_by(|a, b| a.total_cmp(b));
    let med = quantile_sorted(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = s.iter().map(|c| c.iter().map(|x| (x - med).abs()).collect()).collect();
    let tail = if is_constant(&folded) { None } else { basic_rhat(&rank_normalise(&folded)) };
    let raw = basic_rhat(&s).unwrap_or(bulk);
    Some(tail.map_or(bulk, |t| bulk.max(t)).max(raw))
}

fn autocovariance(c: &[f64], mean: f64, lag: usize) -> f64 {
    let n = c.len();
    (0..n - lag).map(|i| (c[i] - mean) * (c[i + lag] - mean)).sum::<f64>() / n as f64
}

/// Effective sample size of already-split (and possibly rank-normalised)
/// chains, using Geyer's initial positive sequence: autocorrelations are
/// summed in pairs until the first negative pair.
fn ess_of(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| chain_mean_var(c)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    if !(w > 0.0) {
        return None;
    }
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let b_over_n = stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    let rho = |lag: usize| -> f64 {
        let mean_acov = chains
            .iter()
            .zip(&stats)
            .map(|(c, s)| autocovariance(c, s.0, lag))
            .sum::<f64>()
            / m;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum += pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / (m * nf).log10());
    Some(m * nf / tau)
}

/// Bulk effective sample size on rank-normalised split chains. `None` for
/// constant draws or unusable input.
pub fn bulk_ess(chains: &[Vec<f64>]) -> Option<f64> {
    if !usable(chains) || is_constant(chains) {
        return None;
    }
    ess_of(&rank_normalise(&split(chains)))
}
