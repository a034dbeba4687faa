//! Multivariate normal mixtures: density evaluation and EM fitting with
//! information-criterion model selection.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, quantile_sorted};
use crate::rng::stream_rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One fitted normal component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Marginal standard deviations.
    pub sd: Vec<f64>,
    /// Correlation matrix (row-major); omitted for one-dimensional or
    /// diagonal components.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corr: Option<Vec<Vec<f64>>>,
}

impl NormalComponent {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| {
            let r = match &self.corr {
                Some(c) => c[i][j],
                None => f64::from(u8::from(i == j)),
            };
            r * self.sd[i] * self.sd[j]
        })
    }

    fn from_moments(weight: f64, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Self {
        let d = mean.len();
        let sd: Vec<f64> = (0..d).map(|i| cov[(i, i)].sqrt()).collect();
        let corr = if d > 1 {
            Some(
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| if i == j { 1.0 } else { cov[(i, j)] / (sd[i] * sd[j]) })
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        };
        Self {
            weight,
            mean: mean.iter().copied().collect(),
            sd,
            corr,
        }
    }
}

/// Precomputed Cholesky form of a normal component for fast log densities.
#[derive(Debug, Clone)]
pub struct CompiledNormal {
    ln_weight: f64,
    mean: Vec<f64>,
    /// Lower-triangular Cholesky factor, row-major.
    chol: Vec<f64>,
    ln_norm: f64,
}

impl CompiledNormal {
    pub fn new(c: &NormalComponent) -> Result<Self> {
        let d = c.dim();
        if c.sd.len() != d || c.sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("mixture component with invalid scales: {:?}", c.sd)));
        }
        let chol = c
            .covariance()
            .cholesky()
            .ok_or_else(|| Error::Config("mixture component covariance not positive definite".into()))?;
        let l = chol.l();
        let ln_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let mut flat = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                flat[i * d + j] = l[(i, j)];
            }
        }
        Ok(Self {
            ln_weight: c.weight.ln(),
            mean: c.mean.clone(),
            chol: flat,
            ln_norm: -0.5 * (d as f64 * LN_2PI + ln_det),
        })
    }

    /// `ln(weight) + ln N(x | mean, cov)`.
    pub fn weighted_ln_pdf(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        // Forward substitution L z = x - mean.
        let mut z = [0.0f64; 16];
        let mut quad = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[i * d + j] * z[j];
            }
            z[i] = s / self.chol[i * d + i];
            quad += z[i] * z[i];
        }
        self.ln_weight + self.ln_norm - 0.5 * quad
    }
}

/// Result of comparing fitted and empirical marginal percentiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileCheck {
    pub probabilities: Vec<f64>,
    /// Per coordinate: empirical percentiles.
    pub empirical: Vec<Vec<f64>>,
    /// Per coordinate: percentiles of the fitted marginal mixture.
    pub fitted: Vec<Vec<f64>>,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Outcome of a mixture fit, including the model-selection record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    pub components: Vec<NormalComponent>,
    pub criterion: String,
    /// Criterion value per candidate component count (1-based position).
    pub scores: Vec<f64>,
    pub log_likelihood: f64,
    pub check: PercentileCheck,
}

pub const PERCENTILES: [f64; 3] = [0.025, 0.5, 0.975];
pub const PERCENTILE_TOLERANCE: f64 = 0.05;
/// Candidates within this many criterion units of the best are considered
/// equivalent; the smallest such component count is chosen.
pub const SELECTION_SLACK: f64 = 2.0;

const EM_MAX_ITER: usize = 1000;
const EM_TOL: f64 = 1e-9;
const EM_RESTARTS: usize = 4;

struct EmResult {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

fn compile(weight: f64, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<CompiledNormal> {
    let c = NormalComponent::from_moments(weight, mean, cov);
    CompiledNormal::new(&c).ok()
}

/// EM on row-major `x` (`n x d`).
fn em(x: &[f64], d: usize, k: usize, init_means: Vec<DVector<f64>>, pooled: &DMatrix<f64>, floor: &DMatrix<f64>) -> Option<EmResult> {
    let n = x.len() / d;
    let mut weights = vec![1.0 / k as f64; k];
    let mut means = init_means;
    let mut covs = vec![pooled + floor; k];
    let mut resp = vec![0.0; n * k];
    let mut lw = vec![0.0; k];
    let mut prev = f64::NEG_INFINITY;
    let mut loglik = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..EM_MAX_ITER {
        iterations = it + 1;
        let comps: Vec<CompiledNormal> = (0..k)
            .map(|c| compile(weights[c], &means[c], &covs[c]))
            .collect::<Option<_>>()?;
        loglik = 0.0;
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            for (c, comp) in comps.iter().enumerate() {
                lw[c] = comp.weighted_ln_pdf(row);
            }
            let lse = log_sum_exp(lw.iter().copied());
            loglik += lse;
            for c in 0..k {
                resp[i * k + c] = (lw[c] - lse).exp();
            }
        }
        if (loglik - prev).abs() <= EM_TOL * loglik.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = loglik;
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-8 * n as f64 {
                return None;
            }
            weights[c] = nk / n as f64;
            let mut m = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * k + c];
                for j in 0..d {
                    m[j] += r * x[i * d + j];
                }
            }
            for v in &mut m {
                *v /= nk;
            }
            let mut s = vec![0.0; d * d];
            for i in 0..n {
                let r = resp[i * k + c];
                for a in 0..d {
                    let da = x[i * d + a] - m[a];
                    for b in 0..=a {
                        s[a * d + b] += r * da * (x[i * d + b] - m[b]);
                    }
                }
            }
            means[c] = DVector::from_vec(m);
            covs[c] = DMatrix::from_fn(d, d, |a, b| {
                let (a, b) = if a >= b { (a, b) } else { (b, a) };
                s[a * d + b] / nk
            }) + floor;
        }
    }
    Some(EmResult {
        weights,
        means,
        covs,
        loglik,
        converged,
        iterations,
    })
}

fn mean(x: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(x[0].len());
    for xi in x {
        m += xi;
    }
    m / x.len() as f64
}

fn covariance(x: &[DVector<f64>], m: &DVector<f64>) -> DMatrix<f64> {
    let d = m.len();
    let mut s = DMatrix::zeros(d, d);
    for xi in x {
        let diff = xi - m;
        s += &diff * diff.transpose();
    }
    s / x.len() as f64
}

/// k-means++ style seeding, deterministic given the restart index.
fn seed_means(x: &[DVector<f64>], k: usize, restart: usize, scale: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut rng = stream_rng(0x6d69_7874, &[k as u64, restart as u64]);
    let dist = |a: &DVector<f64>, b: &DVector<f64>| {
        a.iter()
            .zip(b.iter())
            .zip(scale.iter())
            .map(|((u, v), s)| ((u - v) / s).powi(2))
            .sum::<f64>()
    };
    let mut centers = vec![x[rng.random_range(0..x.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = x
            .iter()
            .map(|xi| centers.iter().map(|c| dist(xi, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = x.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        centers.push(x[pick].clone());
    }
    centers
}

/// Quantile of a one-dimensional normal mixture by bisection on its CDF.
pub fn mixture_quantile(weights: &[f64], means: &[f64], sds: &[f64], p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let cdf = |x: f64| -> f64 {
        weights
            .iter()
            .zip(means)
            .zip(sds)
            .map(|((w, m), s)| w * Normal::new(*m, *s).expect("valid normal").cdf(x))
            .sum()
    };
    let spread = sds.iter().fold(0.0f64, |a, b| a.max(*b));
    let mut lo = means.iter().fold(f64::INFINITY, |a, b| a.min(*b)) - 40.0 * spread;
    let mut hi = means.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)) + 40.0 * spread;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn percentile_check(draws: &[Vec<f64>], components: &[NormalComponent]) -> PercentileCheck {
    let d = components[0].dim();
    let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
    let mut empirical = Vec::with_capacity(d);
    let mut fitted = Vec::with_capacity(d);
    let mut max_err = 0.0f64;
    for j in 0..d {
        let mut col: Vec<f64> = draws.iter().map(|r| r[j]).collect();
        col.sort_by(|a, b| a.total_cmp(b));
        let means: Vec<f64> = components.iter().map(|c| c.mean[j]).collect();
        let sds: Vec<f64> = components.iter().map(|c| c.sd[j]).collect();
        let e: Vec<f64> = PERCENTILES.iter().map(|&p| quantile_sorted(&col, p)).collect();
        let f: Vec<f64> = PERCENTILES
            .iter()
            .map(|&p| mixture_quantile(&weights, &means, &sds, p))
            .collect();
        for (a, b) in e.iter().zip(&f) {
            max_err = max_err.max((a - b).abs());
        }
        empirical.push(e);
        fitted.push(f);
    }
    PercentileCheck {
        probabilities: PERCENTILES.to_vec(),
        empirical,
        fitted,
        max_abs_error: max_err,
        tolerance: PERCENTILE_TOLERANCE,
        passed: max_err <= PERCENTILE_TOLERANCE,
    }
}

/// Fit normal mixtures with 1..=`max_components` components by EM and
/// select the component count by BIC: the smallest count whose BIC lies
/// within [`SELECTION_SLACK`] of the minimum.
pub fn fit_normal_mixture(draws: &[Vec<f64>], max_components: usize) -> Result<MixtureFit> {
    if draws.len() < 500 {
        return Err(Error::MixtureFit(format!(
            "at least 500 draws required, got {}",
            draws.len()
        )));
    }
    let max_components = max_components.clamp(1, 4);
    let d = draws[0].len();
    if d == 0 || d > 16 || draws.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::MixtureFit("draws must be finite rows of equal dimension 1..=16".into()));
    }
    let x: Vec<DVector<f64>> = draws.iter().map(|r| DVector::from_column_slice(r)).collect();
    let flat: Vec<f64> = draws.concat();
    let n = x.len() as f64;
    let m = mean(&x);
    let pooled = covariance(&x, &m);
    let scale = DVector::from_fn(d, |i, _| pooled[(i, i)].sqrt().max(1e-300));
    if (0..d).any(|i| pooled[(i, i)] <= 1e-24) {
        return Err(Error::MixtureFit("degenerate draws: zero variance in some coordinate".into()));
    }
    let floor = DMatrix::from_fn(d, d, |i, j| if i == j { 1e-6 * pooled[(i, i)] } else { 0.0 });

    let mut candidates = Vec::new();
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for k in 1..=max_components {
        let mut best: Option<EmResult> = None;
        let restarts = if k == 1 { 1 } else { EM_RESTARTS };
        for restart in 0..restarts {
            let init = if k == 1 { vec![m.clone()] } else { seed_means(&x, k, restart, &scale) };
            match em(&flat, d, k, init, &pooled, &floor) {
                Some(r) if r.converged => {
                    if best.as_ref().is_none_or(|b| r.loglik > b.loglik) {
                        best = Some(r);
                    }
                }
                Some(r) => failures.push(format!("k={k} restart={restart}: no convergence after {} iterations", r.iterations)),
                None => failures.push(format!("k={k} restart={restart}: collapsed component")),
            }
        }
        match best {
            Some(r) => {
                let params = (k - 1) + k * d + k * d * (d + 1) / 2;
                scores.push(-2.0 * r.loglik + params as f64 * n.ln());
                candidates.push(Some(r));
            }
            None => {
                scores.push(f64::INFINITY);
                candidates.push(None);
            }
        }
    }
    let best_score = scores.iter().copied().fold(f64::INFINITY, f64::min);
    if !best_score.is_finite() {
        return Err(Error::MixtureFit(format!("EM failed for every component count: {}", failures.join("; "))));
    }
    let chosen = scores
        .iter()
        .position(|s| *s <= best_score + SELECTION_SLACK)
        .expect("minimum exists");
    let r = candidates[chosen].take().expect("finite score has a fit");
    let mut components: Vec<NormalComponent> = (0..r.weights.len())
        .map(|c| NormalComponent::from_moments(r.weights[c], &r.means[c], &r.covs[c]))
        .collect();
    // Exact normalisation of weights.
    let total: f64 = components.iter().map(|c| c.weight).sum();
    for c in &mut components {
        c.weight /= total;
    }
    components.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    let check = percentile_check(draws, &components);
    Ok(MixtureFit {
        components,
        criterion: "BIC".into(),
        scores,
        log_likelihood: r.loglik,
        check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn single_normal_recovers_one_component() {
        let mut rng = stream_rng(1, &[]);
        let dist = Normal::new(1.5, 0.7).unwrap();
        let draws: Vec<Vec<f64>> = (0..4000).map(|_| vec![dist.sample(&mut rng)]).collect();
        let fit = fit_normal_mixture(&draws, 4).unwrap();
        assert_eq!(fit.components.len(), 1);
        let c = &fit.components[0];
        assert!((c.mean[0] - 1.5).abs() < 0.05 * 1.5);
        assert!((c.sd[0] - 0.7).abs() < 0.05 * 0.7);
        assert!(fit.check.passed, "{:?}", fit.check);
    }

    #[test]
    fn symmetric_bimodal_mixture() {
        let mut rng = stream_rng(2, &[]);
        let a = Normal::new(-2.0, 1.0).unwrap();
        let b = Normal::new(2.0, 1.0).unwrap();
        let draws: Vec<Vec<f64>> = (0..4000)
            .map(|i| vec![if i % 2 == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) }])
            .collect();
        let fit = fit_normal_mixture(&draws, 4).unwrap();
        assert_eq!(fit.components.len(), 2, "{:?}", fit.scores);
        for c in &fit.components {
            assert!((c.weight - 0.5).abs() < 0.1);
        }
        assert!(fit.check.passed);

        let forced = fit_normal_mixture(&draws, 1).unwrap();
        assert_eq!(forced.components.len(), 1);
        assert!(forced.components[0].sd[0] > 2.0);
        assert!(!forced.check.passed);
    }

    #[test]
    fn too_few_draws_or_constant_draws() {
        assert!(fit_normal_mixture(&vec![vec![0.0]; 100], 2).is_err());
        assert!(matches!(fit_normal_mixture(&vec![vec![1.0, 2.0]; 600], 2), Err(Error::MixtureFit(_))));
    }

    #[test]
    fn correlated_bivariate_density_matches_direct_formula() {
        let c = NormalComponent {
            weight: 1.0,
            mean: vec![1.0, -1.0],
            sd: vec![2.0, 0.5],
            corr: Some(vec![vec![1.0, 0.6], vec![0.6, 1.0]]),
        };
        let compiled = CompiledNormal::new(&c).unwrap();
        let x = [0.3, -0.2];
        let (s1, s2, r) = (2.0f64, 0.5f64, 0.6f64);
        let (z1, z2) = ((x[0] - 1.0) / s1, (x[1] + 1.0) / s2);
        let q = (z1 * z1 - 2.0 * r * z1 * z2 + z2 * z2) / (1.0 - r * r);
        let want = -(2.0 * std::f64::consts::PI * s1 * s2 * (1.0 - r * r).sqrt()).ln() - 0.5 * q;
        assert!((compiled.weighted_ln_pdf(&x) - want).abs() < 1e-12);
    }
}
