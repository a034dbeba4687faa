//! Five-category patient timeline model and the exact aggregate-data
//! likelihood of one arm.
//!
//! With event time `X ~ Exp(lambda)`, drop-out time `C ~ Exp(mu)` and a fatal
//! indicator `M ~ Bernoulli(q)`, every patient falls into exactly one of
//!
//! 1. fatal event during follow-up,
//! 2. non-fatal event, trial completed,
//! 3. non-fatal event, then drop-out before `tau`,
//! 4. no event and no drop-out before `tau`,
//! 5. drop-out before any event.
//!
//! The counts of categories 2, 3 and 5 are not reported; given the category-3
//! count `r` all others follow from `(n, y, z, m)`, so the likelihood sums the
//! multinomial probability over the feasible `r`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::{ArmRecord, Dataset};
use crate::error::{Error, Result};
use crate::math::{ln_factorial, log_sum_exp, xlogy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub lambda: f64,
    pub mu: f64,
    pub q: f64,
    pub tau: f64,
}

impl RateParams {
    pub fn new(lambda: f64, mu: f64, q: f64, tau: f64) -> Self {
        Self { lambda, mu, q, tau }
    }

    pub fn check(&self) -> Result<()> {
        let ok = self.lambda.is_finite()
            && self.lambda >= 0.0
            && self.mu.is_finite()
            && self.mu >= 0.0
            && (0.0..=1.0).contains(&self.q)
            && self.tau.is_finite()
            && self.tau > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid rate parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryProbs {
    pub p: [f64; 5],
}

impl CategoryProbs {
    /// Natural logs of the five probabilities.
    pub fn ln(&self) -> [f64; 5] {
        self.p.map(f64::ln)
    }
}

/// `(1 - exp(-a)) / a`, continuous at zero.
fn expm1_ratio(a: f64) -> f64 {
    if a < 1e-5 {
        1.0 - a / 2.0 + a * a / 6.0 - a * a * a / 24.0
    } else {
        -(-a).exp_m1() / a
    }
}

/// Regularized lower incomplete gamma `P(k + 1, v)` for integer `k`.
fn poisson_tail(k: usize, v: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..=k {
        term *= v / j as f64;
        sum += term;
    }
    1.0 - (-v).exp() * sum
}

/// `P(X <= C < tau)` for independent exponentials, in units `u = lambda*tau`,
/// `v = mu*tau`. This is category 3 before the non-fatal factor `1 - q`.
fn event_then_dropout(u: f64, v: f64) -> f64 {
    let s = u + v;
    if u == 0.0 || v == 0.0 {
        return 0.0;
    }
    if s < 0.5 {
        // u v sum_{k>=1} (-1)^{k+1} h_{k-1}(v, s) / (k+1)!, with h the complete
        // homogeneous polynomial; no subtraction of nearly equal terms.
        let mut h = 1.0;
        let mut v_pow = 1.0;
        let mut fact = 2.0;
        let mut sum = 0.0;
        for k in 1..60 {
            if k > 1 {
                v_pow *= v;
                h = s * h + v_pow;
                fact *= (k + 1) as f64;
            }
            let term = h / fact;
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 * sum.abs() {
                break;
            }
        }
        return u * v * sum;
    }
    if u <= 1e-3 * v {
        // Expansion in u / v with Poisson tail weights.
        let ratio = u / v;
        let mut pow = 1.0;
        let mut sum = 0.0;
        for k in 1..20 {
            pow *= ratio;
            let term = pow * poisson_tail(k, v);
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-18 * sum.abs() {
                break;
            }
        }
        return sum.max(0.0);
    }
    let value = if u <= v {
        -(-v).exp_m1() - v * expm1_ratio(s)
    } else {
        u * expm1_ratio(s) + (-u).exp_m1() * (-v).exp()
    };
    value.max(0.0)
}

/// The five closed-form category probabilities.
pub fn category_probs(params: &RateParams) -> Result<CategoryProbs> {
    params.check()?;
    Ok(category_probs_unchecked(params))
}

pub(crate) fn category_probs_unchecked(params: &RateParams) -> CategoryProbs {
    let u = params.lambda * params.tau;
    let v = params.mu * params.tau;
    let s = u + v;
    let q = params.q;
    let leave = expm1_ratio(s);
    let p1 = q * u * leave;
    let p2 = (1.0 - q) * -(-u).exp_m1() * (-v).exp();
    let p3 = (1.0 - q) * event_then_dropout(u, v);
    let p4 = (-s).exp();
    let p5 = v * leave;
    CategoryProbs {
        p: [p1, p2, p3, p4, p5],
    }
}

/// Log category probabilities computed without forming the probabilities
/// where that would underflow (`p4`, `p5` for long follow-up).
pub fn log_category_probs(params: &RateParams) -> [f64; 5] {
    let u = params.lambda * params.tau;
    let v = params.mu * params.tau;
    let s = u + v;
    let q = params.q;
    let ln_leave = if s < 1e-5 {
        expm1_ratio(s).ln()
    } else {
        // ln((1 - e^{-s}) / s)
        ln_one_minus_exp_neg(s) - s.ln()
    };
    let ln_nonfatal = (-q).ln_1p();
    let lp1 = q.ln() + u.ln() + ln_leave;
    let lp2 = ln_nonfatal + ln_one_minus_exp_neg(u) - v;
    let lp3 = ln_nonfatal + event_then_dropout(u, v).ln();
    let lp4 = -s;
    let lp5 = v.ln() + ln_leave;
    [lp1, lp2, lp3, lp4, lp5]
}

/// `ln(1 - e^{-x})` for `x >= 0`.
fn ln_one_minus_exp_neg(x: f64) -> f64 {
    if x <= 0.0 {
        f64::NEG_INFINITY
    } else if x < std::f64::consts::LN_2 {
        (-(-x).exp_m1()).ln()
    } else {
        (-(-x).exp()).ln_1p()
    }
}

/// Admissible range `[r1, r2]` of the unobserved category-3 count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleRange {
    pub r1: u64,
    pub r2: u64,
}

impl FeasibleRange {
    pub fn contains(&self, r: u64) -> bool {
        self.r1 <= r && r <= self.r2
    }
}

pub fn feasible_range(arm: &ArmRecord) -> FeasibleRange {
    let r1 = (arm.y + arm.z).saturating_sub(arm.m + arm.n);
    let r2 = arm.y.saturating_sub(arm.m).min(arm.z.saturating_sub(arm.m));
    FeasibleRange { r1, r2 }
}

/// Category counts `(w1, ..., w5)` implied by a category-3 count `r`.
pub fn complete_counts(arm: &ArmRecord, r: u64) -> Result<[u64; 5]> {
    let range = feasible_range(arm);
    if !range.contains(r) {
        return Err(Error::Domain(format!(
            "category-3 count {r} outside feasible range [{}, {}]",
            range.r1, range.r2
        )));
    }
    let w1 = arm.m;
    let w2 = arm.y - arm.m - r;
    let w5 = arm.z - arm.m - r;
    let w4 = arm.n - (w1 + w2 + r + w5);
    Ok([w1, w2, r, w4, w5])
}

/// Data-only part of one arm's log-likelihood, precomputed once per arm.
#[derive(Debug, Clone)]
pub struct ArmKernel {
    n: u64,
    y: u64,
    z: u64,
    m: u64,
    range: FeasibleRange,
    ln_prefactor: f64,
    /// `-ln(w2! w3! w4! w5!)` for each feasible `r`.
    ln_coef: Vec<f64>,
}

impl ArmKernel {
    pub fn new(arm: &ArmRecord) -> Self {
        let range = feasible_range(arm);
        let ln_prefactor = ln_factorial(arm.n) - ln_factorial(arm.m);
        let ln_coef = if range.r1 <= range.r2 {
            (range.r1..=range.r2)
                .map(|r| {
                    let [_, w2, w3, w4, w5] =
                        complete_counts(arm, r).expect("r within feasible range");
                    -(ln_factorial(w2) + ln_factorial(w3) + ln_factorial(w4) + ln_factorial(w5))
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            n: arm.n,
            y: arm.y,
            z: arm.z,
            m: arm.m,
            range,
            ln_prefactor,
            ln_coef,
        }
    }

    pub fn range(&self) -> FeasibleRange {
        self.range
    }

    /// Log-likelihood given log category probabilities; `-inf` when the data
    /// have probability zero.
    pub fn log_likelihood(&self, lp: &[f64; 5]) -> f64 {
        if self.ln_coef.is_empty() {
            return f64::NEG_INFINITY;
        }
        let base = self.ln_prefactor + xlogy(self.m as f64, lp[0]);
        if base == f64::NEG_INFINITY {
            return base;
        }
        // Counts at r = r1; each further r moves one patient from
        // categories 2 and 5 into 3 and 4.
        let r1 = self.range.r1;
        let mut w2 = (self.y - self.m - r1) as f64;
        let mut w3 = r1 as f64;
        let mut w4 = (self.n + self.m + r1 - self.y - self.z) as f64;
        let mut w5 = (self.z - self.m - r1) as f64;
        let terms = self.ln_coef.iter().map(|c| {
            let t = c + xlogy(w2, lp[1]) + xlogy(w3, lp[2]) + xlogy(w4, lp[3]) + xlogy(w5, lp[4]);
            w2 -= 1.0;
            w3 += 1.0;
            w4 += 1.0;
            w5 -= 1.0;
            t
        });
        base + log_sum_exp(terms)
    }
}

/// Exact log-likelihood of one arm's aggregate counts.
pub fn log_likelihood_arm(arm: &ArmRecord, probs: &CategoryProbs) -> f64 {
    ArmKernel::new(arm).log_likelihood(&probs.ln())
}

/// Sum of arm log-likelihoods; `rates` holds one entry per arm in dataset order.
pub fn log_likelihood_dataset(dataset: &Dataset, rates: &[RateParams]) -> Result<f64> {
    let n_arms = dataset.n_arms();
    if rates.len() != n_arms {
        return Err(Error::Dimension {
            expected: n_arms,
            found: rates.len(),
        });
    }
    let mut total = 0.0;
    for (arm, params) in dataset.trials.iter().flat_map(|t| t.arms.iter()).zip(rates) {
        params.check()?;
        total += ArmKernel::new(arm).log_likelihood(&log_category_probs(params));
    }
    Ok(total)
}

/// Shared lookup table of `ln(k!)`.
pub(crate) fn ln_factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(4097);
        t.push(0.0);
        let mut acc = 0.0;
        for k in 1..=4096u64 {
            acc += (k as f64).ln();
            t.push(acc);
        }
        t
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ArmRole;

    fn arm(n: u64, y: u64, z: u64, m: u64) -> ArmRecord {
        ArmRecord::new(ArmRole::Control, n, y, z, m, 1.0)
    }

    #[test]
    fn no_events_possible() {
        let p = category_probs(&RateParams::new(0.0, 0.5, 0.35, 1.0)).unwrap().p;
        let e = (-0.5f64).exp();
        let want = [0.0, 0.0, 0.0, e, 1.0 - e];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{p:?}");
        }
    }

    #[test]
    fn no_rates_everyone_completes() {
        for q in [0.0, 0.3, 1.0] {
            let p = category_probs(&RateParams::new(0.0, 0.0, q, 1.0)).unwrap().p;
            assert_eq!(p, [0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn reference_point_closed_form() {
        // Direct evaluation of the textbook expressions at lambda = mu = 0.5.
        let (l, m, q, t) = (0.5f64, 0.5f64, 0.35f64, 1.0f64);
        let s = l + m;
        let want = [
            q * l / s * (1.0 - (-s * t).exp()),
            (1.0 - q) * (1.0 - (-l * t).exp()) * (-m * t).exp(),
            (1.0 - q) * ((l + m * (-s * t).exp()) / s - (-m * t).exp()),
            (-s * t).exp(),
            m / s * (1.0 - (-s * t).exp()),
        ];
        let p = category_probs(&RateParams::new(l, m, q, t)).unwrap().p;
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-14, "{p:?} vs {want:?}");
        }
        assert!((p[0] - 0.110621).abs() < 1e-6);
        assert!((p[3] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn non_finite_rates_are_rejected() {
        assert!(category_probs(&RateParams::new(f64::NAN, 0.5, 0.3, 1.0)).is_err());
        assert!(category_probs(&RateParams::new(0.1, f64::INFINITY, 0.3, 1.0)).is_err());
        assert!(category_probs(&RateParams::new(0.1, 0.5, 1.3, 1.0)).is_err());
        assert!(category_probs(&RateParams::new(0.1, 0.5, 0.3, 0.0)).is_err());
    }

    #[test]
    fn category_three_branches_agree_at_switch_points() {
        // Each branch of event_then_dropout against a high-accuracy quadrature
        // of int_0^1 v e^{-v c} (1 - e^{-u c}) dc.
        fn quad(u: f64, v: f64) -> f64 {
            let n = 20_000;
            let h = 1.0 / n as f64;
            let f = |c: f64| v * (-v * c).exp() * -(-u * c).exp_m1();
            let mut s = f(0.0) + f(1.0);
            for i in 1..n {
                s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        }
        for (u, v) in [
            (0.2, 0.29),
            (0.2, 0.31),
            (1e-4, 0.6),
            (1e-3, 1.0),
            (1.1e-3, 1.0),
            (0.7, 0.6),
            (0.6, 0.7),
            (3.0, 1e-4),
            (5.0, 8.0),
        ] {
            let got = event_then_dropout(u, v);
            let want = quad(u, v);
            assert!(
                ((got - want) / want).abs() < 1e-9,
                "u={u} v={v}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn feasible_ranges() {
        assert_eq!(feasible_range(&arm(400, 5, 65, 0)), FeasibleRange { r1: 0, r2: 5 });
        assert_eq!(feasible_range(&arm(5, 5, 5, 0)), FeasibleRange { r1: 5, r2: 5 });
        assert_eq!(feasible_range(&arm(10, 4, 3, 2)), FeasibleRange { r1: 0, r2: 1 });
    }

    #[test]
    fn feasible_range_matches_enumeration() {
        // Brute force: all 5-vectors of counts summing to n consistent with (y, z, m).
        let a = arm(10, 4, 3, 2);
        let mut seen = Vec::new();
        for w1 in 0..=10u64 {
            for w2 in 0..=10 - w1 {
                for w3 in 0..=10 - w1 - w2 {
                    for w5 in 0..=10 - w1 - w2 - w3 {
                        let consistent = w1 == a.m && w1 + w2 + w3 == a.y && w1 + w3 + w5 == a.z;
                        if consistent && !seen.contains(&w3) {
                            seen.push(w3);
                        }
                    }
                }
            }
        }
        seen.sort();
        assert_eq!(seen, vec![0, 1]);
    }

    #[test]
    fn completed_counts() {
        assert_eq!(complete_counts(&arm(10, 4, 3, 2), 0).unwrap(), [2, 2, 0, 5, 1]);
        assert_eq!(complete_counts(&arm(5, 5, 5, 0), 5).unwrap(), [0, 0, 5, 0, 0]);
        assert_eq!(complete_counts(&arm(400, 5, 65, 0), 5).unwrap(), [0, 0, 5, 335, 60]);
        assert!(complete_counts(&arm(10, 4, 3, 2), 2).is_err());
    }

    #[test]
    fn single_configuration_likelihoods() {
        let probs = CategoryProbs {
            p: [0.1, 0.2, 0.1, 0.5, 0.1],
        };
        let ll = log_likelihood_arm(&arm(7, 0, 0, 0), &probs);
        assert!((ll - 7.0 * 0.5f64.ln()).abs() < 1e-12);
        let ll = log_likelihood_arm(&arm(2, 2, 2, 2), &probs);
        assert!((ll - 2.0 * 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_data_is_negative_infinity() {
        let probs = CategoryProbs {
            p: [0.0, 0.5, 0.0, 0.5, 0.0],
        };
        assert_eq!(log_likelihood_arm(&arm(3, 1, 1, 1), &probs), f64::NEG_INFINITY);
        // zero probability with zero count is fine
        assert!(log_likelihood_arm(&arm(3, 1, 0, 0), &probs).is_finite());
    }

    #[test]
    fn dataset_likelihood_checks_arity() {
        let d = crate::data::oncology_dataset();
        let rates = vec![RateParams::new(0.01, 0.1, 0.01, 10.0); 3];
        assert!(matches!(
            log_likelihood_dataset(&d, &rates),
            Err(Error::Dimension { expected: 18, found: 3 })
        ));
    }

    #[test]
    fn log_probs_match_probs() {
        for &(l, m, q, t) in &[
            (0.5, 0.5, 0.35, 1.0),
            (0.02, 0.5, 0.01, 30.0),
            (1e-7, 3.0, 0.5, 2.0),
            (4.0, 1e-8, 0.9, 0.3),
            (0.01, 0.02, 0.2, 0.5),
        ] {
            let rp = RateParams::new(l, m, q, t);
            let p = category_probs(&rp).unwrap().p;
            let lp = log_category_probs(&rp);
            for s in 0..5 {
                assert!((p[s].ln() - lp[s]).abs() < 1e-10, "{rp:?} cat {s}: {} vs {}", p[s].ln(), lp[s]);
            }
        }
    }

    #[test]
    fn log_probs_survive_long_follow_up() {
        let lp = log_category_probs(&RateParams::new(0.02, 0.5, 0.01, 2000.0));
        assert!((lp[3] + 1040.0).abs() < 1e-9);
        assert!(lp.iter().all(|x| x.is_finite()));
    }
}
