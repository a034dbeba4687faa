//! Small numerical helpers shared across modules.

use statrs::function::gamma::ln_gamma;

use crate::event_model::ln_factorial_table;

/// `ln(k!)`, tabulated for small `k` and via log-gamma beyond.
pub fn ln_factorial(k: u64) -> f64 {
    let table = ln_factorial_table();
    match table.get(k as usize) {
        Some(v) => *v,
        None => ln_gamma(k as f64 + 1.0),
    }
}

/// `x * ln_y` with the convention `0 * ln 0 = 0`.
#[inline]
pub fn xlogy(x: f64, ln_y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * ln_y
    }
}

/// Numerically stable `ln(sum(exp(x_i)))` in one pass; `-inf` for an empty
/// or all-`-inf` input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut acc = 0.0;
    for x in values {
        if x == f64::NEG_INFINITY {
            continue;
        }
        if x <= max {
            acc += (x - max).exp();
        } else {
            acc = acc * (max - x).exp() + 1.0;
            max = x;
        }
    }
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    max + acc.ln()
}

/// Logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`, the default of R and NumPy). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp([]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp([1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let long: Vec<f64> = (0..200).map(|i| -(i as f64)).collect();
        let direct: f64 = long.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(long) - direct).abs() < 1e-12);
    }

    #[test]
    fn ln_factorial_agrees_across_table_boundary() {
        for k in [0u64, 1, 5, 170, 4096, 4097, 10_000] {
            let want = ln_gamma(k as f64 + 1.0);
            assert!((ln_factorial(k) - want).abs() < 1e-9 * want.max(1.0), "{k}");
        }
    }

    #[test]
    fn interpolated_quantiles() {
        let x: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&x, 0.05) - 5.95).abs() < 1e-12);
        assert!((quantile_sorted(&x, 0.95) - 95.05).abs() < 1e-12);
    }

    #[test]
    fn logistic_pair() {
        for x in [-40.0, -3.0, 0.0, 2.5, 40.0] {
            let p = sigmoid(x);
            if p > 0.0 && p < 1.0 {
                assert!((logit(p) - x).abs() < 1e-6 * (1.0 + x.abs()));
            }
        }
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }
}
