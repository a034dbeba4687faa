//! Univariate prior distributions used for hyperparameters and effects.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};
use crate::math::log_sum_exp;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureTerm {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Normal { mean: f64, sd: f64 },
    HalfNormal { scale: f64 },
    Cauchy { location: f64, scale: f64 },
    Beta { a: f64, b: f64 },
    NormalMixture { components: Vec<MixtureTerm> },
    PointMass { value: f64 },
}

/// How a parameter with this prior is mapped to the real line for sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log,
    Logit,
}

pub fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

impl PriorSpec {
    pub fn normal(mean: f64, sd: f64) -> Self {
        PriorSpec::Normal { mean, sd }
    }

    pub fn half_normal(scale: f64) -> Self {
        PriorSpec::HalfNormal { scale }
    }

    pub fn cauchy(location: f64, scale: f64) -> Self {
        PriorSpec::Cauchy { location, scale }
    }

    pub fn beta(a: f64, b: f64) -> Self {
        PriorSpec::Beta { a, b }
    }

    pub fn point_mass(value: f64) -> Self {
        PriorSpec::PointMass { value }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            PriorSpec::Normal { mean, sd } if !(mean.is_finite() && *sd > 0.0 && sd.is_finite()) => {
                bad(format!("normal prior needs finite mean and sd > 0: {self:?}"))
            }
            PriorSpec::HalfNormal { scale } if !(*scale > 0.0 && scale.is_finite()) => {
                bad(format!("half-normal prior needs scale > 0: {self:?}"))
            }
            PriorSpec::Cauchy { location, scale }
                if !(location.is_finite() && *scale > 0.0 && scale.is_finite()) =>
            {
                bad(format!("cauchy prior needs scale > 0: {self:?}"))
            }
            PriorSpec::Beta { a, b } if !(*a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite()) => {
                bad(format!("beta prior needs a, b > 0: {self:?}"))
            }
            PriorSpec::NormalMixture { components } => {
                if components.is_empty() {
                    return bad("empty normal mixture".into());
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight > 0.0 && c.sd > 0.0 && c.mean.is_finite()))
                    || (total - 1.0).abs() > 1e-12
                {
                    return bad(format!("mixture weights must be positive and sum to 1, sds positive: {self:?}"));
                }
                Ok(())
            }
            PriorSpec::PointMass { value } if !value.is_finite() => {
                bad("point mass needs a finite value".into())
            }
            _ => Ok(()),
        }
    }

    /// Log density at `x`; `-inf` outside the support. A point mass has log
    /// density 0 at its value (counting measure).
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::Normal { mean, sd } => normal_ln_pdf(x, mean, sd),
            PriorSpec::HalfNormal { scale } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    std::f64::consts::LN_2 + normal_ln_pdf(x, 0.0, scale)
                }
            }
            PriorSpec::Cauchy { location, scale } => {
                let z = (x - location) / scale;
                -(PI * scale).ln() - z.mul_add(z, 1.0).ln()
            }
            PriorSpec::Beta { a, b } => {
                if x <= 0.0 || x >= 1.0 {
                    f64::NEG_INFINITY
                } else {
                    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
                }
            }
            PriorSpec::NormalMixture { ref components } => log_sum_exp(
                components
                    .iter()
                    .map(|c| c.weight.ln() + normal_ln_pdf(x, c.mean, c.sd)),
            ),
            PriorSpec::PointMass { value } => {
                if x == value {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn transform(&self) -> Transform {
        match self {
            PriorSpec::HalfNormal { .. } => Transform::Log,
            PriorSpec::Beta { .. } => Transform::Logit,
            _ => Transform::Identity,
        }
    }

    pub fn is_point_mass(&self) -> Option<f64> {
        match *self {
            PriorSpec::PointMass { value } => Some(value),
            _ => None,
        }
    }

    /// Median, used to centre initial values.
    pub fn median(&self) -> f64 {
        match *self {
            PriorSpec::Normal { mean, .. } => mean,
            // sqrt(2) * erfinv(1/2)
            PriorSpec::HalfNormal { scale } => 0.674_489_750_196_081_7 * scale,
            PriorSpec::Cauchy { location, .. } => location,
            PriorSpec::Beta { a, b } => {
                if (a - b).abs() < 1e-12 {
                    0.5
                } else {
                    // Kerman's approximation; only used for initial values.
                    ((a - 1.0 / 3.0) / (a + b - 2.0 / 3.0)).clamp(0.01, 0.99)
                }
            }
            PriorSpec::NormalMixture { ref components } => {
                components.iter().map(|c| c.weight * c.mean).sum()
            }
            PriorSpec::PointMass { value } => value,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PriorSpec::Normal { mean, sd } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + sd * z
            }
            PriorSpec::HalfNormal { scale } => {
                let z: f64 = rng.sample(StandardNormal);
                scale * z.abs()
            }
            PriorSpec::Cauchy { location, scale } => {
                let u: f64 = rng.random();
                location + scale * (PI * (u - 0.5)).tan()
            }
            PriorSpec::Beta { a, b } => Beta::new(a, b).expect("checked beta").sample(rng),
            PriorSpec::NormalMixture { ref components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut chosen = components.last().expect("non-empty mixture");
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        chosen = c;
                        break;
                    }
                }
                let z: f64 = rng.sample(StandardNormal);
                chosen.mean + chosen.sd * z
            }
            PriorSpec::PointMass { value } => value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_mode() {
        let lp = PriorSpec::normal(0.0, 1.0).ln_pdf(0.0);
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn supports() {
        assert_eq!(PriorSpec::half_normal(1.0).ln_pdf(-1e-9), f64::NEG_INFINITY);
        assert_eq!(PriorSpec::beta(0.5, 0.5).ln_pdf(1.0), f64::NEG_INFINITY);
        assert_eq!(PriorSpec::beta(0.5, 0.5).ln_pdf(-0.1), f64::NEG_INFINITY);
        assert_eq!(PriorSpec::point_mass(0.0).ln_pdf(0.1), f64::NEG_INFINITY);
        assert_eq!(PriorSpec::point_mass(0.0).ln_pdf(0.0), 0.0);
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn densities_integrate_to_one() {
        let cases = [
            (PriorSpec::normal(1.0, 2.0), -30.0, 30.0),
            (PriorSpec::half_normal(0.5), 0.0, 10.0),
            (PriorSpec::beta(2.0, 3.0), 0.0, 1.0),
            (
                PriorSpec::NormalMixture {
                    components: vec![
                        MixtureTerm { weight: 0.3, mean: -1.0, sd: 0.5 },
                        MixtureTerm { weight: 0.7, mean: 2.0, sd: 1.0 },
                    ],
                },
                -20.0,
                20.0,
            ),
        ];
        for (p, a, b) in cases {
            let mass = simpson(|x| p.ln_pdf(x).exp(), a, b, 20_000);
            assert!((mass - 1.0).abs() < 1e-6, "{p:?}: {mass}");
        }
    }

    #[test]
    fn cauchy_mass_within_tenfold_effects() {
        let p = PriorSpec::cauchy(0.0, 0.37);
        let l = 10f64.ln();
        let mass = simpson(|x| p.ln_pdf(x).exp(), -l, l, 20_000);
        assert!((mass - 0.90).abs() < 0.005, "{mass}");
    }

    #[test]
    fn invalid_priors_are_rejected() {
        assert!(PriorSpec::normal(0.0, 0.0).check().is_err());
        assert!(PriorSpec::half_normal(-1.0).check().is_err());
        assert!(PriorSpec::beta(0.0, 1.0).check().is_err());
        assert!(PriorSpec::NormalMixture {
            components: vec![MixtureTerm { weight: 0.5, mean: 0.0, sd: 1.0 }]
        }
        .check()
        .is_err());
        assert!(PriorSpec::cauchy(0.0, 2.5).check().is_ok());
    }

    #[test]
    fn json_shape() {
        let p: PriorSpec = serde_json::from_str(r#"{"kind":"half_normal","scale":0.5}"#).unwrap();
        assert_eq!(p, PriorSpec::half_normal(0.5));
        let s = serde_json::to_string(&PriorSpec::cauchy(0.0, 0.37)).unwrap();
        assert_eq!(s, r#"{"kind":"cauchy","location":0.0,"scale":0.37}"#);
    }
}
