//! Checks shared by the sampler tests and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF};

use eventmeta::data::{oncology_dataset, ArmRecord, ArmRole, Dataset, TrialRecord};
use eventmeta::event_model::{category_probs, log_category_probs, CategoryProbs, RateParams};
use eventmeta::exec::{map_indexed, Execution};
use eventmeta::math::{logit, quantile_sorted, sigmoid};
use eventmeta::model::{Anchor, EffectStructure, HierModel, ModelSpec};
use eventmeta::prior::PriorSpec;
use eventmeta::sampler::{bulk_ess, run, FnDensity, Init, SamplerConfig, Summary};
use eventmeta::sim::simulate_arm;

pub struct ConjugateCheck {
    pub max_quantile_error: f64,
    pub ess: f64,
}

/// Sample the fatal fraction `q` given `y` events of which `m` were fatal,
/// with a Beta(a, b) prior, on the logit scale, and compare quantiles with
/// the exact Beta(a + m, b + y - m) posterior.
pub fn beta_conjugate(a: f64, b: f64, y: u64, m: u64, seed: u64) -> ConjugateCheck {
    let prior = PriorSpec::beta(a, b);
    let (yf, mf) = (y as f64, m as f64);
    let target = FnDensity::new(1, move |x: &[f64]| {
        let q = sigmoid(x[0]);
        prior.ln_pdf(q) + mf * q.ln() + (yf - mf) * (1.0 - q).ln() + q.ln() + (1.0 - q).ln()
    });
    let config = SamplerConfig {
        warmup_iterations: 2000,
        sampling_iterations: 5000,
        seed,
        ..SamplerConfig::default()
    };
    let draws = run(&target, &config, &Init::Around(vec![logit(0.5)])).unwrap();
    let chains: Vec<Vec<f64>> = draws.chains("x[0]").unwrap().into_iter().map(|c| c.into_iter().map(sigmoid).collect()).collect();
    let ess = bulk_ess(&chains).unwrap();
    let mut all: Vec<f64> = chains.concat();
    all.sort_by(f64::total_cmp);
    let exact = Beta::new(a + mf, b + yf - mf).unwrap();
    let max_quantile_error = [0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975]
        .iter()
        .map(|&p| (quantile_sorted(&all, p) - exact.inverse_cdf(p)).abs())
        .fold(0.0, f64::max);
    ConjugateCheck { max_quantile_error, ess }
}

fn oncology_summary(seed: u64, execution: Execution) -> (Summary, Vec<Vec<f64>>) {
    let model = HierModel::new(&ModelSpec::vague(EffectStructure::RandomEffects, Anchor::TreatmentAnchored), &oncology_dataset()).unwrap();
    let config = SamplerConfig {
        warmup_iterations: 300,
        sampling_iterations: 300,
        seed,
        execution,
        ..SamplerConfig::default()
    };
    let draws = run(&model, &config, &Init::Jittered).unwrap();
    (draws.summarize(0.95).unwrap(), draws.constrained)
}

/// Whether one seed gives identical draws and summaries sequentially and
/// on rayon pools of several sizes.
pub fn deterministic_across_threads(seed: u64) -> bool {
    let reference = oncology_summary(seed, Execution::Sequential);
    [1, 2, 8].iter().all(|&threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| oncology_summary(seed, Execution::Parallel)) == reference
    })
}

pub struct SbcResult {
    /// Rank of the true value among the thinned posterior draws, per replication.
    pub ranks: Vec<usize>,
    pub n_ranks: usize,
    pub counts: Vec<usize>,
    pub chi_square: f64,
    pub p_value: f64,
}

pub fn sbc_spec() -> ModelSpec {
    let mut spec = ModelSpec::vague(EffectStructure::RandomEffects, Anchor::ControlAnchored);
    for f in 1..=3 {
        spec = spec
            .with_prior(&format!("nu{f}"), PriorSpec::normal((0.2f64).ln(), 0.5))
            .with_prior(&format!("sigma{f}"), PriorSpec::half_normal(0.3));
    }
    spec.with_prior("phi", PriorSpec::normal(0.0, 0.5))
        .with_prior("eta", PriorSpec::half_normal(0.3))
        .with_prior("q0", PriorSpec::beta(2.0, 5.0))
        .with_prior("q1", PriorSpec::beta(2.0, 5.0))
}

/// Draw every parameter from the prior of [`sbc_spec`], simulate three
/// two-arm trials and return the data with the true `phi`.
fn sbc_draw(spec: &ModelSpec, seed: u64) -> (Dataset, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = |name: &str| spec.prior(name).unwrap().clone();
    let nu: Vec<f64> = (1..=3).map(|f| p(&format!("nu{f}")).sample(&mut rng)).collect();
    let sigma: Vec<f64> = (1..=3).map(|f| p(&format!("sigma{f}")).sample(&mut rng)).collect();
    let phi = p("phi").sample(&mut rng);
    let eta = p("eta").sample(&mut rng);
    let q0 = p("q0").sample(&mut rng);
    let q1 = p("q1").sample(&mut rng);
    let normal = |rng: &mut ChaCha8Rng, mean: f64, sd: f64| PriorSpec::normal(mean, sd).sample(rng);
    let trials = (0..3)
        .map(|i| {
            let log_lambda0 = normal(&mut rng, nu[0], sigma[0]);
            let log_mu0 = normal(&mut rng, nu[1], sigma[1]);
            let log_mu1 = normal(&mut rng, nu[2], sigma[2]);
            let phi_i = normal(&mut rng, phi, eta);
            let control = RateParams::new(log_lambda0.exp(), log_mu0.exp(), q0, 1.0);
            let treatment = RateParams::new((log_lambda0 + phi_i).exp(), log_mu1.exp(), q1, 1.0);
            TrialRecord {
                trial_id: format!("S{}", i + 1),
                indication: None,
                arms: vec![
                    simulate_arm(ArmRole::Control, &control, 150, &mut rng),
                    simulate_arm(ArmRole::Treatment, &treatment, 150, &mut rng),
                ],
                historical: false,
            }
        })
        .collect();
    let data = Dataset {
        trials,
        time_unit: "years".into(),
        provenance: "simulation-based calibration".into(),
    };
    (data, phi)
}

/// Simulation-based calibration of `phi` with `n_ranks - 1` thinned
/// posterior draws per replication and `bins` histogram bins.
pub fn sbc(replications: usize, n_ranks: usize, bins: usize, seed: u64) -> SbcResult {
    let spec = sbc_spec();
    let ranks = map_indexed(replications, Execution::Parallel, |r| {
        let (data, truth) = sbc_draw(&spec, seed.wrapping_add(r as u64));
        let model = HierModel::new(&spec, &data).unwrap();
        let config = SamplerConfig {
            warmup_iterations: 1000,
            sampling_iterations: 1000,
            seed: seed ^ (r as u64) << 20,
            execution: Execution::Sequential,
            ..SamplerConfig::default()
        };
        let draws = run(&model, &config, &Init::Jittered).unwrap();
        let col = draws.column("phi").unwrap();
        let keep = n_ranks - 1;
        let step = col.len() / keep;
        (0..keep).filter(|&j| col[j * step] < truth).count()
    });
    let per_bin = n_ranks / bins;
    let mut counts = vec![0usize; bins];
    for &r in &ranks {
        counts[(r / per_bin).min(bins - 1)] += 1;
    }
    let expected = replications as f64 / bins as f64;
    let chi_square: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi_square);
    SbcResult {
        ranks,
        n_ranks,
        counts,
        chi_square,
        p_value,
    }
}

// Event model oracles.

pub fn random_simplex(rng: &mut impl Rng) -> CategoryProbs {
    let e: Vec<f64> = (0..5).map(|_| -rng.random::<f64>().ln()).collect();
    let s: f64 = e.iter().sum();
    CategoryProbs {
        p: [e[0] / s, e[1] / s, e[2] / s, e[3] / s, e[4] / s],
    }
}

pub fn observed(counts: &[u64; 5]) -> (u64, u64, u64) {
    let [w1, w2, w3, _, w5] = *counts;
    (w1 + w2 + w3, w1 + w3 + w5, w1)
}

/// Probability of `(y, z, m)` by walking every patient-by-patient category
/// assignment. Only usable for very small `n`.
pub fn patientwise(n: u64, target: (u64, u64, u64), p: &[f64; 5]) -> f64 {
    let mut total = 0.0;
    for code in 0..5u64.pow(n as u32) {
        let mut c = code;
        let mut counts = [0u64; 5];
        let mut prob = 1.0;
        for _ in 0..n {
            let k = (c % 5) as usize;
            c /= 5;
            counts[k] += 1;
            prob *= p[k];
        }
        if observed(&counts) == target {
            total += prob;
        }
    }
    total
}

pub fn multinomial(counts: &[u64; 5], p: &[f64; 5]) -> f64 {
    // Product of binomial coefficients, built up exactly in f64.
    let mut coef = 1.0;
    let mut used = 0u64;
    for &w in counts {
        for j in 1..=w {
            coef *= (used + j) as f64 / j as f64;
        }
        used += w;
    }
    counts.iter().zip(p).fold(coef, |acc, (&w, &pk)| acc * pk.powi(w as i32))
}

/// Probability of `(y, z, m)` summed over every count vector.
pub fn countwise(n: u64, target: (u64, u64, u64), p: &[f64; 5]) -> f64 {
    let mut total = 0.0;
    for w1 in 0..=n {
        for w2 in 0..=n - w1 {
            for w3 in 0..=n - w1 - w2 {
                for w4 in 0..=n - w1 - w2 - w3 {
                    let counts = [w1, w2, w3, w4, n - w1 - w2 - w3 - w4];
                    if observed(&counts) == target {
                        total += multinomial(&counts, p);
                    }
                }
            }
        }
    }
    total
}

pub fn arm(n: u64, (y, z, m): (u64, u64, u64)) -> ArmRecord {
    ArmRecord::new(ArmRole::Control, n, y, z, m, 1.0)
}

pub fn random_counts(rng: &mut impl Rng, n: u64) -> [u64; 5] {
    let mut counts = [0u64; 5];
    for _ in 0..n {
        counts[rng.random_range(0..5)] += 1;
    }
    counts
}

pub fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub fn random_rates(rng: &mut impl Rng) -> RateParams {
    RateParams::new(
        log_uniform(rng, 1e-6, 10.0),
        log_uniform(rng, 1e-6, 10.0),
        rng.random(),
        log_uniform(rng, 0.1, 100.0),
    )
}


pub fn check_simplex(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let rates = random_rates(&mut rng);
        let p = category_probs(&rates).map_err(|e| e.to_string())?.p;
        if !p.iter().all(|x| (0.0..=1.0).contains(x)) {
            return Err(format!("{rates:?}: {p:?} leaves [0, 1]"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() >= 1e-12 {
            return Err(format!("{rates:?}: sum {sum}"));
        }
        for (l, x) in log_category_probs(&rates).iter().zip(p) {
            if x > 1e-300 && (l.exp() - x).abs() > 1e-10 * x {
                return Err(format!("{rates:?}: log probability {l} vs {x}"));
            }
        }
    }
    Ok(())
}

/// `p4` strictly decreases when `tau`, `lambda` or `mu` grows.
pub fn check_completion_monotone(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p4 = |r: RateParams| category_probs(&r).unwrap().p[3];
    for _ in 0..n {
        let r = RateParams::new(log_uniform(&mut rng, 1e-3, 1.0), log_uniform(&mut rng, 1e-3, 1.0), rng.random(), log_uniform(&mut rng, 0.1, 10.0));
        let f = 1.0 + rng.random::<f64>();
        for grown in [RateParams { tau: r.tau * f, ..r }, RateParams { lambda: r.lambda * f, ..r }, RateParams { mu: r.mu * f, ..r }] {
            if p4(grown) >= p4(r) {
                return Err(format!("p4 does not decrease from {r:?} to {grown:?}"));
            }
        }
    }
    Ok(())
}

fn close(a: &[f64; 5], b: &[f64; 5], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Vanishing event rate, drop-out rate, or both, against the analytic limits.
pub fn check_limits(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let r = random_rates(&mut rng);
        let q = r.q;
        let (u, v) = (r.lambda * r.tau, r.mu * r.tau);
        let hit = 1.0 - (-u).exp();
        let cases = [
            (RateParams { lambda: 1e-15, ..r }, [0.0, 0.0, 0.0, (-v).exp(), 1.0 - (-v).exp()]),
            (RateParams { mu: 1e-15, ..r }, [q * hit, (1.0 - q) * hit, 0.0, (-u).exp(), 0.0]),
            (RateParams { lambda: 1e-15, mu: 1e-15, ..r }, [0.0, 0.0, 0.0, 1.0, 0.0]),
        ];
        for (rates, limit) in cases {
            let p = category_probs(&rates).map_err(|e| e.to_string())?.p;
            if !close(&p, &limit, 1e-9) {
                return Err(format!("{rates:?}: {p:?} vs limit {limit:?}"));
            }
        }
    }
    Ok(())
}
