use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use eventmeta::data::{ArmRole, Dataset, TrialRecord};
use eventmeta::event_model::RateParams;
use eventmeta::map_prior::{attach_all, derive, fit_historical, BorrowingMode, DEFAULT_HYPER_BLOCK};
use eventmeta::model::{Anchor, Borrowing, EffectStructure, HierModel, ModelSpec};
use eventmeta::sampler::{run, Init, SamplerConfig};
use eventmeta::sim::{bundled_scenario, simulate_arm};

fn quick(seed: u64) -> SamplerConfig {
    SamplerConfig {
        warmup_iterations: 1000,
        sampling_iterations: 1000,
        seed,
        ..SamplerConfig::default()
    }
}

/// Ten historical control arms whose log rates scatter around the given
/// rates with standard deviation `spread`.
fn historical_controls(lambda: f64, mu: f64, spread: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        trials: (0..10)
            .map(|i| {
                let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let rates = RateParams::new(lambda * (spread * z[0]).exp(), mu * (spread * z[1]).exp(), 0.3, 1.0);
                TrialRecord {
                    trial_id: format!("H{i}"),
                    indication: None,
                    arms: vec![simulate_arm(ArmRole::Control, &rates, 400, &mut rng)],
                    historical: true,
                }
            })
            .collect(),
        time_unit: "years".into(),
        provenance: String::new(),
    }
}

#[test]
fn historical_fit_recovers_control_rates() {
    let (lambda, mu) = (0.4, 0.2);
    let data = historical_controls(lambda, mu, 0.0, 1);
    let spec = ModelSpec::vague(EffectStructure::CommonEffect, Anchor::ControlAnchored);
    let draws = fit_historical(&data, &spec, &quick(2)).unwrap();
    let s = draws.summarize(0.99).unwrap();
    for (name, truth) in [("nu1", lambda), ("nu2", mu), ("pred_log_lambda0", lambda), ("pred_log_mu0", mu)] {
        let p = s.get(name).unwrap();
        assert!(p.contains(truth.ln()), "{name}: [{}, {}] misses {}", p.lower, p.upper, truth.ln());
    }
    assert_eq!(draws.column("nu3").unwrap(), draws.column("nu2").unwrap());
}

#[test]
fn derived_priors_are_robust_and_pass_the_percentile_check() {
    let data = historical_controls(0.4, 0.2, 0.3, 3);
    let spec = ModelSpec::vague(EffectStructure::CommonEffect, Anchor::ControlAnchored);
    for mode in [BorrowingMode::NonStratified, BorrowingMode::Stratified] {
        for w in [0.0, 0.5, 1.0] {
            let b = derive(&data, &spec, mode, w, &quick(4), 4).unwrap();
            for p in b.priors() {
                let vague: f64 = p.vague.iter().map(|v| v.weight).sum();
                assert!((vague - (1.0 - w)).abs() < 1e-12, "{mode:?} w={w}: vague weight {vague}");
                assert!((p.robust_weight - w).abs() < 1e-12);
                assert!(p.fit.as_ref().unwrap().percentile_check.passed, "{mode:?}: {:?}", p.fit);
            }
            match (&b, mode) {
                (Borrowing::NonStratified { priors }, BorrowingMode::NonStratified) => {
                    assert_eq!(priors[0].block, DEFAULT_HYPER_BLOCK.map(String::from).to_vec());
                }
                (Borrowing::Stratified { priors }, BorrowingMode::Stratified) => assert_eq!(priors.len(), 3),
                _ => panic!("mode mismatch"),
            }
        }
    }
}

#[test]
fn borrowing_tightens_the_control_rate() {
    let spec = bundled_scenario("rosi-1").unwrap();
    let data = spec.generate(&mut ChaCha8Rng::seed_from_u64(5));
    let ce = ModelSpec::vague(EffectStructure::CommonEffect, Anchor::ControlAnchored);
    let borrowing = derive(&data, &ce, BorrowingMode::NonStratified, 0.5, &quick(6), 4).unwrap();
    let main = data.without_historical();
    let sd = |spec: &ModelSpec| {
        let draws = run(&HierModel::new(spec, &main).unwrap(), &quick(7), &Init::Jittered).unwrap();
        let nu1 = draws.column("nu1").unwrap();
        eventmeta::math::variance(&nu1).sqrt()
    };
    let vague = sd(&ce);
    let map = sd(&attach_all(&ce, &borrowing).unwrap());
    assert!(map < vague, "map sd {map} vs vague sd {vague}");
}

#[test]
fn tail_misfit_is_reported_not_hidden() {
    // Without true spread the log-scale posterior has a long left tail whose
    // 2.5% point four normals cannot pin to 0.05.
    let data = historical_controls(0.4, 0.2, 0.0, 3);
    let spec = ModelSpec::vague(EffectStructure::CommonEffect, Anchor::ControlAnchored);
    let b = derive(&data, &spec, BorrowingMode::NonStratified, 0.5, &quick(4), 4).unwrap();
    let check = &b.priors()[0].fit.as_ref().unwrap().percentile_check;
    assert_eq!(check.passed, check.max_abs_error <= check.tolerance);
    assert!(!check.passed);
}
