//! Simulation of individual patient timelines, aggregation to arm records,
//! and scenario grids for frequentist operating characteristics.

use rand::Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{oncology_dataset, ArmRecord, ArmRole, Dataset, TrialRecord};
use crate::error::{Error, Result};
use crate::event_model::RateParams;
use crate::exec::{map_indexed, Execution};
use crate::map_prior::{self, BorrowingMode};
use crate::model::{Anchor, EffectStructure, HierModel, ModelSpec};
use crate::prior::PriorSpec;
use crate::rng::{derive_seed, stream_rng};
use crate::sampler::{run, summarize_column, Init, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub x: f64,
    pub c: f64,
    pub fatal: bool,
    pub category: u8,
}

/// Category of one patient. `x` is the event time, `c` the drop-out time.
/// A tie `x == c` counts as the event happening first.
pub fn classify_patient(x: f64, c: f64, fatal: bool, tau: f64) -> u8 {
    if x <= c && x <= tau {
        if fatal {
            1
        } else if c >= tau {
            2
        } else {
            3
        }
    } else if c < tau && c < x {
        5
    } else {
        4
    }
}

fn exp_time<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate > 0.0 {
        rng.sample(Exp::new(rate).expect("positive rate"))
    } else {
        f64::INFINITY
    }
}

pub fn simulate_patient<R: Rng + ?Sized>(rates: &RateParams, rng: &mut R) -> PatientOutcome {
    let x = exp_time(rates.lambda, rng);
    let c = exp_time(rates.mu, rng);
    let fatal = rates.q > 0.0 && rng.random::<f64>() < rates.q;
    PatientOutcome {
        x,
        c,
        fatal,
        category: classify_patient(x, c, fatal, rates.tau),
    }
}

/// Category counts of `n` simulated patients.
pub fn simulate_counts<R: Rng + ?Sized>(rates: &RateParams, n: u64, rng: &mut R) -> [u64; 5] {
    let mut counts = [0u64; 5];
    for _ in 0..n {
        counts[simulate_patient(rates, rng).category as usize - 1] += 1;
    }
    counts
}

/// Simulate `n` patients and aggregate them into an arm record.
pub fn simulate_arm<R: Rng + ?Sized>(role: ArmRole, rates: &RateParams, n: u64, rng: &mut R) -> ArmRecord {
    let w = simulate_counts(rates, n, rng);
    ArmRecord::new(role, n, w[0] + w[1] + w[2], w[0] + w[2] + w[4], w[0], rates.tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmDesign {
    pub n: u64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDesign {
    pub trial_id: String,
    pub control: ArmDesign,
    /// `None` for historical trials, which contribute control data only.
    pub treatment: Option<ArmDesign>,
    pub historical: bool,
}

/// Data-generating parameters. The anchored arm's log event rate is
/// `ln(anchor_rate) + anchor_log_sd * z_i`; the other arm follows through
/// `phi_i ~ Normal(phi, eta^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub anchor: Anchor,
    pub anchor_rate: f64,
    #[serde(default)]
    pub anchor_log_sd: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub q0: f64,
    pub q1: f64,
    pub phi: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub label: String,
    pub model: ModelSpec,
    /// Attach the scenario's MAP prior, derived afresh from each
    /// replication's historical trials.
    #[serde(default)]
    pub borrow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSettings {
    /// Model fitted to the historical trials.
    pub model: ModelSpec,
    pub mode: BorrowingMode,
    pub robust_weight: f64,
    pub max_components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub time_unit: String,
    pub trials: Vec<TrialDesign>,
    pub truth: Truth,
    pub analyses: Vec<AnalysisConfig>,
    #[serde(default)]
    pub map: Option<MapSettings>,
    pub n_replications: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub level: f64,
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")))
    }
}

impl ScenarioSpec {
    pub fn check(&self) -> Result<()> {
        let t = &self.truth;
        for (name, v) in [
            ("anchor_rate", t.anchor_rate),
            ("anchor_log_sd", t.anchor_log_sd),
            ("mu0", t.mu0),
            ("mu1", t.mu1),
            ("eta", t.eta),
        ] {
            nonneg(name, v)?;
        }
        for (name, q) in [("q0", t.q0), ("q1", t.q1)] {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {q}")));
            }
        }
        if !t.phi.is_finite() {
            return Err(Error::Config("phi must be finite".into()));
        }
        if self.n_replications < 1 {
            return Err(Error::Config("at least one replication is required".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.analyses.is_empty() {
            return Err(Error::Config("no analyses configured".into()));
        }
        let mut labels: Vec<&str> = self.analyses.iter().map(|a| a.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("analysis labels must be unique".into()));
        }
        for a in &self.analyses {
            a.model.check()?;
            if !a.model.borrowing.is_none() {
                return Err(Error::Config(format!(
                    "analysis {}: borrowing is derived per replication; set `borrow` instead",
                    a.label
                )));
            }
            if a.borrow && self.map.is_none() {
                return Err(Error::Config(format!("analysis {} borrows but no map settings are given", a.label)));
            }
        }
        let n_hist = self.trials.iter().filter(|d| d.historical).count();
        if let Some(m) = &self.map {
            m.model.check()?;
            if !(0.0..=1.0).contains(&m.robust_weight) || m.max_components < 1 {
                return Err(Error::Config("invalid map settings".into()));
            }
            if n_hist < 2 {
                return Err(Error::InsufficientHistorical { found: n_hist });
            }
        }
        if n_hist > 0 && t.anchor != Anchor::ControlAnchored {
            return Err(Error::Config("historical trials require a control-anchored truth".into()));
        }
        if !self.trials.iter().any(|d| !d.historical) {
            return Err(Error::Config("at least one main trial is required".into()));
        }
        for d in &self.trials {
            let arms = std::iter::once(d.control).chain(d.treatment);
            for a in arms {
                if a.n < 1 || !(a.tau > 0.0 && a.tau.is_finite()) {
                    return Err(Error::Config(format!("trial {}: arms need n >= 1 and tau > 0", d.trial_id)));
                }
            }
            if d.historical == d.treatment.is_some() {
                return Err(Error::Config(format!(
                    "trial {}: main trials need both arms, historical trials control only",
                    d.trial_id
                )));
            }
        }
        self.sampler.check()
    }

    /// Draw one data set. Trial-level random quantities and patients all
    /// come from `rng`.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Dataset {
        let t = &self.truth;
        let trials = self
            .trials
            .iter()
            .map(|d| {
                let z: f64 = rng.sample(StandardNormal);
                let anchored = (t.anchor_rate.ln() + t.anchor_log_sd * z).exp();
                let xi: f64 = rng.sample(StandardNormal);
                let phi_i = t.phi + t.eta * xi;
                let (lambda0, lambda1) = match t.anchor {
                    Anchor::ControlAnchored => (anchored, anchored * phi_i.exp()),
                    Anchor::TreatmentAnchored => (anchored * (-phi_i).exp(), anchored),
                };
                let mut arms = Vec::with_capacity(2);
                if let Some(a) = d.treatment {
                    arms.push(simulate_arm(ArmRole::Treatment, &RateParams::new(lambda1, t.mu1, t.q1, a.tau), a.n, rng));
                }
                let c = d.control;
                arms.push(simulate_arm(ArmRole::Control, &RateParams::new(lambda0, t.mu0, t.q0, c.tau), c.n, rng));
                TrialRecord {
                    trial_id: d.trial_id.clone(),
                    indication: None,
                    arms,
                    historical: d.historical,
                }
            })
            .collect();
        Dataset {
            trials,
            time_unit: self.time_unit.clone(),
            provenance: format!("simulated from scenario {}", self.name),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }
}

/// Outcome of one analysis in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    /// One entry per analysis, in configuration order; `Err` holds the
    /// failure message.
    pub outcomes: Vec<std::result::Result<FitOutcome, String>>,
}

/// Aggregated operating characteristics of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMetrics {
    pub label: String,
    pub n_succeeded: usize,
    pub n_failed: usize,
    pub coverage: f64,
    pub coverage_se: f64,
    /// Share of intervals excluding 0: type-I error under `phi = 0`, power
    /// otherwise.
    pub rejection: f64,
    pub rejection_se: f64,
    pub rejection_metric: String,
    pub mean_width: f64,
    pub width_se: f64,
    /// Fits whose R-hat for `phi` exceeded 1.05 (they are still counted).
    pub n_nonconverged: usize,
    pub failure_messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub true_phi: f64,
    pub true_eta: f64,
    pub n_replications: usize,
    pub seed: u64,
    pub metrics: Vec<AnalysisMetrics>,
    pub replications: Vec<ReplicationRecord>,
}

pub const RHAT_THRESHOLD: f64 = 1.05;
const MAX_FAILURE_MESSAGES: usize = 10;

fn proportion_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

impl ScenarioResult {
    pub fn metrics(&self, label: &str) -> Option<&AnalysisMetrics> {
        self.metrics.iter().find(|m| m.label == label)
    }

    /// Long-format table: scenario, model, metric, value, mc_se.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,model,metric,value,mc_se\n");
        for m in &self.metrics {
            let rows = [
                ("coverage", m.coverage, m.coverage_se),
                (m.rejection_metric.as_str(), m.rejection, m.rejection_se),
                ("mean_ci_width", m.mean_width, m.width_se),
                ("failures", m.n_failed as f64, f64::NAN),
                ("nonconverged", m.n_nonconverged as f64, f64::NAN),
            ];
            for (metric, value, se) in rows {
                let se = if se.is_nan() { String::new() } else { format!("{se:?}") };
                out.push_str(&format!("{},{},{metric},{value:?},{se}\n", self.scenario, m.label));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

fn aggregate(spec: &ScenarioSpec, records: &[ReplicationRecord]) -> Vec<AnalysisMetrics> {
    let truth = spec.truth.phi;
    spec.analyses
        .iter()
        .enumerate()
        .map(|(a, cfg)| {
            let ok: Vec<&FitOutcome> = records.iter().filter_map(|r| r.outcomes[a].as_ref().ok()).collect();
            let failure_messages: Vec<String> = records
                .iter()
                .filter_map(|r| r.outcomes[a].as_ref().err().map(|e| format!("replication {}: {e}", r.replication)))
                .collect();
            let n = ok.len();
            let share = |f: &dyn Fn(&FitOutcome) -> bool| -> f64 {
                if n == 0 {
                    f64::NAN
                } else {
                    ok.iter().filter(|o| f(o)).count() as f64 / n as f64
                }
            };
            let coverage = share(&|o| o.lower <= truth && truth <= o.upper);
            let rejection = share(&|o| o.lower > 0.0 || o.upper < 0.0);
            let widths: Vec<f64> = ok.iter().map(|o| o.upper - o.lower).collect();
            let mean_width = crate::math::mean(&widths);
            let width_se = if n > 1 {
                (crate::math::variance(&widths) / n as f64).sqrt()
            } else {
                f64::NAN
            };
            AnalysisMetrics {
                label: cfg.label.clone(),
                n_succeeded: n,
                n_failed: failure_messages.len(),
                coverage,
                coverage_se: proportion_se(coverage, n),
                rejection,
                rejection_se: proportion_se(rejection, n),
                rejection_metric: if truth == 0.0 { "type_i_error" } else { "power" }.into(),
                mean_width,
                width_se,
                n_nonconverged: ok.iter().filter(|o| o.rhat.is_some_and(|r| r > RHAT_THRESHOLD)).count(),
                failure_messages: failure_messages.into_iter().take(MAX_FAILURE_MESSAGES).collect(),
            }
        })
        .collect()
}

/// Fit `spec` to `data` and summarise `phi`.
pub fn fit_phi(spec: &ModelSpec, data: &Dataset, config: &SamplerConfig, level: f64) -> Result<FitOutcome> {
    let model = HierModel::new(spec, data)?;
    let draws = run(&model, config, &Init::Jittered)?;
    let chains = draws
        .chains("phi")
        .ok_or_else(|| Error::Config("phi is fixed; nothing to summarise".into()))?;
    let s = summarize_column("phi", &chains, level)?;
    Ok(FitOutcome {
        median: s.median,
        lower: s.lower,
        upper: s.upper,
        rhat: s.rhat,
    })
}

// Stream paths below the scenario seed: [rep, 0] data, [rep, 1] MAP
// derivation, [rep, 2, a] analysis a.
fn replicate(spec: &ScenarioSpec, rep: usize) -> ReplicationRecord {
    let r = rep as u64;
    let data = spec.generate(&mut stream_rng(spec.seed, &[r, 0]));
    let main = data.without_historical();
    let seq = SamplerConfig {
        execution: Execution::Sequential,
        ..spec.sampler.clone()
    };
    let borrowing = spec.map.as_ref().filter(|_| spec.analyses.iter().any(|a| a.borrow)).map(|m| {
        let cfg = SamplerConfig {
            seed: derive_seed(spec.seed, &[r, 1]),
            ..seq.clone()
        };
        map_prior::derive(&data, &m.model, m.mode, m.robust_weight, &cfg, m.max_components).map_err(|e| e.to_string())
    });
    let outcomes = spec
        .analyses
        .iter()
        .enumerate()
        .map(|(a, cfg)| {
            let config = SamplerConfig {
                seed: derive_seed(spec.seed, &[r, 2, a as u64]),
                ..seq.clone()
            };
            let model = if cfg.borrow {
                match borrowing.as_ref().expect("checked") {
                    Ok(b) => map_prior::attach_all(&cfg.model, b).map_err(|e| e.to_string())?,
                    Err(e) => return Err(format!("MAP derivation: {e}")),
                }
            } else {
                cfg.model.clone()
            };
            fit_phi(&model, &main, &config, spec.level).map_err(|e| e.to_string())
        })
        .collect();
    ReplicationRecord {
        replication: rep,
        outcomes,
    }
}

/// Run every replication (in parallel under `exec`) and aggregate.
/// Results depend only on the scenario, never on `exec`.
pub fn run_scenario(spec: &ScenarioSpec, exec: Execution) -> Result<ScenarioResult> {
    spec.check()?;
    let replications = map_indexed(spec.n_replications, exec, |rep| replicate(spec, rep));
    Ok(ScenarioResult {
        scenario: spec.name.clone(),
        true_phi: spec.truth.phi,
        true_eta: spec.truth.eta,
        n_replications: spec.n_replications,
        seed: spec.seed,
        metrics: aggregate(spec, &replications),
        replications,
    })
}

pub const ETA_GRID: [f64; 4] = [0.0, 0.2, 0.4, 0.8];
pub const ROSI_PHI: [f64; 2] = [0.0, 0.25];
pub const ONCOLOGY_PHI: [f64; 2] = [0.0, 0.5];

/// Sampler budget of the bundled scenarios.
pub fn simulation_sampler() -> SamplerConfig {
    SamplerConfig {
        warmup_iterations: 1000,
        sampling_iterations: 1000,
        ..SamplerConfig::default()
    }
}

fn arm(n: u64, tau: f64) -> ArmDesign {
    ArmDesign { n, tau }
}

/// Six main trials (durations in years) and twelve historical control arms.
pub fn rosiglitazone_design() -> Vec<TrialDesign> {
    let wk12 = 12.0 / 52.0;
    let wk26 = 0.5;
    let main = [
        (arm(300, wk12), arm(50, wk12)),
        (arm(100, wk12), arm(100, wk12)),
        (arm(100, wk26), arm(50, wk26)),
        (arm(100, wk26), arm(50, wk26)),
        (arm(100, wk26), arm(50, wk26)),
        (arm(150, 1.0), arm(150, 1.0)),
    ];
    let mut trials: Vec<TrialDesign> = main
        .iter()
        .enumerate()
        .map(|(i, (t, c))| TrialDesign {
            trial_id: format!("M{}", i + 1),
            control: *c,
            treatment: Some(*t),
            historical: false,
        })
        .collect();
    let hist_n = [25, 50, 50, 75, 100, 100, 125, 150, 150, 200, 250, 300];
    trials.extend(hist_n.iter().enumerate().map(|(i, &n)| TrialDesign {
        trial_id: format!("H{}", i + 1),
        control: arm(n, if i % 2 == 0 { 0.5 } else { 1.0 }),
        treatment: None,
        historical: true,
    }));
    trials
}

/// Arm sizes and durations of the bundled oncology data, with durations
/// converted from months to years to match the yearly rates.
pub fn oncology_design() -> Vec<TrialDesign> {
    oncology_dataset()
        .trials
        .iter()
        .map(|t| {
            let a = |r: Option<&ArmRecord>| {
                let r = r.expect("both arms present");
                arm(r.n, r.tau / 12.0)
            };
            TrialDesign {
                trial_id: t.trial_id.clone(),
                control: a(t.control()),
                treatment: Some(a(t.treatment())),
                historical: false,
            }
        })
        .collect()
}

fn rosi_scenario(k: usize) -> ScenarioSpec {
    let (phi, eta) = (ROSI_PHI[(k - 1) / 4], ETA_GRID[(k - 1) % 4]);
    let ce = ModelSpec::vague(EffectStructure::CommonEffect, Anchor::ControlAnchored);
    let re = ModelSpec::vague(EffectStructure::RandomEffects, Anchor::ControlAnchored);
    let analyses = vec![
        AnalysisConfig {
            label: "CE-vague".into(),
            model: ce.clone(),
            borrow: false,
        },
        AnalysisConfig {
            label: "RE-vague".into(),
            model: re.clone().with_prior("eta", PriorSpec::half_normal(100.0)),
            borrow: false,
        },
        AnalysisConfig {
            label: "CE-MAP".into(),
            model: ce.clone(),
            borrow: true,
        },
        AnalysisConfig {
            label: "RE-MAP".into(),
            model: re.with_prior("eta", PriorSpec::half_normal(0.5)),
            borrow: true,
        },
    ];
    ScenarioSpec {
        name: format!("rosi-{k}"),
        description: format!("cardiovascular safety design, phi = {phi}, eta = {eta}"),
        time_unit: "years".into(),
        trials: rosiglitazone_design(),
        truth: Truth {
            anchor: Anchor::ControlAnchored,
            anchor_rate: 0.5,
            anchor_log_sd: 0.0,
            mu0: 0.5,
            mu1: 0.5,
            q0: 0.35,
            q1: 0.35,
            phi,
            eta,
        },
        analyses,
        map: Some(MapSettings {
            model: ce,
            mode: BorrowingMode::NonStratified,
            robust_weight: 0.5,
            max_components: 4,
        }),
        n_replications: 1000,
        seed: 1000 + k as u64,
        sampler: simulation_sampler(),
        level: 0.95,
    }
}

fn oncology_scenario(k: usize) -> ScenarioSpec {
    let (phi, eta) = (ONCOLOGY_PHI[(k - 1) / 4], ETA_GRID[(k - 1) % 4]);
    let ce = ModelSpec::vague(EffectStructure::CommonEffect, Anchor::TreatmentAnchored);
    let re = ModelSpec::vague(EffectStructure::RandomEffects, Anchor::TreatmentAnchored);
    ScenarioSpec {
        name: format!("onc-{k}"),
        description: format!("oncology design, phi = {phi}, eta = {eta}"),
        time_unit: "years".into(),
        trials: oncology_design(),
        truth: Truth {
            anchor: Anchor::TreatmentAnchored,
            anchor_rate: 0.02,
            anchor_log_sd: 1.2,
            mu0: 0.5,
            mu1: 0.5,
            q0: 0.01,
            q1: 0.01,
            phi,
            eta,
        },
        analyses: vec![
            AnalysisConfig {
                label: "CE-vague".into(),
                model: ce,
                borrow: false,
            },
            AnalysisConfig {
                label: "RE-vague".into(),
                model: re,
                borrow: false,
            },
        ],
        map: None,
        n_replications: 1000,
        seed: 2000 + k as u64,
        sampler: simulation_sampler(),
        level: 0.95,
    }
}

/// The sixteen bundled scenarios: `rosi-1` .. `rosi-8` and `onc-1` .. `onc-8`.
pub fn bundled_scenarios() -> Vec<ScenarioSpec> {
    (1..=8).map(rosi_scenario).chain((1..=8).map(oncology_scenario)).collect()
}

pub fn bundled_scenario(name: &str) -> Result<ScenarioSpec> {
    let all = bundled_scenarios();
    let names: Vec<String> = all.iter().map(|s| s.name.clone()).collect();
    all.into_iter().find(|s| s.name == name).ok_or_else(|| Error::UnknownScenario {
        name: name.to_string(),
        available: names.join(", "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_model::{category_probs, feasible_range};

    #[test]
    fn classifier_examples() {
        assert_eq!(classify_patient(0.2, 5.0, true, 1.0), 1);
        assert_eq!(classify_patient(0.2, 5.0, false, 1.0), 2);
        assert_eq!(classify_patient(0.2, 0.6, false, 1.0), 3);
        assert_eq!(classify_patient(2.0, 3.0, false, 1.0), 4);
        assert_eq!(classify_patient(0.7, 0.6, true, 1.0), 5);
        assert_eq!(classify_patient(0.5, 0.5, false, 1.0), 3);
        assert_eq!(classify_patient(f64::INFINITY, f64::INFINITY, false, 1.0), 4);
    }

    #[test]
    fn classifier_partition() {
        let mut rng = stream_rng(3, &[]);
        for _ in 0..100_000 {
            let (x, c, tau): (f64, f64, f64) = (rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0, rng.random::<f64>() + 0.01);
            let fatal = rng.random::<bool>();
            let rules = [
                x <= c.min(tau) && fatal,
                x <= c.min(tau) && !fatal && c >= tau,
                x <= c && x <= tau && !fatal && c < tau,
                x > tau && c >= tau,
                c < tau && c < x,
            ];
            assert_eq!(rules.iter().filter(|r| **r).count(), 1, "{x} {c} {fatal} {tau}");
            let k = rules.iter().position(|r| *r).unwrap() as u8 + 1;
            assert_eq!(classify_patient(x, c, fatal, tau), k);
        }
    }

    #[test]
    fn degenerate_arms() {
        let mut rng = stream_rng(4, &[]);
        let a = simulate_arm(ArmRole::Control, &RateParams::new(0.0, 0.7, 0.5, 1.0), 500, &mut rng);
        assert_eq!((a.y, a.m), (0, 0));
        assert!(a.z > 0);
        let b = simulate_arm(ArmRole::Control, &RateParams::new(0.7, 0.0, 0.0, 1.0), 500, &mut rng);
        assert_eq!((b.z, b.m), (0, 0));
        assert!(b.y > 0);
    }

    #[test]
    fn aggregation_identity() {
        let mut rng = stream_rng(5, &[]);
        for i in 0..200 {
            let rates = RateParams::new(rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0, rng.random(), 0.2 + rng.random::<f64>());
            let n = 1 + (i % 40) as u64;
            let w = simulate_counts(&rates, n, &mut rng);
            let a = ArmRecord::new(ArmRole::Control, n, w[0] + w[1] + w[2], w[0] + w[2] + w[4], w[0], rates.tau);
            assert!(a.violations().is_empty());
            assert!(feasible_range(&a).contains(w[2]));
        }
    }

    #[test]
    fn frequencies_match_category_probs() {
        let rates = RateParams::new(0.5, 0.5, 0.35, 1.0);
        let n = 1_000_000u64;
        let w = simulate_counts(&rates, n, &mut stream_rng(6, &[]));
        let p = category_probs(&rates).unwrap().p;
        for k in 0..5 {
            let se = (p[k] * (1.0 - p[k]) / n as f64).sqrt();
            let f = w[k] as f64 / n as f64;
            assert!((f - p[k]).abs() < 3.0 * se, "category {}: {f} vs {}", k + 1, p[k]);
        }
    }

    #[test]
    fn bundled_specs_are_valid() {
        let all = bundled_scenarios();
        assert_eq!(all.len(), 16);
        for s in &all {
            s.check().unwrap();
            assert_eq!(ScenarioSpec::from_json(&s.to_json()).unwrap(), *s);
        }
        let r5 = bundled_scenario("rosi-5").unwrap();
        assert_eq!((r5.truth.phi, r5.truth.eta), (0.25, 0.0));
        let o8 = bundled_scenario("onc-8").unwrap();
        assert_eq!((o8.truth.phi, o8.truth.eta), (0.5, 0.8));
        assert_eq!(o8.trials.len(), 9);
        let r1 = bundled_scenario("rosi-1").unwrap();
        assert_eq!(r1.trials.iter().filter(|t| t.historical).count(), 12);
        assert_eq!(r1.trials.iter().filter(|t| !t.historical).count(), 6);
        match bundled_scenario("rosi-9") {
            Err(Error::UnknownScenario { available, .. }) => assert!(available.contains("onc-8")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn generated_data_validates() {
        for s in bundled_scenarios() {
            let d = s.generate(&mut stream_rng(1, &[]));
            assert!(d.validate().is_empty(), "{}", s.name);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = bundled_scenario("onc-1").unwrap();
        s.truth.eta = -0.1;
        assert!(s.check().is_err());
        let mut s = bundled_scenario("onc-1").unwrap();
        s.n_replications = 0;
        assert!(s.check().is_err());
        let mut s = bundled_scenario("rosi-1").unwrap();
        s.map = None;
        assert!(s.check().is_err());
    }
}
