//! Common-effect and random-effects hierarchical models for the log hazard
//! ratio, with optional meta-analytic-predictive borrowing.
//!
//! The model is compiled into a flat list of log-density terms over the
//! unconstrained coordinates. Every coordinate records which terms read it,
//! so a one-coordinate change can be scored without touching the rest.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{ArmRole, Dataset};
use crate::error::{Error, Result};
use crate::event_model::{log_category_probs, ArmKernel, RateParams};
use crate::map_prior::{CompiledMixture, MixturePrior, HYPER_BLOCK_NAMES, TRIAL_BLOCK_NAMES};
use crate::math::{logit, sigmoid, softplus};
use crate::prior::{normal_ln_pdf, PriorSpec, Transform};
use crate::sampler::{Centre, LogDensity, ScaleGroup};

pub const SCHEMA_VERSION: u32 = 1;

/// Scale of the flat normal used for trial-level parameters not covered by
/// a stratified prior block.
pub const VAGUE_SD: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectStructure {
    CommonEffect,
    RandomEffects,
}

/// Which arm's log event rate carries the hierarchical prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    ControlAnchored,
    TreatmentAnchored,
}

impl Anchor {
    pub fn anchored_role(self) -> ArmRole {
        match self {
            Anchor::ControlAnchored => ArmRole::Control,
            Anchor::TreatmentAnchored => ArmRole::Treatment,
        }
    }

    pub fn swapped(self) -> Self {
        match self {
            Anchor::ControlAnchored => Anchor::TreatmentAnchored,
            Anchor::TreatmentAnchored => Anchor::ControlAnchored,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Borrowing {
    #[default]
    None,
    /// Mixture priors over hyperparameter blocks (`nu1`, `log_sigma1`, ...).
    NonStratified { priors: Vec<MixturePrior> },
    /// Mixture priors over trial-level blocks (`log_lambda0`, `log_mu0`,
    /// `log_mu1`), applied independently to every main trial.
    Stratified { priors: Vec<MixturePrior> },
}

impl Borrowing {
    pub fn priors(&self) -> &[MixturePrior] {
        match self {
            Borrowing::None => &[],
            Borrowing::NonStratified { priors } | Borrowing::Stratified { priors } => priors,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Borrowing::None)
    }
}

/// How trial-specific log hazard ratios are represented on the sampler's
/// scale: directly, or through standardised coordinates `xi_i` with
/// `phi_i = phi + eta * xi_i`. The centred form pairs with the sampler's
/// scale and shift moves and mixes well in both weak- and strong-data
/// regimes; the non-centred form can stall when `eta` and `phi` drift apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Centered,
    NonCentered,
}

pub const HYPER_NAMES: [&str; 6] = ["nu1", "sigma1", "nu2", "sigma2", "nu3", "sigma3"];

/// Model configuration; serialises to the versioned JSON config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub schema_version: u32,
    pub effect_structure: EffectStructure,
    pub anchor: Anchor,
    #[serde(default)]
    pub borrowing: Borrowing,
    pub priors: BTreeMap<String, PriorSpec>,
    #[serde(default)]
    pub effect_parameterization: Parameterization,
}

impl ModelSpec {
    /// Vague defaults: Normal(0, 100²) locations, HalfNormal(100) scales,
    /// Jeffreys Beta(0.5, 0.5) fatal fractions, Cauchy(0, 0.37) for the
    /// log hazard ratio and HalfNormal(0.5) for the heterogeneity.
    pub fn vague(effect_structure: EffectStructure, anchor: Anchor) -> Self {
        let mut priors = BTreeMap::new();
        for f in 1..=3 {
            priors.insert(format!("nu{f}"), PriorSpec::normal(0.0, 100.0));
            priors.insert(format!("sigma{f}"), PriorSpec::half_normal(100.0));
        }
        priors.insert("phi".into(), PriorSpec::cauchy(0.0, 0.37));
        priors.insert("q0".into(), PriorSpec::beta(0.5, 0.5));
        priors.insert("q1".into(), PriorSpec::beta(0.5, 0.5));
        if effect_structure == EffectStructure::RandomEffects {
            priors.insert("eta".into(), PriorSpec::half_normal(0.5));
        }
        Self {
            schema_version: SCHEMA_VERSION,
            effect_structure,
            anchor,
            borrowing: Borrowing::None,
            priors,
            effect_parameterization: Parameterization::default(),
        }
    }

    /// Weakly informative preset for yearly event and drop-out rates of the
    /// size seen in cardiovascular safety meta-analyses.
    pub fn rosiglitazone(effect_structure: EffectStructure) -> Self {
        let ln10 = 10f64.ln();
        Self::vague(effect_structure, Anchor::ControlAnchored)
            .with_prior("nu1", PriorSpec::normal(-4.27, ln10))
            .with_prior("sigma1", PriorSpec::half_normal(ln10))
            .with_prior("nu2", PriorSpec::normal(0.22f64.ln(), ln10))
            .with_prior("sigma2", PriorSpec::half_normal(ln10))
            .with_prior("nu3", PriorSpec::normal(0.22f64.ln(), ln10))
            .with_prior("sigma3", PriorSpec::half_normal(ln10))
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.effect_parameterization = p;
        self
    }

    pub fn with_prior(mut self, name: &str, prior: PriorSpec) -> Self {
        self.priors.insert(name.to_string(), prior);
        self
    }

    pub fn prior(&self, name: &str) -> Option<&PriorSpec> {
        self.priors.get(name)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let re = self.effect_structure == EffectStructure::RandomEffects;
        let stratified = matches!(self.borrowing, Borrowing::Stratified { .. });
        let mut required: Vec<&str> = vec!["phi", "q0", "q1"];
        if !stratified {
            required.extend(HYPER_NAMES);
        }
        if re {
            required.push("eta");
        } else if self.priors.contains_key("eta") {
            return Err(Error::Config("an eta prior is only allowed for random-effects models".into()));
        }
        for name in &required {
            if !self.priors.contains_key(*name) {
                return Err(Error::Config(format!("missing prior for {name}")));
            }
        }
        for (name, prior) in &self.priors {
            let known = HYPER_NAMES.contains(&name.as_str()) || ["phi", "eta", "q0", "q1"].contains(&name.as_str());
            if !known {
                return Err(Error::Config(format!("unknown parameter {name} in prior table")));
            }
            prior.check()?;
            let ok = if name.starts_with("sigma") {
                match *prior {
                    PriorSpec::HalfNormal { .. } => true,
                    PriorSpec::PointMass { value } => value > 0.0,
                    _ => false,
                }
            } else if name == "eta" {
                match *prior {
                    PriorSpec::HalfNormal { .. } => true,
                    PriorSpec::PointMass { value } => value >= 0.0,
                    _ => false,
                }
            } else if name.starts_with('q') {
                match *prior {
                    PriorSpec::Beta { .. } => true,
                    PriorSpec::PointMass { value } => value > 0.0 && value < 1.0,
                    _ => false,
                }
            } else {
                matches!(
                    prior,
                    PriorSpec::Normal { .. }
                        | PriorSpec::Cauchy { .. }
                        | PriorSpec::NormalMixture { .. }
                        | PriorSpec::PointMass { .. }
                )
            };
            if !ok {
                return Err(Error::Config(format!("prior {prior:?} is not allowed for {name}")));
            }
        }
        if !self.borrowing.is_none() && self.anchor != Anchor::ControlAnchored {
            return Err(Error::Config("MAP borrowing requires a control-anchored model".into()));
        }
        let mut seen = BTreeSet::new();
        for p in self.borrowing.priors() {
            p.check()?;
            let allowed: &[&str] = if stratified { &TRIAL_BLOCK_NAMES } else { &HYPER_BLOCK_NAMES };
            for name in &p.block {
                if !allowed.contains(&name.as_str()) {
                    return Err(Error::Config(format!(
                        "block parameter {name} does not match the borrowing mode (allowed: {})",
                        allowed.join(", ")
                    )));
                }
                if !seen.insert(name.clone()) {
                    return Err(Error::Config(format!("parameter {name} covered by two MAP priors")));
                }
                if let Some(h) = name.strip_prefix("log_") {
                    if !stratified && self.priors.get(h).and_then(PriorSpec::is_point_mass).is_some() {
                        return Err(Error::Config(format!("{h} is fixed and cannot carry a MAP prior")));
                    }
                } else if !stratified && self.priors.get(name.as_str()).and_then(PriorSpec::is_point_mass).is_some() {
                    return Err(Error::Config(format!("{name} is fixed and cannot carry a MAP prior")));
                }
            }
        }
        Ok(())
    }
}

/// Trial-level parameters of one main trial on the constrained scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub trial_id: String,
    /// Log event rate of the anchored arm.
    pub log_lambda_anchor: f64,
    pub log_mu0: f64,
    pub log_mu1: f64,
    /// Log hazard ratio applied in this trial (the common value under CE).
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalParams {
    pub trial_id: String,
    pub log_lambda0: f64,
    pub log_mu0: f64,
}

/// Every model parameter on the constrained scale. Absent entries are not
/// part of the model (for example hyperparameters under stratified
/// borrowing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub trials: Vec<TrialParams>,
    pub historical: Vec<HistoricalParams>,
    pub nu: [Option<f64>; 3],
    pub sigma: [Option<f64>; 3],
    pub phi: Option<f64>,
    pub eta: Option<f64>,
    pub q0: f64,
    pub q1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Free(usize),
    Fixed(f64),
    /// Non-centred trial effect `phi + eta * x[k]`.
    Effect(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Anchor(usize),
    Mu0(usize),
    Mu1(usize),
    TrialEffect(usize),
    HistLambda(usize),
    HistMu0(usize),
    Nu(usize),
    Sigma(usize),
    Phi,
    Eta,
    Q0,
    Q1,
}

#[derive(Debug, Clone)]
struct Coord {
    name: String,
    /// Name on the unconstrained scale when it differs from the default.
    raw_name: Option<String>,
    transform: Transform,
    role: Role,
    centre: f64,
}

#[derive(Debug, Clone)]
struct ArmTerm {
    kernel: ArmKernel,
    tau: f64,
    log_rate: Slot,
    /// Effect slot and sign added to `log_rate` to get the log event rate.
    effect: Option<(Slot, f64)>,
    log_mu: Slot,
    q: Slot,
}

#[derive(Debug, Clone)]
enum Term {
    Arm(ArmTerm),
    Normal { x: Slot, mean: Slot, sd: Slot },
    Prior { x: Slot, prior: PriorSpec },
    Mixture { mixture: usize, xs: Vec<Slot>, log_scale: Vec<bool> },
    Jacobian { k: usize, transform: Transform },
}

#[derive(Debug, Clone)]
struct MainSlots {
    trial_id: String,
    anchor: Slot,
    mu0: Slot,
    mu1: Slot,
    effect: Slot,
}

#[derive(Debug, Clone)]
struct HistSlots {
    trial_id: String,
    lambda0: Slot,
    mu0: Slot,
}

/// A hierarchical model compiled against one dataset.
#[derive(Debug, Clone)]
pub struct HierModel {
    spec: ModelSpec,
    coords: Vec<Coord>,
    terms: Vec<Term>,
    deps: Vec<Vec<usize>>,
    mixtures: Vec<CompiledMixture>,
    main: Vec<MainSlots>,
    hist: Vec<HistSlots>,
    nu: [Option<Slot>; 3],
    sigma: [Option<Slot>; 3],
    phi: Option<Slot>,
    eta: Option<Slot>,
    q0: Slot,
    q1: Option<Slot>,
    /// For every dataset arm in order: (trial index in dataset, role).
    arm_index: Vec<(usize, ArmRole)>,
    arm_terms: Vec<usize>,
}

fn jacobian(transform: Transform, x: f64) -> f64 {
    match transform {
        Transform::Identity => 0.0,
        Transform::Log => x,
        Transform::Logit => -softplus(-x) - softplus(x),
    }
}

fn apply(transform: Transform, x: f64) -> f64 {
    match transform {
        Transform::Identity => x,
        Transform::Log => x.exp(),
        Transform::Logit => sigmoid(x),
    }
}

fn invert(transform: Transform, y: f64) -> f64 {
    match transform {
        Transform::Identity => y,
        Transform::Log => y.ln(),
        Transform::Logit => logit(y),
    }
}

fn crude_log_rate(count: u64, n: u64, tau: f64) -> f64 {
    ((count as f64 + 0.5) / (n as f64 * tau)).ln()
}

struct Builder {
    coords: Vec<Coord>,
}

impl Builder {
    fn free(&mut self, name: String, transform: Transform, role: Role, centre: f64) -> Slot {
        self.coords.push(Coord {
            name,
            raw_name: None,
            transform,
            role,
            centre,
        });
        Slot::Free(self.coords.len() - 1)
    }
}

impl HierModel {
    /// Compile the model for `dataset`. Historical trials are allowed only
    /// for control-anchored models without MAP borrowing.
    pub fn new(spec: &ModelSpec, dataset: &Dataset) -> Result<Self> {
        Self::build(spec, dataset, true)
    }

    /// The same parameterisation with every likelihood term dropped, so the
    /// density is the joint prior.
    pub fn prior_only(spec: &ModelSpec, dataset: &Dataset) -> Result<Self> {
        Self::build(spec, dataset, false)
    }

    fn build(spec: &ModelSpec, dataset: &Dataset, include_likelihood: bool) -> Result<Self> {
        spec.check()?;
        let violations: Vec<String> = dataset
            .validate()
            .into_iter()
            .filter(|v| v.trial_id.is_some())
            .map(|v| v.to_string())
            .collect();
        if !violations.is_empty() {
            return Err(Error::InvalidData(violations.join("; ")));
        }
        if dataset.trials.is_empty() {
            return Err(Error::InvalidData("dataset has no trials".into()));
        }
        let n_hist = dataset.historical_trials().count();
        let has_main = dataset.main_trials().next().is_some();
        if n_hist > 0 && spec.anchor == Anchor::TreatmentAnchored {
            return Err(Error::Config(
                "historical control arms cannot be combined with a treatment-anchored model".into(),
            ));
        }
        if n_hist > 0 && !spec.borrowing.is_none() {
            return Err(Error::Config(
                "remove historical trials from the dataset when a MAP prior is attached".into(),
            ));
        }
        let re = spec.effect_structure == EffectStructure::RandomEffects;
        let stratified = matches!(spec.borrowing, Borrowing::Stratified { .. });
        let eta_prior = spec.prior("eta").cloned();
        let trial_effects = re && has_main && eta_prior.as_ref().and_then(PriorSpec::is_point_mass) != Some(0.0);
        let non_centered = spec.effect_parameterization == Parameterization::NonCentered;
        let covered: BTreeSet<String> = spec.borrowing.priors().iter().flat_map(|p| p.block.clone()).collect();

        let phi_centre = spec.prior("phi").map_or(0.0, PriorSpec::median);
        let mut b = Builder { coords: Vec::new() };
        let anchored = spec.anchor.anchored_role();

        let mut main = Vec::new();
        let mut family_centres: [Vec<f64>; 3] = Default::default();
        for (i, t) in dataset.main_trials().enumerate() {
            let a = t.arm(anchored).expect("validated");
            let c = t.control().expect("validated");
            let tr = t.treatment().expect("validated");
            let anchor_name = match spec.anchor {
                Anchor::ControlAnchored => "log_lambda0",
                Anchor::TreatmentAnchored => "log_lambda1",
            };
            let ca = crude_log_rate(a.y, a.n, a.tau);
            let c0 = crude_log_rate(c.z, c.n, c.tau);
            let c1 = crude_log_rate(tr.z, tr.n, tr.tau);
            family_centres[0].push(ca);
            family_centres[1].push(c0);
            family_centres[2].push(c1);
            let anchor = b.free(format!("{anchor_name}[{}]", t.trial_id), Transform::Identity, Role::Anchor(i), ca);
            let mu0 = b.free(format!("log_mu0[{}]", t.trial_id), Transform::Identity, Role::Mu0(i), c0);
            let mu1 = b.free(format!("log_mu1[{}]", t.trial_id), Transform::Identity, Role::Mu1(i), c1);
            let effect = if trial_effects && non_centered {
                let Slot::Free(k) = b.free(format!("phi[{}]", t.trial_id), Transform::Identity, Role::TrialEffect(i), 0.0) else {
                    unreachable!("free slot")
                };
                b.coords[k].raw_name = Some(format!("xi[{}]", t.trial_id));
                Slot::Effect(k)
            } else if trial_effects {
                b.free(format!("phi[{}]", t.trial_id), Transform::Identity, Role::TrialEffect(i), phi_centre)
            } else {
                Slot::Fixed(f64::NAN)
            };
            main.push(MainSlots {
                trial_id: t.trial_id.clone(),
                anchor,
                mu0,
                mu1,
                effect,
            });
        }
        let mut hist = Vec::new();
        for (h, t) in dataset.historical_trials().enumerate() {
            let c = t.control().expect("validated");
            let cl = crude_log_rate(c.y, c.n, c.tau);
            let cm = crude_log_rate(c.z, c.n, c.tau);
            family_centres[0].push(cl);
            family_centres[1].push(cm);
            let lambda0 = b.free(format!("log_lambda0[{}]", t.trial_id), Transform::Identity, Role::HistLambda(h), cl);
            let mu0 = b.free(format!("log_mu0[{}]", t.trial_id), Transform::Identity, Role::HistMu0(h), cm);
            hist.push(HistSlots {
                trial_id: t.trial_id.clone(),
                lambda0,
                mu0,
            });
        }

        // Globals.
        let global = |b: &mut Builder, name: &str, role: Role, centre: Option<f64>| -> Slot {
            let prior = spec.prior(name).expect("checked prior table");
            let log_name = format!("log_{name}");
            if covered.contains(name) || covered.contains(&log_name) {
                let t = if name.starts_with("sigma") { Transform::Log } else { Transform::Identity };
                let c = centre.unwrap_or_else(|| prior.median());
                return b.free(name.to_string(), t, role, invert(t, c));
            }
            match prior.is_point_mass() {
                Some(v) => Slot::Fixed(v),
                None => {
                    let t = prior.transform();
                    let c = centre.unwrap_or_else(|| prior.median());
                    b.free(name.to_string(), t, role, invert(t, c))
                }
            }
        };
        let mut nu = [None; 3];
        let mut sigma = [None; 3];
        if !stratified {
            for f in 0..3 {
                let used = if f == 2 { has_main } else { true };
                if used {
                    let centres = &family_centres[f];
                    let m = centres.iter().sum::<f64>() / centres.len() as f64;
                    nu[f] = Some(global(&mut b, HYPER_NAMES[2 * f], Role::Nu(f), Some(m)));
                    sigma[f] = Some(global(&mut b, HYPER_NAMES[2 * f + 1], Role::Sigma(f), Some(0.5)));
                }
            }
        }
        let phi = has_main.then(|| global(&mut b, "phi", Role::Phi, None));
        let eta = (re && has_main).then(|| global(&mut b, "eta", Role::Eta, None));
        let pooled_q = |role: ArmRole| {
            let (m, y) = dataset
                .trials
                .iter()
                .filter_map(|t| t.arm(role))
                .fold((0u64, 0u64), |(m, y), a| (m + a.m, y + a.y));
            ((m as f64 + 0.5) / (y as f64 + 1.0)).clamp(0.02, 0.98)
        };
        let q0 = global(&mut b, "q0", Role::Q0, Some(pooled_q(ArmRole::Control)));
        let q1 = has_main.then(|| global(&mut b, "q1", Role::Q1, Some(pooled_q(ArmRole::Treatment))));
        if !trial_effects {
            for m in &mut main {
                m.effect = phi.expect("main trials imply phi");
            }
        }

        // Terms.
        let mut terms = Vec::new();
        let mut arm_index = Vec::new();
        let mut arm_terms = Vec::new();
        let mut main_iter = 0;
        let mut hist_iter = 0;
        for (ti, t) in dataset.trials.iter().enumerate() {
            if t.historical {
                let s = &hist[hist_iter];
                hist_iter += 1;
                let arm = t.control().expect("validated");
                arm_index.push((ti, ArmRole::Control));
                if include_likelihood {
                    arm_terms.push(terms.len());
                    terms.push(Term::Arm(ArmTerm {
                        kernel: ArmKernel::new(arm),
                        tau: arm.tau,
                        log_rate: s.lambda0,
                        effect: None,
                        log_mu: s.mu0,
                        q: q0,
                    }));
                }
            } else {
                let s = &main[main_iter];
                main_iter += 1;
                for arm in &t.arms {
                    arm_index.push((ti, arm.arm_role));
                    if !include_likelihood {
                        continue;
                    }
                    let effect = if arm.arm_role == anchored {
                        None
                    } else if arm.arm_role == ArmRole::Treatment {
                        Some((s.effect, 1.0))
                    } else {
                        Some((s.effect, -1.0))
                    };
                    let (log_mu, q) = match arm.arm_role {
                        ArmRole::Control => (s.mu0, q0),
                        ArmRole::Treatment => (s.mu1, q1.expect("main trials imply q1")),
                    };
                    arm_terms.push(terms.len());
                    terms.push(Term::Arm(ArmTerm {
                        kernel: ArmKernel::new(arm),
                        tau: arm.tau,
                        log_rate: s.anchor,
                        effect,
                        log_mu,
                        q,
                    }));
                }
            }
        }

        let mut mixtures = Vec::new();
        if stratified {
            let vague = PriorSpec::normal(0.0, VAGUE_SD);
            let mut strat_covered = BTreeSet::new();
            for p in spec.borrowing.priors() {
                let idx = mixtures.len();
                mixtures.push(p.compile()?);
                for s in &main {
                    let xs = p
                        .block
                        .iter()
                        .map(|name| match name.as_str() {
                            "log_lambda0" => s.anchor,
                            "log_mu0" => s.mu0,
                            _ => s.mu1,
                        })
                        .collect();
                    terms.push(Term::Mixture {
                        mixture: idx,
                        xs,
                        log_scale: vec![false; p.block.len()],
                    });
                }
                strat_covered.extend(p.block.iter().cloned());
            }
            for s in &main {
                for (name, slot) in TRIAL_BLOCK_NAMES.iter().zip([s.anchor, s.mu0, s.mu1]) {
                    if !strat_covered.contains(*name) {
                        terms.push(Term::Prior {
                            x: slot,
                            prior: vague.clone(),
                        });
                    }
                }
            }
        } else {
            let family = |f: usize| (nu[f].expect("family present"), sigma[f].expect("family present"));
            for s in &main {
                let (m, sd) = family(0);
                terms.push(Term::Normal { x: s.anchor, mean: m, sd });
                let (m, sd) = family(1);
                terms.push(Term::Normal { x: s.mu0, mean: m, sd });
                let (m, sd) = family(2);
                terms.push(Term::Normal { x: s.mu1, mean: m, sd });
            }
            for s in &hist {
                let (m, sd) = family(0);
                terms.push(Term::Normal { x: s.lambda0, mean: m, sd });
                let (m, sd) = family(1);
                terms.push(Term::Normal { x: s.mu0, mean: m, sd });
            }
            for p in spec.borrowing.priors() {
                let mut xs = Vec::new();
                let mut log_scale = Vec::new();
                for name in &p.block {
                    let plain = name.strip_prefix("log_").unwrap_or(name);
                    let f = HYPER_NAMES.iter().position(|h| *h == plain).expect("checked block") / 2;
                    let slot = if plain.starts_with("sigma") { sigma[f] } else { nu[f] };
                    let slot = slot.ok_or_else(|| {
                        Error::Config(format!("MAP prior covers {name}, which this dataset does not use"))
                    })?;
                    xs.push(slot);
                    log_scale.push(plain.starts_with("sigma"));
                }
                let idx = mixtures.len();
                mixtures.push(p.compile()?);
                terms.push(Term::Mixture {
                    mixture: idx,
                    xs,
                    log_scale,
                });
            }
        }
        if trial_effects {
            for s in &main {
                terms.push(match s.effect {
                    Slot::Effect(k) => Term::Prior {
                        x: Slot::Free(k),
                        prior: PriorSpec::normal(0.0, 1.0),
                    },
                    x => Term::Normal {
                        x,
                        mean: phi.expect("main trials"),
                        sd: eta.expect("random effects"),
                    },
                });
            }
        }
        let mut globals: Vec<(&str, Slot)> = Vec::new();
        for f in 0..3 {
            if let (Some(n), Some(s)) = (nu[f], sigma[f]) {
                globals.push((HYPER_NAMES[2 * f], n));
                globals.push((HYPER_NAMES[2 * f + 1], s));
            }
        }
        globals.extend(phi.map(|s| ("phi", s)));
        globals.extend(eta.map(|s| ("eta", s)));
        globals.push(("q0", q0));
        globals.extend(q1.map(|s| ("q1", s)));
        for (name, slot) in globals {
            let is_covered = covered.contains(name) || covered.contains(&format!("log_{name}"));
            if matches!(slot, Slot::Free(_)) && !is_covered {
                terms.push(Term::Prior {
                    x: slot,
                    prior: spec.prior(name).expect("checked").clone(),
                });
            }
        }
        for (k, c) in b.coords.iter().enumerate() {
            if c.transform != Transform::Identity {
                terms.push(Term::Jacobian { k, transform: c.transform });
            }
        }

        let mut deps = vec![Vec::new(); b.coords.len()];
        for (ti, term) in terms.iter().enumerate() {
            let mut touched = BTreeSet::new();
            let mut touch = |s: Slot| match s {
                Slot::Free(k) => {
                    touched.insert(k);
                }
                Slot::Effect(k) => {
                    touched.insert(k);
                    for g in [phi, eta].into_iter().flatten() {
                        if let Slot::Free(j) = g {
                            touched.insert(j);
                        }
                    }
                }
                Slot::Fixed(_) => {}
            };
            match term {
                Term::Arm(a) => {
                    touch(a.log_rate);
                    if let Some((s, _)) = a.effect {
                        touch(s);
                    }
                    touch(a.log_mu);
                    touch(a.q);
                }
                Term::Normal { x, mean, sd } => {
                    touch(*x);
                    touch(*mean);
                    touch(*sd);
                }
                Term::Prior { x, .. } => touch(*x),
                Term::Mixture { xs, .. } => xs.iter().for_each(|s| touch(*s)),
                Term::Jacobian { k, .. } => touch(Slot::Free(*k)),
            }
            for k in touched {
                deps[k].push(ti);
            }
        }

        Ok(Self {
            spec: spec.clone(),
            coords: b.coords,
            terms,
            deps,
            mixtures,
            main,
            hist,
            nu,
            sigma,
            phi,
            eta,
            q0,
            q1,
            arm_index,
            arm_terms,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    #[inline]
    fn val(&self, x: &[f64], s: Slot) -> f64 {
        match s {
            Slot::Free(k) => apply(self.coords[k].transform, x[k]),
            Slot::Fixed(v) => v,
            Slot::Effect(k) => {
                let phi = self.phi.expect("effects imply phi");
                let eta = self.eta.expect("effects imply eta");
                self.val(x, phi) + self.val(x, eta) * x[k]
            }
        }
    }

    fn arm_rates(&self, x: &[f64], a: &ArmTerm) -> RateParams {
        let mut log_lambda = self.val(x, a.log_rate);
        if let Some((s, sign)) = a.effect {
            log_lambda += sign * self.val(x, s);
        }
        RateParams::new(log_lambda.exp(), self.val(x, a.log_mu).exp(), self.val(x, a.q), a.tau)
    }

    fn term(&self, x: &[f64], t: &Term) -> f64 {
        let v = match t {
            Term::Arm(a) => {
                let r = self.arm_rates(x, a);
                if !(r.lambda.is_finite() && r.mu.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                a.kernel.log_likelihood(&log_category_probs(&r))
            }
            Term::Normal { x: s, mean, sd } => {
                let sd = self.val(x, *sd);
                if !(sd > 0.0) {
                    return f64::NEG_INFINITY;
                }
                normal_ln_pdf(self.val(x, *s), self.val(x, *mean), sd)
            }
            Term::Prior { x: s, prior } => prior.ln_pdf(self.val(x, *s)),
            Term::Mixture { mixture, xs, log_scale } => {
                let mut buf = [0.0f64; 8];
                let mut jac = 0.0;
                for (j, (s, l)) in xs.iter().zip(log_scale).enumerate() {
                    buf[j] = match (*s, *l) {
                        (Slot::Free(k), true) => x[k],
                        (s, true) => self.val(x, s).ln(),
                        (s, false) => self.val(x, s),
                    };
                    if *l {
                        jac += buf[j];
                    }
                }
                self.mixtures[*mixture].ln_pdf(&buf[..xs.len()]) - jac
            }
            Term::Jacobian { k, transform } => jacobian(*transform, x[*k]),
        };
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn density(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for t in &self.terms {
            total += self.term(x, t);
            if total == f64::NEG_INFINITY {
                return total;
            }
        }
        total
    }

    /// Log posterior at the unconstrained point `v`, including the
    /// log-Jacobian of the transform.
    pub fn log_posterior(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.coords.len() {
            return Err(Error::Dimension {
                expected: self.coords.len(),
                found: v.len(),
            });
        }
        Ok(self.density(v))
    }

    /// Likelihood of the data alone at `v`.
    pub fn log_likelihood(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.coords.len() {
            return Err(Error::Dimension {
                expected: self.coords.len(),
                found: v.len(),
            });
        }
        Ok(self.arm_terms.iter().map(|&i| self.term(v, &self.terms[i])).sum())
    }

    /// Per-arm rates implied by `v`, in dataset order, with the arm's
    /// (trial index, role).
    pub fn rates(&self, v: &[f64]) -> Result<Vec<RateParams>> {
        if v.len() != self.coords.len() {
            return Err(Error::Dimension {
                expected: self.coords.len(),
                found: v.len(),
            });
        }
        if self.arm_terms.is_empty() && !self.arm_index.is_empty() {
            return Err(Error::Config("prior-only model has no likelihood terms".into()));
        }
        Ok(self
            .arm_terms
            .iter()
            .map(|&i| match &self.terms[i] {
                Term::Arm(a) => self.arm_rates(v, a),
                _ => unreachable!("arm term index"),
            })
            .collect())
    }

    pub fn arm_index(&self) -> &[(usize, ArmRole)] {
        &self.arm_index
    }

    /// Names of the unconstrained coordinates (`log_sigma1`, `logit_q0`, ...).
    pub fn coordinate_names(&self) -> Vec<String> {
        self.coords
            .iter()
            .map(|c| match c.transform {
                _ if c.raw_name.is_some() => c.raw_name.clone().expect("checked"),
                Transform::Identity => c.name.clone(),
                Transform::Log => format!("log_{}", c.name),
                Transform::Logit => format!("logit_{}", c.name),
            })
            .collect()
    }

    pub fn main_trial_ids(&self) -> Vec<String> {
        self.main.iter().map(|m| m.trial_id.clone()).collect()
    }

    /// Whether trial-specific effects are free parameters.
    pub fn has_trial_effects(&self) -> bool {
        self.coords.iter().any(|c| matches!(c.role, Role::TrialEffect(_)))
    }

    /// Map an unconstrained vector to the parameter state and the log
    /// absolute Jacobian determinant of the map.
    pub fn from_unconstrained(&self, v: &[f64]) -> Result<(ParamState, f64)> {
        if v.len() != self.coords.len() {
            return Err(Error::Dimension {
                expected: self.coords.len(),
                found: v.len(),
            });
        }
        if let Some(k) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite value for {}", self.coords[k].name)));
        }
        let val = |s: Slot| self.val(v, s);
        let n_effects = self.main.iter().filter(|m| matches!(m.effect, Slot::Effect(_))).count();
        let log_jac = self.coords.iter().zip(v).map(|(c, x)| jacobian(c.transform, *x)).sum::<f64>()
            + n_effects as f64 * self.eta.map_or(0.0, |e| val(e).ln());
        let state = ParamState {
            trials: self
                .main
                .iter()
                .map(|m| TrialParams {
                    trial_id: m.trial_id.clone(),
                    log_lambda_anchor: val(m.anchor),
                    log_mu0: val(m.mu0),
                    log_mu1: val(m.mu1),
                    phi: val(m.effect),
                })
                .collect(),
            historical: self
                .hist
                .iter()
                .map(|h| HistoricalParams {
                    trial_id: h.trial_id.clone(),
                    log_lambda0: val(h.lambda0),
                    log_mu0: val(h.mu0),
                })
                .collect(),
            nu: self.nu.map(|s| s.map(val)),
            sigma: self.sigma.map(|s| s.map(val)),
            phi: self.phi.map(val),
            eta: self.eta.map(val),
            q0: val(self.q0),
            q1: self.q1.map(val),
        };
        Ok((state, log_jac))
    }

    /// Inverse of [`HierModel::from_unconstrained`]. Fixed parameters in the
    /// state are ignored.
    pub fn to_unconstrained(&self, state: &ParamState) -> Result<Vec<f64>> {
        if state.trials.len() != self.main.len() || state.historical.len() != self.hist.len() {
            return Err(Error::Dimension {
                expected: self.main.len() + self.hist.len(),
                found: state.trials.len() + state.historical.len(),
            });
        }
        let missing = |name: &str| Error::Domain(format!("state has no value for {name}"));
        let non_centered = self.main.iter().any(|m| matches!(m.effect, Slot::Effect(_)));
        let (phi, eta) = if non_centered {
            let phi = state.phi.ok_or_else(|| missing("phi"))?;
            let eta = state.eta.ok_or_else(|| missing("eta"))?;
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::Domain(format!("eta = {eta} must be positive for non-centred effects")));
            }
            (phi, eta)
        } else {
            (0.0, 1.0)
        };
        self.coords
            .iter()
            .map(|c| {
                let y = match c.role {
                    Role::Anchor(i) => state.trials[i].log_lambda_anchor,
                    Role::Mu0(i) => state.trials[i].log_mu0,
                    Role::Mu1(i) => state.trials[i].log_mu1,
                    Role::TrialEffect(i) if c.raw_name.is_some() => (state.trials[i].phi - phi) / eta,
                    Role::TrialEffect(i) => state.trials[i].phi,
                    Role::HistLambda(h) => state.historical[h].log_lambda0,
                    Role::HistMu0(h) => state.historical[h].log_mu0,
                    Role::Nu(f) => state.nu[f].ok_or_else(|| missing(&c.name))?,
                    Role::Sigma(f) => state.sigma[f].ok_or_else(|| missing(&c.name))?,
                    Role::Phi => state.phi.ok_or_else(|| missing(&c.name))?,
                    Role::Eta => state.eta.ok_or_else(|| missing(&c.name))?,
                    Role::Q0 => state.q0,
                    Role::Q1 => state.q1.ok_or_else(|| missing(&c.name))?,
                };
                let ok = match c.transform {
                    Transform::Identity => y.is_finite(),
                    Transform::Log => y > 0.0 && y.is_finite(),
                    Transform::Logit => y > 0.0 && y < 1.0,
                };
                if !ok {
                    return Err(Error::Domain(format!("{} = {y} is outside its support", c.name)));
                }
                Ok(invert(c.transform, y))
            })
            .collect()
    }
}

impl LogDensity for HierModel {
    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.density(x)
    }

    fn coordinate_log_density(&self, x: &[f64], k: usize) -> f64 {
        let mut total = 0.0;
        for &t in &self.deps[k] {
            total += self.term(x, &self.terms[t]);
            if total == f64::NEG_INFINITY {
                return total;
            }
        }
        total
    }

    fn parameter_names(&self) -> Vec<String> {
        self.coords.iter().map(|c| c.name.clone()).collect()
    }

    fn coordinate_names(&self) -> Vec<String> {
        HierModel::coordinate_names(self)
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        self.coords
            .iter()
            .enumerate()
            .map(|(k, c)| match c.role {
                Role::TrialEffect(i) => self.val(x, self.main[i].effect),
                _ => apply(c.transform, x[k]),
            })
            .collect()
    }

    fn initial_point(&self) -> Vec<f64> {
        self.coords.iter().map(|c| c.centre).collect()
    }

    fn scale_groups(&self) -> Vec<ScaleGroup> {
        let log_coord = |s: Option<Slot>| match s {
            Some(Slot::Free(k)) if self.coords[k].transform == Transform::Log => Some(k),
            _ => None,
        };
        let centre = |s: Option<Slot>| match s {
            Some(Slot::Free(j)) if self.coords[j].transform == Transform::Identity => Some(Centre::Coord(j)),
            Some(Slot::Fixed(v)) => Some(Centre::Value(v)),
            _ => None,
        };
        let free = |slots: Vec<Slot>| -> Vec<usize> {
            slots
                .into_iter()
                .filter_map(|s| match s {
                    Slot::Free(k) => Some(k),
                    _ => None,
                })
                .collect()
        };
        let mut groups = Vec::new();
        if !matches!(self.spec.borrowing, Borrowing::Stratified { .. }) {
            let families: [Vec<Slot>; 3] = [
                self.main.iter().map(|m| m.anchor).chain(self.hist.iter().map(|h| h.lambda0)).collect(),
                self.main.iter().map(|m| m.mu0).chain(self.hist.iter().map(|h| h.mu0)).collect(),
                self.main.iter().map(|m| m.mu1).collect(),
            ];
            for (f, slots) in families.into_iter().enumerate() {
                if let (Some(k), Some(c)) = (log_coord(self.sigma[f]), centre(self.nu[f])) {
                    let members = free(slots);
                    if !members.is_empty() {
                        groups.push(ScaleGroup {
                            log_scale: k,
                            members,
                            centre: c,
                            standardised: false,
                        });
                    }
                }
            }
        }
        if let (Some(k), true) = (log_coord(self.eta), self.has_trial_effects()) {
            let standardised = self.main.iter().any(|m| matches!(m.effect, Slot::Effect(_)));
            let members: Vec<usize> = self
                .main
                .iter()
                .filter_map(|m| match m.effect {
                    Slot::Effect(j) | Slot::Free(j) => Some(j),
                    Slot::Fixed(_) => None,
                })
                .collect();
            let c = if standardised { Some(Centre::Value(0.0)) } else { centre(self.phi) };
            if let (Some(c), false) = (c, members.is_empty()) {
                groups.push(ScaleGroup {
                    log_scale: k,
                    members,
                    centre: c,
                    standardised,
                });
            }
        }
        groups
    }

    fn shift_groups(&self) -> Vec<Vec<usize>> {
        self.scale_groups()
            .into_iter()
            .filter_map(|g| match g.centre {
                Centre::Coord(j) if !g.standardised => Some(std::iter::once(j).chain(g.members).collect()),
                _ => None,
            })
            .collect()
    }
}
