//! Meta-analytic-predictive (MAP) priors from historical control arms.
//!
//! A hierarchical fit to the historical trials gives posterior draws of the
//! hyperparameters and, per draw, one predictive draw of a new trial's
//! control event rate and drop-out rates. Normal mixtures fitted to those
//! draws are robustified with a vague component and attached to a model
//! either at the hyperparameter level (non-stratified) or per trial
//! (stratified).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::mixture::{fit_normal_mixture, CompiledNormal, NormalComponent, PercentileCheck};
use crate::model::{Anchor, Borrowing, EffectStructure, HierModel, ModelSpec};
use crate::prior::{PriorSpec, Transform};
use crate::rng::stream_rng;
use crate::sampler::{run, Init, PosteriorDraws, SamplerConfig};

/// Parameters a non-stratified prior may cover: hyper locations and log scales.
pub const HYPER_BLOCK_NAMES: [&str; 6] = ["nu1", "log_sigma1", "nu2", "log_sigma2", "nu3", "log_sigma3"];
/// Parameters a stratified prior may cover: one trial's control log event
/// rate and both log drop-out rates.
pub const TRIAL_BLOCK_NAMES: [&str; 3] = ["log_lambda0", "log_mu0", "log_mu1"];

/// Block used for non-stratified priors derived by [`derive`].
pub const DEFAULT_HYPER_BLOCK: [&str; 4] = ["nu1", "log_sigma1", "nu2", "log_sigma2"];

/// Names of the predictive draws returned by [`fit_historical`].
pub const PREDICTIVE_NAMES: [&str; 3] = ["pred_log_lambda0", "pred_log_mu0", "pred_log_mu1"];

const WEIGHT_TOL: f64 = 1e-12;

/// A vague mixture component: independent marginals, one per block
/// coordinate. Each marginal is a prior on the natural scale of its
/// parameter; its density on the block coordinate includes the change of
/// variables implied by [`PriorSpec::transform`] (so a half-normal marginal
/// on a `log_sigma` coordinate is a prior on `sigma`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VagueComponent {
    pub weight: f64,
    pub marginals: Vec<PriorSpec>,
}

impl VagueComponent {
    /// Normal(0, 100²) for locations and log rates, HalfNormal(100) for
    /// scales (on `log_sigma` coordinates).
    pub fn default_for(block: &[String]) -> Self {
        Self {
            weight: 1.0,
            marginals: block
                .iter()
                .map(|n| {
                    if n.starts_with("log_sigma") {
                        PriorSpec::half_normal(100.0)
                    } else {
                        PriorSpec::normal(0.0, 100.0)
                    }
                })
                .collect(),
        }
    }
}

fn marginal_ln_pdf(p: &PriorSpec, x: f64) -> f64 {
    match p.transform() {
        Transform::Identity => p.ln_pdf(x),
        Transform::Log => p.ln_pdf(x.exp()) + x,
        Transform::Logit => {
            let s = crate::math::sigmoid(x);
            p.ln_pdf(s) + s.ln() + (1.0 - s).ln()
        }
    }
}

/// Record of how a mixture was fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub criterion: String,
    pub scores: Vec<f64>,
    pub n_draws: usize,
    pub percentile_check: PercentileCheck,
}

/// Weighted normal mixture over a named parameter block, plus optional
/// vague components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePrior {
    pub block: Vec<String>,
    pub components: Vec<NormalComponent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vague: Vec<VagueComponent>,
    /// Total weight of the informative (normal) components.
    pub robust_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitRecord>,
}

impl MixturePrior {
    pub fn dim(&self) -> usize {
        self.block.len()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.dim();
        if d == 0 || d > 8 {
            return bad(format!("mixture block must have 1 to 8 parameters, got {d}"));
        }
        for (i, n) in self.block.iter().enumerate() {
            if self.block[..i].contains(n) {
                return bad(format!("duplicate block parameter {n}"));
            }
        }
        let mut total = 0.0;
        for c in &self.components {
            if c.dim() != d || c.sd.len() != d {
                return bad("mixture component dimension does not match its block".into());
            }
            if !(c.weight >= 0.0) || c.sd.iter().any(|s| !(*s > 0.0 && s.is_finite())) || c.mean.iter().any(|m| !m.is_finite()) {
                return bad("mixture components need non-negative weights, finite means and positive scales".into());
            }
            total += c.weight;
        }
        let informative = total;
        for v in &self.vague {
            if v.marginals.len() != d || !(v.weight >= 0.0) {
                return bad("vague component must have one marginal per block parameter".into());
            }
            for m in &v.marginals {
                m.check()?;
                if m.is_point_mass().is_some() {
                    return bad("vague marginals cannot be point masses".into());
                }
            }
            total += v.weight;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return bad(format!("mixture weights sum to {total}, not 1"));
        }
        if !(0.0..=1.0).contains(&self.robust_weight) || (informative - self.robust_weight).abs() > WEIGHT_TOL {
            return bad(format!(
                "robust_weight {} does not match the informative weight {informative}",
                self.robust_weight
            ));
        }
        Ok(())
    }

    pub fn compile(&self) -> Result<CompiledMixture> {
        self.check()?;
        Ok(CompiledMixture {
            normals: self.components.iter().map(CompiledNormal::new).collect::<Result<_>>()?,
            vague: self.vague.iter().map(|v| (v.weight.ln(), v.marginals.clone())).collect(),
        })
    }

    /// Log density at a block point (coordinates in block order).
    pub fn ln_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(self.compile()?.ln_pdf(x))
    }

    /// SHA-256 of the canonical JSON form, for provenance records.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("mixture serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Cheap-to-evaluate form of a [`MixturePrior`].
#[derive(Debug, Clone)]
pub struct CompiledMixture {
    normals: Vec<CompiledNormal>,
    vague: Vec<(f64, Vec<PriorSpec>)>,
}

impl CompiledMixture {
    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        let normals = self.normals.iter().map(|c| c.weighted_ln_pdf(x));
        let vague = self.vague.iter().map(|(lw, ms)| {
            if *lw == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            lw + ms.iter().zip(x).map(|(m, xi)| marginal_ln_pdf(m, *xi)).sum::<f64>()
        });
        log_sum_exp(normals.chain(vague))
    }
}

/// Scale every existing component by `w` and append `vague` with weight
/// `1 - w`. With `w = 1` the prior is returned unchanged.
pub fn robustify(prior: &MixturePrior, w: f64, vague: &VagueComponent) -> Result<MixturePrior> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("robust weight must lie in [0, 1], got {w}")));
    }
    if vague.marginals.len() != prior.dim() {
        return Err(Error::Dimension {
            expected: prior.dim(),
            found: vague.marginals.len(),
        });
    }
    if w == 1.0 {
        return Ok(prior.clone());
    }
    let mut out = prior.clone();
    for c in &mut out.components {
        c.weight *= w;
    }
    for v in &mut out.vague {
        v.weight *= w;
    }
    out.vague.push(VagueComponent {
        weight: 1.0 - w,
        marginals: vague.marginals.clone(),
    });
    out.robust_weight = prior.robust_weight * w;
    Ok(out)
}

/// Fit a normal mixture to `draws` (rows in `block` order).
pub fn fit_mixture(draws: &[Vec<f64>], block: &[&str], max_components: usize) -> Result<MixturePrior> {
    if draws.iter().any(|r| r.len() != block.len()) {
        return Err(Error::Dimension {
            expected: block.len(),
            found: draws.iter().map(Vec::len).find(|l| *l != block.len()).unwrap_or(0),
        });
    }
    let fit = fit_normal_mixture(draws, max_components)?;
    Ok(MixturePrior {
        block: block.iter().map(|s| s.to_string()).collect(),
        components: fit.components,
        vague: Vec::new(),
        robust_weight: 1.0,
        fit: Some(FitRecord {
            criterion: fit.criterion,
            scores: fit.scores,
            n_draws: draws.len(),
            percentile_check: fit.check,
        }),
    })
}

/// Hierarchical fit to the historical control arms of `dataset`.
///
/// The returned draws hold `nu1, sigma1, nu2, sigma2, nu3, sigma3` and one
/// predictive triple per draw (see [`PREDICTIVE_NAMES`]). Historical trials
/// have no treatment arms, so `nu3, sigma3` are not identified by them;
/// they are reported as copies of `nu2, sigma2` and the predictive
/// treatment drop-out rate is drawn from that distribution.
pub fn fit_historical(dataset: &Dataset, spec: &ModelSpec, config: &SamplerConfig) -> Result<PosteriorDraws> {
    if spec.anchor != Anchor::ControlAnchored {
        return Err(Error::Config("MAP derivation requires a control-anchored model".into()));
    }
    let historical = dataset.historical_only();
    if historical.trials.len() < 2 {
        return Err(Error::InsufficientHistorical {
            found: historical.trials.len(),
        });
    }
    let mut hspec = spec.clone();
    hspec.effect_structure = EffectStructure::CommonEffect;
    hspec.priors.remove("eta");
    hspec.borrowing = Borrowing::None;
    let model = HierModel::new(&hspec, &historical)?;
    let draws = run(&model, config, &Init::Jittered)?;

    let idx = |name: &str| draws.index_of(name).ok_or_else(|| Error::Config(format!("{name} is fixed; MAP derivation needs it free")));
    let (i_nu1, i_s1, i_nu2, i_s2) = (idx("nu1")?, idx("sigma1")?, idx("nu2")?, idx("sigma2")?);
    let p = draws.names.len();
    let names: Vec<String> = ["nu1", "sigma1", "nu2", "sigma2", "nu3", "sigma3"]
        .iter()
        .chain(PREDICTIVE_NAMES.iter())
        .map(|s| s.to_string())
        .collect();
    let constrained = draws
        .constrained
        .iter()
        .enumerate()
        .map(|(c, chain)| {
            let mut rng = stream_rng(config.seed, &[u64::MAX, c as u64]);
            let mut out = Vec::with_capacity(draws.n_draws * names.len());
            for row in chain.chunks(p) {
                let (nu1, s1, nu2, s2) = (row[i_nu1], row[i_s1], row[i_nu2], row[i_s2]);
                let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                out.extend_from_slice(&[nu1, s1, nu2, s2, nu2, s2, nu1 + s1 * z[0], nu2 + s2 * z[1], nu2 + s2 * z[2]]);
            }
            out
        })
        .collect();
    Ok(PosteriorDraws {
        names,
        dim: draws.dim,
        n_draws: draws.n_draws,
        unconstrained: draws.unconstrained,
        constrained,
        stats: draws.stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorrowingMode {
    NonStratified,
    Stratified,
}

/// Attach `prior` to `spec` under `mode`. Several priors may be attached
/// under the same mode as long as their blocks are disjoint.
pub fn attach(spec: &ModelSpec, prior: MixturePrior, mode: BorrowingMode) -> Result<ModelSpec> {
    let mut out = spec.clone();
    out.borrowing = match (std::mem::take(&mut out.borrowing), mode) {
        (Borrowing::None, BorrowingMode::NonStratified) => Borrowing::NonStratified { priors: vec![prior] },
        (Borrowing::None, BorrowingMode::Stratified) => Borrowing::Stratified { priors: vec![prior] },
        (Borrowing::NonStratified { mut priors }, BorrowingMode::NonStratified) => {
            priors.push(prior);
            Borrowing::NonStratified { priors }
        }
        (Borrowing::Stratified { mut priors }, BorrowingMode::Stratified) => {
            priors.push(prior);
            Borrowing::Stratified { priors }
        }
        _ => {
            return Err(Error::Config("stratified and non-stratified borrowing cannot be combined".into()));
        }
    };
    out.check()?;
    Ok(out)
}

/// Attach every prior of a serialised borrowing configuration.
pub fn attach_all(spec: &ModelSpec, borrowing: &Borrowing) -> Result<ModelSpec> {
    let mode = match borrowing {
        Borrowing::None => return Ok(spec.clone()),
        Borrowing::NonStratified { .. } => BorrowingMode::NonStratified,
        Borrowing::Stratified { .. } => BorrowingMode::Stratified,
    };
    borrowing
        .priors()
        .iter()
        .try_fold(spec.clone(), |s, p| attach(&s, p.clone(), mode))
}

/// Full MAP pipeline: fit the historical trials, fit mixtures to the
/// relevant draws, robustify with weight `w` and return the borrowing
/// configuration.
pub fn derive(
    dataset: &Dataset,
    spec: &ModelSpec,
    mode: BorrowingMode,
    w: f64,
    config: &SamplerConfig,
    max_components: usize,
) -> Result<Borrowing> {
    let draws = fit_historical(dataset, spec, config)?;
    let columns = |names: &[&str]| -> Vec<Vec<f64>> {
        let cols: Vec<Vec<f64>> = names
            .iter()
            .map(|n| {
                let (plain, log) = match n.strip_prefix("log_sigma") {
                    Some(f) => (format!("sigma{f}"), true),
                    None => (n.to_string(), false),
                };
                let c = draws.column(&plain).expect("known column");
                if log {
                    c.into_iter().map(f64::ln).collect()
                } else {
                    c
                }
            })
            .collect();
        (0..cols[0].len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
    };
    match mode {
        BorrowingMode::NonStratified => {
            let fitted = fit_mixture(&columns(&DEFAULT_HYPER_BLOCK), &DEFAULT_HYPER_BLOCK, max_components)?;
            let vague = VagueComponent::default_for(&fitted.block);
            Ok(Borrowing::NonStratified {
                priors: vec![robustify(&fitted, w, &vague)?],
            })
        }
        BorrowingMode::Stratified => {
            let priors = TRIAL_BLOCK_NAMES
                .iter()
                .zip(PREDICTIVE_NAMES)
                .map(|(block, pred)| {
                    let fitted = fit_mixture(&columns(&[pred]), &[block], max_components)?;
                    robustify(&fitted, w, &VagueComponent::default_for(&fitted.block))
                })
                .collect::<Result<_>>()?;
            Ok(Borrowing::Stratified { priors })
        }
    }
}
