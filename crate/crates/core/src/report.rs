//! Model fitting pipeline and analysis reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DataFormat, Dataset};
use crate::error::{Error, Result};
use crate::model::{EffectStructure, HierModel, ModelSpec};
use crate::sampler::{run, ChainStats, Init, ParamSummary, PosteriorDraws, SamplerConfig, Summary};
use crate::sim::RHAT_THRESHOLD;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorProvenance {
    pub parameter: String,
    pub prior: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureProvenance {
    pub block: Vec<String>,
    pub components: usize,
    pub robust_weight: f64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub name: String,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub package: String,
    pub version: String,
    pub seed: u64,
}

/// Everything needed to read, audit and regenerate one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub report_version: u32,
    pub label: String,
    pub description: String,
    pub model: ModelSpec,
    pub sampler: SamplerConfig,
    pub data_sha256: String,
    pub data_provenance: String,
    pub level: f64,
    pub phi: ParamSummary,
    pub hr: ParamSummary,
    pub eta: Option<ParamSummary>,
    /// Trial-specific log hazard ratios (random-effects fits only).
    pub trial_effects: Vec<(String, ParamSummary)>,
    pub summary: Summary,
    pub diagnostics: Vec<DiagnosticRow>,
    pub chain_stats: Vec<ChainStats>,
    pub priors: Vec<PriorProvenance>,
    pub mixtures: Vec<MixtureProvenance>,
    pub converged: bool,
    pub nonconverged: Vec<String>,
    pub runtime: Runtime,
}

pub fn describe_model(spec: &ModelSpec) -> String {
    let effect = match spec.effect_structure {
        EffectStructure::CommonEffect => "common-effect",
        EffectStructure::RandomEffects => "random-effects",
    };
    let anchor = match spec.anchor {
        crate::model::Anchor::ControlAnchored => "control-anchored",
        crate::model::Anchor::TreatmentAnchored => "treatment-anchored",
    };
    let borrowing = match &spec.borrowing {
        crate::model::Borrowing::None => "no borrowing",
        crate::model::Borrowing::NonStratified { .. } => "non-stratified MAP borrowing",
        crate::model::Borrowing::Stratified { .. } => "stratified MAP borrowing",
    };
    format!("{effect}, {anchor}, {borrowing}")
}

pub fn default_label(spec: &ModelSpec) -> String {
    let e = match spec.effect_structure {
        EffectStructure::CommonEffect => "CE",
        EffectStructure::RandomEffects => "RE",
    };
    let p = if spec.borrowing.is_none() { "vague" } else { "MAP" };
    format!("{e}-{p}")
}

pub fn data_digest(dataset: &Dataset) -> String {
    let csv = dataset.serialize(DataFormat::Csv);
    Sha256::digest(csv.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Summary of `exp(phi)` derived from the summary of `phi`. Quantiles
/// commute with the monotone map, so the interval is exact; the mean is
/// taken over the transformed draws.
fn hr_summary(phi: &ParamSummary, phi_draws: &[f64]) -> ParamSummary {
    let mean = phi_draws.iter().map(|x| x.exp()).sum::<f64>() / phi_draws.len() as f64;
    ParamSummary {
        name: "hr".into(),
        mean,
        median: phi.median.exp(),
        lower: phi.lower.exp(),
        upper: phi.upper.exp(),
        rhat: phi.rhat,
        ess: phi.ess,
        insufficient_draws: phi.insufficient_draws,
    }
}

/// Fit `spec` to `dataset`. Historical trials are dropped when a MAP prior
/// is attached, since the prior already carries their information.
pub fn fit(dataset: &Dataset, spec: &ModelSpec, config: &SamplerConfig, level: f64) -> Result<(AnalysisReport, PosteriorDraws)> {
    let data = if spec.borrowing.is_none() {
        dataset.clone()
    } else {
        dataset.without_historical()
    };
    let model = HierModel::new(spec, &data)?;
    let draws = run(&model, config, &Init::Jittered)?;
    let report = build_report(&data, spec, config, &draws, level)?;
    Ok((report, draws))
}

pub fn build_report(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &SamplerConfig,
    draws: &PosteriorDraws,
    level: f64,
) -> Result<AnalysisReport> {
    let summary = draws.summarize(level)?;
    let phi = summary
        .get("phi")
        .cloned()
        .ok_or_else(|| Error::Config("phi is fixed; nothing to report".into()))?;
    let hr = hr_summary(&phi, &draws.column("phi").expect("phi present"));
    let eta = summary.get("eta").cloned();
    let trial_effects: Vec<(String, ParamSummary)> = summary
        .params
        .iter()
        .filter_map(|p| {
            let id = p.name.strip_prefix("phi[")?.strip_suffix(']')?;
            Some((id.to_string(), p.clone()))
        })
        .collect();
    let nonconverged: Vec<String> = std::iter::once(&phi)
        .chain(eta.as_ref())
        .filter(|p| p.rhat.is_some_and(|r| r > RHAT_THRESHOLD))
        .map(|p| p.name.clone())
        .collect();
    let diagnostics = summary
        .params
        .iter()
        .map(|p| DiagnosticRow {
            name: p.name.clone(),
            rhat: p.rhat,
            ess: p.ess,
        })
        .collect();
    let priors = spec
        .priors
        .iter()
        .map(|(k, v)| PriorProvenance {
            parameter: k.clone(),
            prior: serde_json::to_string(v).expect("prior serializes"),
        })
        .collect();
    let mixtures = spec
        .borrowing
        .priors()
        .iter()
        .map(|m| MixtureProvenance {
            block: m.block.clone(),
            components: m.components.len() + m.vague.len(),
            robust_weight: m.robust_weight,
            sha256: m.digest(),
        })
        .collect();
    Ok(AnalysisReport {
        report_version: REPORT_VERSION,
        label: default_label(spec),
        description: describe_model(spec),
        model: spec.clone(),
        sampler: config.clone(),
        data_sha256: data_digest(dataset),
        data_provenance: dataset.provenance.clone(),
        level,
        converged: nonconverged.is_empty(),
        nonconverged,
        phi,
        hr,
        eta,
        trial_effects,
        summary,
        diagnostics,
        chain_stats: draws.stats.clone(),
        priors,
        mixtures,
        runtime: Runtime {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
        },
    })
}

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.digits$}"))
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Forest-plot data: one row per trial-specific effect, then the overall
    /// effect, on both scales.
    pub fn forest_csv(&self) -> String {
        let mut out = String::from("label,log_hr,log_hr_lower,log_hr_upper,hr,hr_lower,hr_upper\n");
        let rows = self
            .trial_effects
            .iter()
            .map(|(id, s)| (format!("trial {id}"), s))
            .chain(std::iter::once((format!("overall ({})", self.label), &self.phi)));
        for (label, s) in rows {
            let _ = writeln!(
                out,
                "{label},{:?},{:?},{:?},{:?},{:?},{:?}",
                s.median,
                s.lower,
                s.upper,
                s.median.exp(),
                s.lower.exp(),
                s.upper.exp()
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let pct = self.level * 100.0;
        let mut out = String::new();
        if !self.converged {
            let _ = writeln!(
                out,
                "*** NOT CONVERGED: R-hat above {RHAT_THRESHOLD} for {} ***\n",
                self.nonconverged.join(", ")
            );
        }
        let _ = writeln!(out, "Model: {} ({})", self.label, self.description);
        let _ = writeln!(out, "Data: {} [sha256 {}]", self.data_provenance, &self.data_sha256[..12]);
        let _ = writeln!(
            out,
            "Sampler: {} chains x ({} warmup + {} sampling), seed {}\n",
            self.sampler.n_chains, self.sampler.warmup_iterations, self.sampler.sampling_iterations, self.sampler.seed
        );
        let _ = writeln!(out, "{:<14} {:>9} {:>21}", "model", "HR", format!("{pct}% CI"));
        let _ = writeln!(
            out,
            "{:<14} {:>9.3} {:>21}\n",
            self.label,
            self.hr.median,
            format!("[{:.3}, {:.3}]", self.hr.lower, self.hr.upper)
        );
        let _ = writeln!(out, "{:<18} {:>9} {:>9} {:>9} {:>9} {:>7} {:>8}", "parameter", "mean", "median", "lower", "upper", "R-hat", "ESS");
        let focus = std::iter::once(&self.phi).chain(std::iter::once(&self.hr)).chain(self.eta.as_ref());
        let effects = self.trial_effects.iter().map(|(_, s)| s);
        for s in focus.chain(effects) {
            let _ = writeln!(
                out,
                "{:<18} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>8}",
                s.name,
                s.mean,
                s.median,
                s.lower,
                s.upper,
                opt(s.rhat, 3),
                opt(s.ess, 0)
            );
        }
        if !self.mixtures.is_empty() {
            out.push_str("\nMAP priors:\n");
            for m in &self.mixtures {
                let _ = writeln!(
                    out,
                    "  [{}] {} components, robust weight {}, sha256 {}",
                    m.block.join(", "),
                    m.components,
                    m.robust_weight,
                    m.sha256
                );
            }
        }
        let worst = self
            .diagnostics
            .iter()
            .filter_map(|d| d.rhat.map(|r| (r, &d.name)))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((r, name)) = worst {
            let _ = writeln!(out, "\nLargest R-hat: {r:.3} ({name})");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::oncology_dataset;
    use crate::model::Anchor;

    fn quick() -> SamplerConfig {
        SamplerConfig {
            warmup_iterations: 500,
            sampling_iterations: 500,
            seed: 11,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn hr_is_exact_transform_and_forest_matches() {
        let spec = ModelSpec::vague(EffectStructure::RandomEffects, Anchor::TreatmentAnchored);
        let (rep, draws) = fit(&oncology_dataset(), &spec, &quick(), 0.95).unwrap();
        assert_eq!(rep.hr.lower, rep.phi.lower.exp());
        assert_eq!(rep.hr.upper, rep.phi.upper.exp());
        assert_eq!(rep.trial_effects.len(), 9);
        let s = draws.summarize(0.95).unwrap();
        let forest = rep.forest_csv();
        let lines: Vec<&str> = forest.lines().collect();
        assert_eq!(lines.len(), 11);
        let first: Vec<&str> = lines[1].split(',').collect();
        let p1 = s.get("phi[1]").unwrap();
        assert_eq!(first[0], "trial 1");
        assert_eq!(first[2].parse::<f64>().unwrap(), p1.lower);
        assert_eq!(first[3].parse::<f64>().unwrap(), p1.upper);
        assert!(rep.to_text().contains("RE-vague"));
        let back = AnalysisReport::from_json(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn regeneration_is_exact() {
        let spec = ModelSpec::vague(EffectStructure::CommonEffect, Anchor::TreatmentAnchored);
        let (a, _) = fit(&oncology_dataset(), &spec, &quick(), 0.95).unwrap();
        let (b, _) = fit(&oncology_dataset(), &a.model, &a.sampler, a.level).unwrap();
        assert_eq!(a, b);
        assert!(a.trial_effects.is_empty());
        assert!(a.eta.is_none());
    }
}
