//! Adaptive random-walk Metropolis over unconstrained log densities.
//!
//! Each iteration performs one componentwise sweep (per-coordinate scales
//! tuned during warmup) followed by one joint move with a proposal
//! covariance learned from warmup draws, and one block move per declared
//! scale or shift group. Adaptation is frozen after warmup.
//! Chain `c` draws from the stream `stream_rng(seed, [c])`, so results do
//! not depend on scheduling.

mod diagnostics;
mod summary;

pub use diagnostics::{bulk_ess, split_rhat};
pub use summary::{summarize_column, ParamSummary, Summary};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::rng::{stream_rng, StreamRng};

/// A target density on the real line in `dim()` coordinates.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Unnormalised log density; `-inf` is allowed.
    fn log_density(&self, x: &[f64]) -> f64;

    /// Log density restricted to the terms that depend on coordinate `k`.
    /// For two points differing only in coordinate `k`, the difference of
    /// this value must equal the difference of [`LogDensity::log_density`].
    fn coordinate_log_density(&self, x: &[f64], k: usize) -> f64 {
        let _ = k;
        self.log_density(x)
    }

    /// Names of the constrained parameters returned by [`LogDensity::constrain`].
    fn parameter_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    fn constrain(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    /// Centre for jittered initialisation.
    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    /// Name of the parameter block responsible for a non-finite density.
    fn describe_failure(&self, x: &[f64]) -> String {
        let names = self.coordinate_names();
        (0..self.dim())
            .find(|&k| {
                let v = self.coordinate_log_density(x, k);
                v.is_nan() || v == f64::NEG_INFINITY
            })
            .and_then(|k| names.get(k).cloned())
            .unwrap_or_else(|| "all parameters".into())
    }

    /// Labels of the unconstrained coordinates.
    fn coordinate_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("x[{i}]")).collect()
    }

    /// Hierarchical scale parameters whose members should move with them.
    fn scale_groups(&self) -> Vec<ScaleGroup> {
        Vec::new()
    }

    /// Sets of coordinates that are also proposed as a block shifted by a
    /// common amount (a location parameter together with its members).
    fn shift_groups(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Centre {
    Coord(usize),
    Value(f64),
}

/// A log-scale coordinate together with the coordinates it scales. The
/// scale move shifts the log scale by `e` and rescales every member
/// (deviations from `centre` by `exp(e)`, or standardised members by
/// `exp(-e)`), which keeps the members' fit to the data while the scale
/// changes. This removes the funnel that stalls one-coordinate moves when
/// the scale is near zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGroup {
    pub log_scale: usize,
    pub members: Vec<usize>,
    pub centre: Centre,
    pub standardised: bool,
}

impl ScaleGroup {
    fn propose(&self, x: &[f64], e: f64, out: &mut [f64]) -> f64 {
        out.copy_from_slice(x);
        out[self.log_scale] += e;
        if self.standardised {
            let f = (-e).exp();
            for &k in &self.members {
                out[k] *= f;
            }
            -(self.members.len() as f64) * e
        } else {
            let c = match self.centre {
                Centre::Coord(j) => x[j],
                Centre::Value(v) => v,
            };
            let f = e.exp();
            for &k in &self.members {
                out[k] = c + f * (x[k] - c);
            }
            self.members.len() as f64 * e
        }
    }
}

/// Adapter turning a closure into a [`LogDensity`].
pub struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnDensity<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub warmup_iterations: usize,
    pub sampling_iterations: usize,
    pub seed: u64,
    /// Acceptance rate targeted by the joint covariance move.
    pub target_acceptance: f64,
    /// Acceptance rate targeted by the one-dimensional moves.
    pub componentwise_target: f64,
    /// Standard deviation of the initial jitter around the centre.
    pub init_jitter: f64,
    pub max_init_attempts: usize,
    /// Bounds for the adapted log proposal scales.
    pub min_log_scale: f64,
    pub max_log_scale: f64,
    pub execution: Execution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            warmup_iterations: 2000,
            sampling_iterations: 2000,
            seed: 20_240_101,
            target_acceptance: 0.234,
            componentwise_target: 0.44,
            init_jitter: 1.0,
            max_init_attempts: 100,
            min_log_scale: -12.0,
            max_log_scale: 6.0,
            execution: Execution::default(),
        }
    }
}

impl SamplerConfig {
    pub fn check(&self) -> Result<()> {
        if self.n_chains < 2 {
            return Err(Error::Config("at least 2 chains are required".into()));
        }
        if self.warmup_iterations < 4 || self.sampling_iterations < 4 {
            return Err(Error::Config("warmup and sampling iterations must be at least 4".into()));
        }
        for (name, v) in [
            ("target_acceptance", self.target_acceptance),
            ("componentwise_target", self.componentwise_target),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if !(self.init_jitter >= 0.0 && self.init_jitter.is_finite()) || self.max_init_attempts == 0 {
            return Err(Error::Config("invalid initialisation settings".into()));
        }
        if self.min_log_scale >= self.max_log_scale {
            return Err(Error::Config("min_log_scale must be below max_log_scale".into()));
        }
        Ok(())
    }
}

/// Where chains start.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    /// Normal jitter around [`LogDensity::initial_point`].
    #[default]
    Jittered,
    /// Normal jitter around the given point.
    Around(Vec<f64>),
    /// Start exactly here.
    Exact(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub componentwise_acceptance: f64,
    pub joint_acceptance: f64,
    #[serde(default)]
    pub scale_acceptance: f64,
    pub init_attempts: usize,
}

/// Post-warmup draws of every chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub dim: usize,
    pub n_draws: usize,
    /// Per chain, row-major `n_draws x dim`.
    pub unconstrained: Vec<Vec<f64>>,
    /// Per chain, row-major `n_draws x names.len()`.
    pub constrained: Vec<Vec<f64>>,
    pub stats: Vec<ChainStats>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.constrained.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of one constrained parameter, one vector per chain.
    pub fn chains(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let j = self.index_of(name)?;
        let p = self.names.len();
        Some(
            self.constrained
                .iter()
                .map(|c| (0..self.n_draws).map(|i| c[i * p + j]).collect())
                .collect(),
        )
    }

    /// Draws of one constrained parameter pooled over chains.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        Some(self.chains(name)?.concat())
    }

    /// Unconstrained row `i` of chain `c`.
    pub fn unconstrained_row(&self, c: usize, i: usize) -> &[f64] {
        &self.unconstrained[c][i * self.dim..(i + 1) * self.dim]
    }

    /// Append a derived parameter computed row by row from the constrained draws.
    pub fn with_derived(mut self, name: &str, f: impl Fn(&[f64]) -> f64) -> Self {
        let p = self.names.len();
        for chain in &mut self.constrained {
            let mut out = Vec::with_capacity(self.n_draws * (p + 1));
            for row in chain.chunks(p) {
                out.extend_from_slice(row);
                out.push(f(row));
            }
            *chain = out;
        }
        self.names.push(name.to_string());
        self
    }

    /// CSV with one row per draw: chain, iteration, constrained parameters.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("chain,iteration");
        for n in &self.names {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        let p = self.names.len();
        for (c, chain) in self.constrained.iter().enumerate() {
            for (i, row) in chain.chunks(p).enumerate() {
                out.push_str(&format!("{c},{i}"));
                for v in row {
                    out.push_str(&format!(",{v:?}"));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn summarize(&self, level: f64) -> Result<Summary> {
        summary::summarize(self, level)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Run all chains and return the post-warmup draws.
pub fn run<D: LogDensity + ?Sized>(density: &D, config: &SamplerConfig, init: &Init) -> Result<PosteriorDraws> {
    config.check()?;
    let d = density.dim();
    if d == 0 {
        return Err(Error::Config("target has no free parameters".into()));
    }
    match init {
        Init::Around(p) | Init::Exact(p) if p.len() != d => {
            return Err(Error::Dimension { expected: d, found: p.len() });
        }
        _ => {}
    }
    let chains = map_indexed(config.n_chains, config.execution, |c| run_chain(density, config, init, c));
    let mut unconstrained = Vec::with_capacity(chains.len());
    let mut constrained = Vec::with_capacity(chains.len());
    let mut stats = Vec::with_capacity(chains.len());
    for chain in chains {
        let (u, k, s) = chain?;
        unconstrained.push(u);
        constrained.push(k);
        stats.push(s);
    }
    Ok(PosteriorDraws {
        names: density.parameter_names(),
        dim: d,
        n_draws: config.sampling_iterations,
        unconstrained,
        constrained,
        stats,
    })
}

fn initialise<D: LogDensity + ?Sized>(
    density: &D,
    config: &SamplerConfig,
    init: &Init,
    rng: &mut StreamRng,
) -> Result<(Vec<f64>, usize)> {
    let d = density.dim();
    let centre = match init {
        Init::Exact(p) => {
            let lp = density.log_density(p);
            if lp.is_finite() {
                return Ok((p.clone(), 1));
            }
            return Err(Error::Initialization {
                attempts: 1,
                block: density.describe_failure(p),
            });
        }
        Init::Around(p) => p.clone(),
        Init::Jittered => density.initial_point(),
    };
    let mut x = vec![0.0; d];
    for attempt in 1..=config.max_init_attempts {
        for (xi, ci) in x.iter_mut().zip(&centre) {
            let z: f64 = rng.sample(StandardNormal);
            *xi = ci + config.init_jitter * z;
        }
        if density.log_density(&x).is_finite() {
            return Ok((x, attempt));
        }
    }
    Err(Error::Initialization {
        attempts: config.max_init_attempts,
        block: density.describe_failure(&x),
    })
}

struct JointProposal {
    chol: DMatrix<f64>,
    log_scale: f64,
}

fn proposal_from(history: &[Vec<f64>], fallback_scales: &[f64]) -> DMatrix<f64> {
    let d = fallback_scales.len();
    let diag = || DMatrix::from_fn(d, d, |i, j| if i == j { fallback_scales[i] } else { 0.0 });
    if history.len() < 2 * d + 10 {
        return diag();
    }
    let n = history.len() as f64;
    let mut mean = DVector::zeros(d);
    for h in history {
        mean += DVector::from_column_slice(h);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for h in history {
        let diff = DVector::from_column_slice(h) - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= n - 1.0;
    for i in 0..d {
        cov[(i, i)] += 1e-8 * cov[(i, i)].max(1e-12) + 1e-12;
    }
    match cov.cholesky() {
        Some(c) => c.l(),
        None => diag(),
    }
}

type ChainOutput = (Vec<f64>, Vec<f64>, ChainStats);

fn run_chain<D: LogDensity + ?Sized>(density: &D, config: &SamplerConfig, init: &Init, chain: usize) -> Result<ChainOutput> {
    let d = density.dim();
    let mut rng = stream_rng(config.seed, &[chain as u64]);
    let (mut x, init_attempts) = initialise(density, config, init, &mut rng)?;

    let warmup = config.warmup_iterations;
    let joint_start = warmup / 2;
    let history_start = warmup / 4;
    let refresh = warmup * 3 / 4;
    let mut log_scales = vec![0.0f64; d];
    let mut joint: Option<JointProposal> = None;
    let mut history: Vec<Vec<f64>> = Vec::new();
    let base_joint = 2.38 / (d as f64).sqrt();

    let total = warmup + config.sampling_iterations;
    let names_len = density.parameter_names().len();
    let mut out_u = Vec::with_capacity(config.sampling_iterations * d);
    let mut out_c = Vec::with_capacity(config.sampling_iterations * names_len);
    let (mut cw_acc, mut cw_tries, mut j_acc, mut j_tries) = (0u64, 0u64, 0u64, 0u64);
    let mut proposal = vec![0.0; d];
    let mut step = vec![0.0; d];
    let groups = density.scale_groups();
    let shifts = density.shift_groups();
    let mut group_scales = vec![-1.0f64; groups.len() + shifts.len()];
    let (mut g_acc, mut g_tries) = (0u64, 0u64);

    for it in 0..total {
        let adapting = it < warmup;
        let gain = 1.0 / ((it + 1) as f64).powf(0.6);

        // Componentwise sweep.
        for k in 0..d {
            let current = density.coordinate_log_density(&x, k);
            let old = x[k];
            let z: f64 = rng.sample(StandardNormal);
            x[k] = old + log_scales[k].exp() * z;
            let proposed = density.coordinate_log_density(&x, k);
            let log_u = rng.random::<f64>().ln();
            let accept = proposed.is_finite() && (log_u < proposed - current || current == f64::NEG_INFINITY);
            if !accept {
                x[k] = old;
            }
            if adapting {
                let a = if accept { 1.0 } else { 0.0 };
                log_scales[k] = (log_scales[k] + gain * (a - config.componentwise_target))
                    .clamp(config.min_log_scale, config.max_log_scale);
            } else {
                cw_tries += 1;
                cw_acc += u64::from(accept);
            }
        }

        // Joint move.
        if adapting && it == joint_start || adapting && it == refresh {
            let scales: Vec<f64> = log_scales.iter().map(|s| s.exp()).collect();
            let chol = proposal_from(&history, &scales);
            let log_scale = joint.as_ref().map_or(0.0, |j| j.log_scale);
            joint = Some(JointProposal { chol, log_scale });
            if it == refresh {
                history.drain(..history.len() / 2);
            }
        }
        if let Some(j) = joint.as_mut() {
            for s in step.iter_mut() {
                *s = rng.sample(StandardNormal);
            }
            let scale = base_joint * j.log_scale.exp();
            for i in 0..d {
                let mut v = 0.0;
                for (l, s) in j.chol.row(i).iter().zip(&step).take(i + 1) {
                    v += l * s;
                }
                proposal[i] = x[i] + scale * v;
            }
            let current = density.log_density(&x);
            let proposed = density.log_density(&proposal);
            let log_u = rng.random::<f64>().ln();
            let accept = proposed.is_finite() && log_u < proposed - current;
            if accept {
                x.copy_from_slice(&proposal);
            }
            if adapting {
                let a = if accept { 1.0 } else { 0.0 };
                j.log_scale = (j.log_scale + gain * (a - config.target_acceptance))
                    .clamp(config.min_log_scale, config.max_log_scale);
            } else {
                j_tries += 1;
                j_acc += u64::from(accept);
            }
        }

        // Scale and shift moves.
        if !group_scales.is_empty() {
            let mut current = density.log_density(&x);
            for g in 0..group_scales.len() {
                let e = group_scales[g].exp() * rng.sample::<f64, _>(StandardNormal);
                let log_jac = match groups.get(g) {
                    Some(group) => group.propose(&x, e, &mut proposal),
                    None => {
                        proposal.copy_from_slice(&x);
                        for &k in &shifts[g - groups.len()] {
                            proposal[k] += e;
                        }
                        0.0
                    }
                };
                let proposed = density.log_density(&proposal);
                let log_u = rng.random::<f64>().ln();
                let accept = proposed.is_finite() && log_u < proposed - current + log_jac;
                if accept {
                    x.copy_from_slice(&proposal);
                    current = proposed;
                }
                if adapting {
                    let a = if accept { 1.0 } else { 0.0 };
                    group_scales[g] = (group_scales[g] + gain * (a - config.componentwise_target))
                        .clamp(config.min_log_scale, config.max_log_scale);
                } else {
                    g_tries += 1;
                    g_acc += u64::from(accept);
                }
            }
        }

        if adapting {
            if it >= history_start {
                history.push(x.clone());
            }
        } else {
            out_u.extend_from_slice(&x);
            out_c.extend(density.constrain(&x));
        }
    }
    let rate = |a: u64, t: u64| if t == 0 { 0.0 } else { a as f64 / t as f64 };
    Ok((
        out_u,
        out_c,
        ChainStats {
            componentwise_acceptance: rate(cw_acc, cw_tries),
            joint_acceptance: rate(j_acc, j_tries),
            scale_acceptance: rate(g_acc, g_tries),
            init_attempts,
        },
    ))
}
