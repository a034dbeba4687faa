//! `eventmeta` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid data or non-converged fit, 2 usage,
//! input or runtime errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use eventmeta::exec::Execution;
use eventmeta::map_prior::{self, BorrowingMode};
use eventmeta::model::{Anchor, Borrowing, EffectStructure, ModelSpec};
use eventmeta::report::{fit, AnalysisReport};
use eventmeta::sampler::SamplerConfig;
use eventmeta::sim::{bundled_scenario, bundled_scenarios, run_scenario, ScenarioSpec};
use eventmeta::{DataFormat, Dataset, MixturePrior};

#[derive(Parser)]
#[command(name = "eventmeta", version, about = "Bayesian meta-analysis of aggregate clinical-event data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset against every consistency rule.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit a model and write the report, forest-plot data and draws.
    Fit(FitArgs),
    /// Derive a robust meta-analytic-predictive prior from historical trials.
    Map(MapArgs),
    /// Run a simulation scenario.
    Simulate(SimArgs),
    /// Re-render a saved report, optionally re-running it to check that
    /// every number is reproduced.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct SamplerFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
}

impl SamplerFlags {
    fn apply(&self, mut c: SamplerConfig) -> SamplerConfig {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.chains {
            c.n_chains = n;
        }
        if let Some(n) = self.warmup {
            c.warmup_iterations = n;
        }
        if let Some(n) = self.samples {
            c.sampling_iterations = n;
        }
        c
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model configuration (JSON). Defaults to vague random effects,
    /// control anchored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// MAP prior from `eventmeta map` to attach.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Exit 0 even when R-hat exceeds the threshold.
    #[arg(long)]
    allow_nonconverged: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    NonStratified,
    Stratified,
}

#[derive(Args)]
struct MapArgs {
    /// Dataset whose historical trials feed the prior.
    #[arg(long)]
    data: PathBuf,
    /// Model configuration for the historical fit (JSON). Defaults to vague
    /// common effect, control anchored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Robustification weight on the fitted mixture.
    #[arg(long, default_value_t = 0.5)]
    weight: f64,
    #[arg(long, value_enum, default_value = "non-stratified")]
    mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    max_components: usize,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Bundled scenario name (rosi-1 .. rosi-8, onc-1 .. onc-8).
    #[arg(long, conflicts_with = "scenario")]
    bundled: Option<String>,
    /// Scenario specification (JSON).
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[command(flatten)]
    sampler: SamplerFlags,
    /// List the bundled scenarios and exit.
    #[arg(long)]
    list: bool,
    /// Run replications on one thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by `eventmeta fit`.
    #[arg(long)]
    input: PathBuf,
    /// Re-fit this dataset with the embedded configuration and compare.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_data(path: &Path) -> Result<Dataset> {
    let text = read(path)?;
    Dataset::parse(&text, DataFormat::from_path(path)).with_context(|| format!("cannot parse {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// A prior file holds either a full borrowing configuration or a single
/// mixture, which is attached non-stratified.
fn load_borrowing(path: &Path) -> Result<Borrowing> {
    let text = read(path)?;
    if let Ok(b) = serde_json::from_str::<Borrowing>(&text) {
        return Ok(b);
    }
    let prior: MixturePrior =
        serde_json::from_str(&text).with_context(|| format!("{} is neither a borrowing configuration nor a mixture prior", path.display()))?;
    Ok(Borrowing::NonStratified { priors: vec![prior] })
}

fn validate(data: &Path) -> Result<ExitCode> {
    let dataset = load_data(data)?;
    let violations = dataset.validate();
    if violations.is_empty() {
        println!("{}: {} trials, no violations", data.display(), dataset.trials.len());
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("{v}");
    }
    println!("{} violation(s)", violations.len());
    Ok(ExitCode::from(1))
}

fn cmd_fit(args: &FitArgs) -> Result<ExitCode> {
    let dataset = load_data(&args.data)?;
    let mut spec = match &args.config {
        Some(p) => ModelSpec::from_json(&read(p)?).with_context(|| format!("invalid model config {}", p.display()))?,
        None => ModelSpec::vague(EffectStructure::RandomEffects, Anchor::ControlAnchored),
    };
    if let Some(p) = &args.prior {
        spec = map_prior::attach_all(&spec, &load_borrowing(p)?)?;
    }
    let config = args.sampler.apply(SamplerConfig::default());
    let (report, draws) = fit(&dataset, &spec, &config, args.level)?;
    write(&args.out_dir, "report.json", &report.to_json())?;
    write(&args.out_dir, "report.txt", &report.to_text())?;
    write(&args.out_dir, "forest.csv", &report.forest_csv())?;
    write(&args.out_dir, "draws.csv", &draws.to_csv())?;
    print!("{}", report.to_text());
    if !report.converged && !args.allow_nonconverged {
        eprintln!("not converged; rerun with more iterations or pass --allow-nonconverged");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_map(args: &MapArgs) -> Result<ExitCode> {
    let dataset = load_data(&args.data)?;
    let spec = match &args.config {
        Some(p) => ModelSpec::from_json(&read(p)?)?,
        None => ModelSpec::vague(EffectStructure::CommonEffect, Anchor::ControlAnchored),
    };
    let mode = match args.mode {
        ModeArg::NonStratified => BorrowingMode::NonStratified,
        ModeArg::Stratified => BorrowingMode::Stratified,
    };
    let config = args.sampler.apply(SamplerConfig::default());
    let borrowing = map_prior::derive(&dataset, &spec, mode, args.weight, &config, args.max_components)?;
    let json = serde_json::to_string_pretty(&borrowing)?;
    let path = write(&args.out_dir, "map_prior.json", &json)?;
    for p in borrowing.priors() {
        let vague: f64 = p.vague.iter().map(|v| v.weight).sum();
        println!(
            "[{}] {} normal component(s), robust weight {}, vague weight {vague}, sha256 {}",
            p.block.join(", "),
            p.components.len(),
            p.robust_weight,
            p.digest()
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: &SimArgs) -> Result<ExitCode> {
    if args.list {
        for s in bundled_scenarios() {
            println!("{:<8} {}", s.name, s.description);
        }
        return Ok(ExitCode::SUCCESS);
    }
    let mut spec = match (&args.bundled, &args.scenario) {
        (Some(name), _) => bundled_scenario(name)?,
        (None, Some(p)) => ScenarioSpec::from_json(&read(p)?)?,
        (None, None) => bail!("give --bundled NAME or --scenario PATH"),
    };
    if let Some(r) = args.reps {
        spec.n_replications = r;
    }
    if let Some(s) = args.sampler.seed {
        spec.seed = s;
    }
    spec.sampler = args.sampler.apply(spec.sampler);
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let result = run_scenario(&spec, exec)?;
    write(&args.out_dir, &format!("{}_scenario.json", spec.name), &spec.to_json())?;
    write(&args.out_dir, &format!("{}_result.json", spec.name), &result.to_json())?;
    let csv = result.to_csv();
    write(&args.out_dir, &format!("{}_table.csv", spec.name), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: &ReportArgs) -> Result<ExitCode> {
    let report = AnalysisReport::from_json(&read(&args.input)?)?;
    print!("{}", report.to_text());
    if let Some(dir) = &args.out_dir {
        write(dir, "report.txt", &report.to_text())?;
        write(dir, "forest.csv", &report.forest_csv())?;
    }
    if let Some(data) = &args.data {
        let dataset = load_data(data)?;
        let (again, _) = fit(&dataset, &report.model, &report.sampler, report.level)?;
        if again == report {
            println!("regenerated: all numbers reproduced exactly");
        } else {
            println!("regenerated: numbers differ from the saved report");
            return Ok(ExitCode::from(1));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Validate { data } => validate(data),
        Command::Fit(a) => cmd_fit(a),
        Command::Map(a) => cmd_map(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
