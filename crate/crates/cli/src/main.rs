use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hallucheck_core::eval::ThresholdNormalization;
use hallucheck_core::manifest::{ExperimentManifest, SubsetSpec};
use hallucheck_core::nli::MockNliConfig;
use hallucheck_core::pipeline;
use hallucheck_core::synthetic::{flipped_questions, synthetic_fixture, write_fixture};
use hallucheck_core::MetricName;

#[derive(Parser)]
#[command(name = "hallucheck", version, about = "Detect hallucinated QA answers with perturbed prompts and NLI")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache every completion the configured metrics need.
    Collect(Common),
    /// Score collected items from the cache.
    Score(Common),
    /// Compute AUROC/AUPRC, PR curves and breakdown tables.
    Eval(EvalArgs),
    /// Print a written report as markdown.
    Report(ReportArgs),
    /// Run collect, score and eval in sequence.
    Run(EvalArgs),
    /// Suggest factuality labels for references, flagging unclear ones.
    Triage(Common),
    /// Write a self-contained synthetic experiment with offline mocks.
    Demo(DemoArgs),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Comma-separated metric names, e.g. f_certain,log_p.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    /// Output directory (overrides the manifest).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, requires = "subset_size")]
    subset_seed: Option<u64>,
    #[arg(long, requires = "subset_seed")]
    subset_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Normalization {
    Minmax,
    Sigmoid,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Score file to evaluate; defaults to `<out>/scores.jsonl`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Label file (overrides the manifest).
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum)]
    threshold_normalization: Option<Normalization>,
    /// Also write pr_curve.svg.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required_unless_present = "report")]
    manifest: Option<PathBuf>,
    /// Write the markdown here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Path to report.json; defaults to `<out>/report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Directory to write the experiment into.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    items: usize,
    /// Fraction of items whose NLI verdicts are inverted.
    #[arg(long, default_value_t = 0.0)]
    flip_rate: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn load(common: &Common) -> Result<ExperimentManifest> {
    let mut m = ExperimentManifest::load(&common.manifest)
        .with_context(|| format!("loading manifest {}", common.manifest.display()))?;
    if let Some(d) = &common.cache_dir {
        m.cache_dir = Some(d.clone());
    }
    if let Some(o) = &common.out {
        m.output_dir = o.clone();
    }
    if let Some(names) = &common.metrics {
        m.metrics = names
            .iter()
            .map(|n| n.trim().parse::<MetricName>())
            .collect::<Result<_, _>>()
            .map_err(anyhow::Error::msg)?;
    }
    if let (Some(seed), Some(size)) = (common.subset_seed, common.subset_size) {
        m.subset = Some(SubsetSpec { seed, size });
    }
    m.validate()?;
    Ok(m)
}

fn apply_eval_flags(m: &mut ExperimentManifest, args: &EvalArgs) -> Result<()> {
    if let Some(l) = &args.labels {
        if !l.exists() {
            bail!("label file {} does not exist", l.display());
        }
        m.labels_path = Some(l.clone());
    }
    if let Some(n) = args.threshold_normalization {
        m.threshold_normalization = match n {
            Normalization::Minmax => ThresholdNormalization::Minmax,
            Normalization::Sigmoid => ThresholdNormalization::Sigmoid,
        };
    }
    m.svg |= args.svg;
    Ok(())
}

fn collect(m: &ExperimentManifest) -> Result<()> {
    let llm = pipeline::open_configured_llm(m)?;
    let s = pipeline::collect(m, &llm)?;
    println!(
        "collected {} items: {} greedy generations, {} sample sets ({})",
        s.items,
        s.generations,
        s.sample_sets,
        m.cache_dir().display()
    );
    Ok(())
}

fn score(m: &ExperimentManifest) -> Result<()> {
    let llm = pipeline::open_configured_llm(m)?;
    let nli = pipeline::open_configured_nli(m)?;
    let scores = pipeline::score(m, &llm, &nli)?;
    println!(
        "wrote {} scores to {}",
        scores.len(),
        m.output_dir.join(pipeline::SCORES_FILE).display()
    );
    Ok(())
}

fn eval(m: &ExperimentManifest, scores: Option<&Path>) -> Result<()> {
    let summary = pipeline::evaluate(m, scores)?;
    print!("{}", hallucheck_core::report::metrics_table(&summary.metrics));
    println!("report written to {}", m.output_dir.display());
    Ok(())
}

fn demo(args: &DemoArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.flip_rate) {
        bail!("--flip-rate must lie in [0, 1]");
    }
    let f = synthetic_fixture(args.items);
    let nli = MockNliConfig {
        flip_questions: flipped_questions(&f.items, args.flip_rate, args.seed),
        ..MockNliConfig::default()
    };
    let path = write_fixture(&args.dir, &f, &nli, &MetricName::ALL)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect(c) => collect(&load(&c)?),
        Command::Score(c) => score(&load(&c)?),
        Command::Eval(args) => {
            let mut m = load(&args.common)?;
            apply_eval_flags(&mut m, &args)?;
            eval(&m, args.scores.as_deref())
        }
        Command::Run(args) => {
            let mut m = load(&args.common)?;
            apply_eval_flags(&mut m, &args)?;
            collect(&m)?;
            score(&m)?;
            eval(&m, args.scores.as_deref())
        }
        Command::Report(args) => {
            let path = match (&args.report, &args.manifest) {
                (Some(r), _) => r.clone(),
                (None, Some(mp)) => {
                    ExperimentManifest::load(mp)?.output_dir.join(pipeline::REPORT_FILE)
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            let md = pipeline::load_report(&path)?.to_markdown();
            match &args.out {
                Some(o) => fs::write(o, &md).with_context(|| format!("writing {}", o.display()))?,
                None => print!("{md}"),
            }
            Ok(())
        }
        Command::Triage(c) => {
            let m = load(&c)?;
            let llm = pipeline::open_configured_llm(&m)?;
            let nli = pipeline::open_configured_nli(&m)?;
            let t = pipeline::triage(&m, &llm, &nli)?;
            let human = t
                .iter()
                .filter(|r| r.outcome == hallucheck_core::eval::TriageOutcome::NeedsHuman)
                .count();
            println!("{} items triaged, {human} need a human", t.len());
            Ok(())
        }
        Command::Demo(args) => demo(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
