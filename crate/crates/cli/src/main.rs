use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use peftlab::autodiff::Precision;
use peftlab::budget::{count_trainable, equalize, render_csv, render_text, solve_budget, Family};
use peftlab::experiment::{
    distance_experiment, evaluate_saved, run_experiment, size_experiment, sweep, ExperimentSpec, Overrides,
    ResultsStore,
};
use peftlab::model::ModelConfig;
use peftlab::peft::PeftMethod;

#[derive(Parser)]
#[command(name = "peftlab", version, about = "Parameter-efficient fine-tuning experiments on a small seq2seq transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Experiment spec (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Method override: full | noft | adapter:<b> | prefix:<p> | bitfit:lnbias | bitfit:lnweights | xattn
    #[arg(long)]
    method: Option<PeftMethod>,
    /// Seed override for model initialization and training
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = ExperimentSpec::load(&self.spec).with_context(|| format!("loading {}", self.spec.display()))?;
        spec.apply(&Overrides {
            method: self.method,
            seed: self.seed,
            output_dir: self.out.clone(),
            precision: self.precision.as_deref().map(str::parse::<Precision>).transpose()?,
        });
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and append its row to <out>/results.csv
    Train(SpecArgs),
    /// Score the saved checkpoint of a spec on its test split
    Evaluate(SpecArgs),
    /// Trainable-parameter accounting
    Budget(BudgetArgs),
    /// Budget sweep over method families against full fine-tuning
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',', default_value = "adapter,prefix")]
        families: Vec<Family>,
        /// Target trainable counts
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<u64>,
        /// Train the full fine-tuning baseline as part of the sweep
        #[arg(long)]
        include_full: bool,
    },
    /// Relative performance against synthetic language distance
    DistanceExperiment {
        #[command(flatten)]
        spec: SpecArgs,
        /// substitution:reorder pairs, e.g. 0:0,0.25:0.05,0.5:0.1
        #[arg(long, value_delimiter = ',', required = true)]
        distances: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<PeftMethod>,
    },
    /// Methods trained on nested subsets of the training data
    SizeExperiment {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',', default_value = "250,1000,4000,16000")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<PeftMethod>,
    },
    /// Print the results table of an output directory
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct BudgetArgs {
    /// Take the model shape from this spec
    #[arg(long, conflicts_with = "paper_scale")]
    spec: Option<PathBuf>,
    /// Use the 12+12 layer, d=1024 reference shape
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, value_delimiter = ',')]
    method: Vec<PeftMethod>,
    /// Size each family to match this method's count
    #[arg(long)]
    equalize_to: Option<PeftMethod>,
    /// Size each family to this trainable count
    #[arg(long, conflicts_with = "equalize_to")]
    target: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "adapter,prefix")]
    families: Vec<Family>,
    #[arg(long)]
    csv: bool,
}

fn parse_distance(s: &str) -> Result<(f64, f64)> {
    let Some((a, b)) = s.split_once(':') else {
        bail!("distance point {s:?} must look like <substitution>:<reorder>");
    };
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn model_config(args: &BudgetArgs) -> Result<ModelConfig> {
    Ok(match (&args.spec, args.paper_scale) {
        (Some(path), _) => ExperimentSpec::load(path)?.model,
        (None, true) => ModelConfig::paper_scale(),
        (None, false) => ModelConfig::default(),
    })
}

fn budget(args: &BudgetArgs) -> Result<()> {
    let config = model_config(args)?;
    let mut methods = args.method.clone();
    if let Some(anchor) = &args.equalize_to {
        methods.push(*anchor);
        for e in equalize(&config, &args.families, *anchor)? {
            eprintln!(
                "{}: {} trainable, {:+} ({:+.2}%) vs {anchor}",
                e.method, e.trainable, e.deviation, e.deviation_pct
            );
            methods.push(e.method);
        }
    }
    if let Some(target) = args.target {
        for &family in &args.families {
            methods.push(solve_budget(&config, family, target)?);
        }
    }
    if methods.is_empty() {
        methods = PeftMethod::representatives(8, 8).to_vec();
    }
    let reports: Vec<_> = methods.into_iter().map(|m| count_trainable(&config, m)).collect();
    print!("{}", if args.csv { render_csv(&reports) } else { render_text(&reports) });
    Ok(())
}

fn report(out: &Path) -> Result<()> {
    let store = ResultsStore::load(out)?;
    if store.rows().is_empty() {
        bail!("no results in {}", out.display());
    }
    store.save(out)?;
    let text = store.render_text();
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let spec = args.load()?;
            let out = run_experiment(&spec)?;
            println!("{}", peftlab::experiment::RESULTS_CSV_HEADER);
            println!("{}", out.result.csv_row());
        }
        Command::Evaluate(args) => {
            let metrics = evaluate_saved(&args.load()?)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Budget(args) => budget(&args)?,
        Command::Sweep {
            spec,
            families,
            budgets,
            include_full,
        } => print!("{}", sweep(&spec.load()?, &families, &budgets, include_full)?.csv),
        Command::DistanceExperiment {
            spec,
            distances,
            methods,
        } => {
            let points = distances.iter().map(|d| parse_distance(d)).collect::<Result<Vec<_>>>()?;
            let out = distance_experiment(&spec.load()?, &points, &methods)?;
            print!("{}\n{}", out.csv, out.correlation_csv);
        }
        Command::SizeExperiment { spec, sizes, methods } => {
            print!("{}", size_experiment(&spec.load()?, &sizes, &methods)?.csv)
        }
        Command::Report { out } => report(&out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
