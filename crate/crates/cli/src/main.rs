use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use darslp::generator::Phase;
use darslp::pipeline::{generate_from_text_file, Pipeline, PipelineConfig, Stage, StageOutcome};
use darslp::plots::PlotKind;
use darslp::Error;

#[derive(Parser, Debug)]
#[command(name = "darslp", version, about = "Gloss-free sign pose generation pipeline")]
struct Cli {
    /// JSON pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory holding all artifacts.
    #[arg(long, global = true, env = "DARSLP_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Global seed; every stage derives its own substream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dotted config override, e.g. `gen.lr=1e-4`. Repeatable.
    #[arg(long = "stage-override", global = true, value_name = "KEY=VAL")]
    overrides: Vec<String>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate and import an extracted corpus into the workdir.
    PrepareData {
        /// Directory with train/dev/test split subdirectories.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus into the workdir.
    SynthData,
    TrainAe,
    ExtractLatents,
    ComputePriors,
    TrainGenPhase1,
    TrainGenPhase2,
    /// Train one generator phase.
    TrainGen {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        phase: u8,
    },
    /// Generate poses for the evaluation splits, or for an index file of texts.
    Generate {
        /// `index.jsonl` whose entries name DEMB1 embedding files.
        #[arg(long, requires = "out")]
        text_file: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        gen_ckpt: Option<PathBuf>,
        #[arg(long)]
        ae_ckpt: Option<PathBuf>,
    },
    /// Score generated poses against ground truth.
    Evaluate {
        /// Split to evaluate (dev or test). Repeatable.
        #[arg(long)]
        split: Vec<String>,
    },
    /// Latent statistics, region projections and density-difference maps.
    AnalyzeLatents {
        /// stats, projection or density-diff. Repeatable.
        #[arg(long)]
        what: Vec<String>,
    },
    /// Run every stage in order.
    Pipeline,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

fn json_list(items: &[String]) -> String {
    serde_json::to_string(items).expect("string list")
}

fn report(outcomes: &[StageOutcome]) {
    for o in outcomes {
        if o.cached {
            println!("{}: cached", o.step);
        } else {
            println!("{}: done", o.step);
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(dir) = &cli.workdir {
        overrides.push(format!("paths.workdir={}", serde_json::to_string(dir)?));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.command {
        Command::PrepareData { corpus: Some(dir) } => {
            overrides.push(format!("paths.corpus={}", serde_json::to_string(dir)?));
        }
        Command::Evaluate { split } if !split.is_empty() => {
            overrides.push(format!("eval.splits={}", json_list(split)));
        }
        Command::AnalyzeLatents { what } if !what.is_empty() => {
            for w in what {
                w.parse::<PlotKind>()?;
            }
            overrides.push(format!("analysis.what={}", json_list(what)));
        }
        _ => {}
    }
    overrides.extend(cli.overrides.iter().cloned());

    if let Command::ShowConfig = cli.command {
        let cfg = base.with_overrides(&overrides)?.effective();
        cfg.validate()?;
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let pipeline = Pipeline::open(&base, &overrides)?;
    let stage = match &cli.command {
        Command::PrepareData { .. } => Stage::PrepareData,
        Command::SynthData => Stage::SynthData,
        Command::TrainAe => Stage::TrainAe,
        Command::ExtractLatents => Stage::ExtractLatents,
        Command::ComputePriors => Stage::ComputePriors,
        Command::TrainGenPhase1 => Stage::TrainGenPhase1,
        Command::TrainGenPhase2 => Stage::TrainGenPhase2,
        Command::TrainGen { phase } => match Phase::from_number(*phase)? {
            Phase::One => Stage::TrainGenPhase1,
            Phase::Two => Stage::TrainGenPhase2,
        },
        Command::Generate {
            text_file: Some(text_file),
            out,
            gen_ckpt,
            ae_ckpt,
        } => {
            let phase = pipeline.config().eval.phase;
            let gen_ckpt = gen_ckpt.clone().unwrap_or_else(|| pipeline.generator_path(phase));
            let ae_ckpt = ae_ckpt.clone().unwrap_or_else(|| pipeline.ae_path());
            let out = out.as_ref().expect("required by clap");
            let generated = generate_from_text_file(text_file, &gen_ckpt, &ae_ckpt, pipeline.layout(), out)?;
            println!("generated {} sequences into {}", generated.len(), out.display());
            return Ok(());
        }
        Command::Generate { .. } => Stage::Generate,
        Command::Evaluate { .. } => Stage::Evaluate,
        Command::AnalyzeLatents { .. } => Stage::AnalyzeLatents,
        Command::Pipeline => {
            report(&pipeline.run_all()?);
            return Ok(());
        }
        Command::ShowConfig => unreachable!("handled above"),
    };
    report(&pipeline.run_stage(stage)?);
    Ok(())
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
