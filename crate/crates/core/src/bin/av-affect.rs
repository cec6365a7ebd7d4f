use std::path::PathBuf;
use std::process::ExitCode;

use av_affect::orchestrator::{self, PipelineConfig};
use av_affect::Result;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "av-affect", version, about = "Audio-visual AU detection and expression recognition pipeline")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Visual-stage task alternation.
    #[arg(long, global = true, value_enum)]
    alternation: Option<Alternation>,
    /// Run output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Threads for frame decoding and feature preparation. Values above 1 may
    /// reorder floating-point work and relax bitwise reproducibility.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// AU decision threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Repeatable `key=value` overrides applied after the flags above.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Alternation {
    Epoch,
    Batch,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus to the dataset root.
    Synth,
    /// Parse, clean and de-duplicate annotations; write splits and statistics.
    PrepareData,
    /// Print label statistics of the training split.
    Stats,
    /// Train the visual model with alternating task heads.
    TrainVisual,
    /// Train the audio and sequence models with the visual model frozen.
    TrainAudioSequence,
    /// Evaluate on the validation split and write reports and predictions.
    Evaluate,
    /// prepare-data, train-visual, train-audio-sequence and evaluate in order.
    Run,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut o: Vec<(&str, String)> = Vec::new();
    if let Some(s) = cli.seed {
        o.push(("seed", s.to_string()));
    }
    if let Some(a) = cli.alternation {
        let v = match a {
            Alternation::Epoch => "epoch",
            Alternation::Batch => "batch",
        };
        o.push(("visual.alternation", v.into()));
    }
    if let Some(p) = &cli.out {
        o.push(("out_dir", p.display().to_string()));
    }
    if let Some(p) = &cli.data {
        o.push(("data_dir", p.display().to_string()));
    }
    if let Some(w) = cli.workers {
        o.push(("workers", w.to_string()));
    }
    if let Some(t) = cli.threshold {
        o.push(("metrics.threshold", t.to_string()));
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| av_affect::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        o.push((k.trim(), v.trim().to_string()));
    }
    orchestrator::resolve_config(cli.config.as_deref(), &o)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    match cli.command {
        Command::Synth => {
            orchestrator::cmd_synth(&cfg)?;
        }
        Command::PrepareData => {
            let s = orchestrator::cmd_prepare_data(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Stats => {
            let s = orchestrator::cmd_stats(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::TrainVisual => {
            let s = orchestrator::cmd_train_visual(&cfg)?;
            println!("{} steps -> {} ({})", s.history.steps.len(), s.checkpoint.display(), s.hash);
        }
        Command::TrainAudioSequence => {
            let s = orchestrator::cmd_train_sequence(&cfg)?;
            println!("{} steps -> {}", s.history.steps.len(), s.checkpoint.display());
        }
        Command::Evaluate => {
            let s = orchestrator::cmd_evaluate(&cfg)?;
            println!("{}", av_affect::metrics::MetricReport::csv_header());
            println!("{}\n{}", s.au.csv_line(), s.expr.csv_line());
        }
        Command::Run => {
            let s = orchestrator::run_pipeline(&cfg)?;
            println!("{}", av_affect::metrics::MetricReport::csv_header());
            println!("{}\n{}", s.eval.au.csv_line(), s.eval.expr.csv_line());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
