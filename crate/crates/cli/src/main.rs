mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;
use config::RunConfig;

/// Emotion-aware explanation generation for recommendations.
#[derive(Parser)]
#[command(name = "emoter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic review corpus.
    Synth(Common),
    /// Tag, split and index a corpus; print dataset statistics.
    Prepare(Common),
    /// Train a model, then generate and score the test split.
    Train(Common),
    /// Generate explanations for every record in a file.
    Generate(Common),
    /// Score generated explanations against references.
    Evaluate(Common),
    /// Emotion distribution and bias of generated explanations.
    Audit(Common),
    /// Train the loss-setting by intensity grid.
    Ablate(Common),
    /// Compare analytic and numeric gradients on a small model.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    intensity: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    /// Review records (JSONL)
    #[arg(long)]
    records: Option<PathBuf>,
    /// Emotion lexicon (word<TAB>category<TAB>score); defaults to the built-in fixture
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Number of random splits to train on
    #[arg(long)]
    splits: Option<usize>,
    /// Directory written by `prepare`
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model directory written by `train`
    #[arg(long)]
    model: Option<PathBuf>,
    /// Generated explanations (JSONL)
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Baseline generations for debiasing scores
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Request this emotion for every query instead of each record's tag
    #[arg(long)]
    emotion: Option<String>,
    /// Override any config key
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("profile", self.profile.clone());
        put("seed", self.seed.map(|s| s.to_string()));
        put("out", path(&self.out));
        put("intensity", self.intensity.map(|x| x.to_string()));
        put("c1", self.c1.map(|x| x.to_string()));
        put("c2", self.c2.map(|x| x.to_string()));
        put("records", path(&self.records));
        put("lexicon", path(&self.lexicon));
        put("splits", self.splits.map(|x| x.to_string()));
        put("data", path(&self.data));
        put("model", path(&self.model));
        put("generated", path(&self.generated));
        put("baseline", path(&self.baseline));
        put("emotion", self.emotion.clone());
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got '{s}'")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }
}

type Action = fn(&RunConfig) -> Result<(), Failure>;

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, action): (&Common, Action) = match &cli.command {
        Command::Synth(c) => (c, commands::synth),
        Command::Prepare(c) => (c, commands::prepare),
        Command::Train(c) => (c, commands::train),
        Command::Generate(c) => (c, commands::generate),
        Command::Evaluate(c) => (c, commands::evaluate_cmd),
        Command::Audit(c) => (c, commands::audit),
        Command::Ablate(c) => (c, commands::ablate),
        Command::Gradcheck(c) => (c, commands::gradcheck),
    };
    action(&common.resolve()?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
