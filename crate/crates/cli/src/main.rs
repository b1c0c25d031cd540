use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowseq::aggregate::AggregationRule;
use flowseq::pipeline::{configure_workers, Pipeline, RunConfig};
use flowseq::synth::{write_dataset, SynthConfig};
use flowseq::tokenize::Feature;

/// Unsupervised anomaly scoring of network flows with token-sequence models.
///
/// Every option can also be set through an environment variable named
/// FLOWSEQ_<OPTION>, for example FLOWSEQ_CONFIG or FLOWSEQ_REPLICAS.
#[derive(Parser)]
#[command(name = "flowseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, clean and split the input flows.
    Ingest(RunArgs),
    /// Build vocabularies and token sequences.
    Tokenize(RunArgs),
    /// Fit frequency models and train the sequence networks.
    Train(RunArgs),
    /// Score the test flows with every trained model.
    Score(RunArgs),
    /// Compute per-attack AUCs and ROC curves.
    Eval(RunArgs),
    /// Fuse the two frequency score sets by their first principal component.
    Combine(RunArgs),
    /// Render the AUC tables.
    Report(RunArgs),
    /// Run every stage in order.
    Run(RunArgs),
    /// Write a synthetic labeled dataset and a matching run config.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    Protobytes,
    Ports,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Source,
    Destination,
    Dyad,
    Internal,
    External,
    All,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, env = "FLOWSEQ_CONFIG", default_value = "flowseq.toml")]
    config: PathBuf,
    #[arg(long, env = "FLOWSEQ_FEATURE")]
    feature: Option<FeatureArg>,
    #[arg(long, env = "FLOWSEQ_RULE")]
    rule: Option<RuleArg>,
    /// Bootstrap replicas per (feature, rule).
    #[arg(long, env = "FLOWSEQ_REPLICAS")]
    replicas: Option<u32>,
    /// Root seed.
    #[arg(long, env = "FLOWSEQ_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, env = "FLOWSEQ_WORKERS")]
    workers: Option<usize>,
    /// Window stride used when scoring test sequences, for every feature.
    #[arg(long, env = "FLOWSEQ_STRIDE")]
    stride: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory to write flows.csv, internal.txt and flowseq.toml into.
    #[arg(long, env = "FLOWSEQ_OUT", default_value = "synthetic")]
    out: PathBuf,
    /// Generator settings (TOML); built-in defaults otherwise.
    #[arg(long, env = "FLOWSEQ_SYNTH_CONFIG")]
    synth_config: Option<PathBuf>,
    #[arg(long, env = "FLOWSEQ_SEED")]
    seed: Option<u64>,
}

impl RunArgs {
    fn pipeline(&self) -> Result<Pipeline> {
        if !self.config.exists() {
            bail!(
                "config file {} not found (pass --config, or create one with `flowseq synth`)",
                self.config.display()
            );
        }
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        match self.feature {
            Some(FeatureArg::Protobytes) => cfg.features = vec![Feature::Protobytes],
            Some(FeatureArg::Ports) => cfg.features = vec![Feature::Ports],
            Some(FeatureArg::Both) => cfg.features = Feature::ALL.to_vec(),
            None => {}
        }
        if let Some(rule) = self.rule {
            cfg.rules = match rule {
                RuleArg::Source => vec![AggregationRule::Source],
                RuleArg::Destination => vec![AggregationRule::Destination],
                RuleArg::Dyad => vec![AggregationRule::Dyad],
                RuleArg::Internal => vec![AggregationRule::Internal],
                RuleArg::External => vec![AggregationRule::External],
                RuleArg::All => AggregationRule::ALL.to_vec(),
            };
        }
        if let Some(n) = self.replicas {
            cfg.replicas = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(s) = self.stride {
            cfg.strides.protobytes = s;
            cfg.strides.ports = s;
        }
        configure_workers(cfg.workers);
        Ok(Pipeline::new(cfg)?)
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.synth_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthConfig::from_toml(&text)?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let records = write_dataset(&cfg, &args.out)?;
    write_new(&args.out.join("synth.toml"), &cfg.to_toml())?;
    let run = RunConfig {
        train_day: Some(cfg.start_date),
        ..RunConfig::default()
    };
    write_new(&args.out.join("flowseq.toml"), &run.to_toml())?;
    println!(
        "wrote {} flows to {}",
        records.len(),
        args.out.join("flows.csv").display()
    );
    Ok(())
}

fn write_new(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Ingest(a) => {
            let s = a.pipeline()?.ingest()?;
            println!(
                "read {} rows: {} rejected, {} without internal endpoint, {} train, {} test",
                s.rows_read, s.rejected, s.dropped_external, s.train, s.test
            );
        }
        Command::Tokenize(a) => a.pipeline()?.tokenize()?,
        Command::Train(a) => a.pipeline()?.train()?,
        Command::Score(a) => a.pipeline()?.score()?,
        Command::Eval(a) => {
            let p = a.pipeline()?;
            let report = p.eval()?;
            println!("{} rows written to {}", report.rows.len(), p.layout.eval_table().display());
        }
        Command::Combine(a) => a.pipeline()?.combine()?,
        Command::Report(a) => print!("{}", a.pipeline()?.report()?),
        Command::Run(a) => print!("{}", a.pipeline()?.run_all()?),
        Command::Synth(a) => synth(a)?,
    }
    Ok(())
}
