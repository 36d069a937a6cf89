use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use locale_forge::corpus::LocaleId;
use locale_forge_cli::config::Overrides;
use locale_forge_cli::{CliError, Pipeline, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "locale-forge", version, about = "Locale-group language models for n-best rescoring")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated target locales; overrides `targets`.
    #[arg(long, global = true, value_delimiter = ',')]
    targets: Option<Vec<LocaleId>>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and normalize every corpus in the manifest.
    Ingest,
    /// Pairwise lexical similarity matrix.
    Similarity,
    /// Agglomerative clustering into locale groups.
    Cluster {
        #[arg(long, conflicts_with = "threshold")]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Learn one BPE vocabulary per group from its balanced sample.
    BpeLearn {
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Segment a text file with a group's vocabulary.
    BpeApply {
        #[arg(long)]
        group: usize,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Temperature-balanced sample per group.
    Sample,
    /// Group models and monolingual baselines.
    Train,
    /// General fine-tuning of each target.
    Finetune,
    /// Masked fine-tuning of each target.
    Mft,
    /// Second-pass rescoring and the WERR table.
    Rescore,
    /// Validation perplexity per system.
    Eval,
    /// Hosting memory of deployment strategies.
    CostModel,
    /// Write the synthetic fixture described by the config.
    GenFixture,
    /// Every stage in order, stopping at the first failure.
    RunAll,
}

fn load(common: &Common, extra: Overrides) -> Result<Pipeline> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::config(vec!["--config: required".into()]))?;
    let mut cfg = PipelineConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        targets: common.targets.clone(),
        ..extra
    });
    Pipeline::new(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut extra = Overrides::default();
    match &cli.command {
        Command::Cluster { k, threshold } => {
            extra.k = *k;
            extra.threshold = *threshold;
        }
        Command::BpeLearn { vocab_size } => extra.vocab_size = *vocab_size,
        _ => {}
    }
    let p = load(&cli.common, extra)?;
    match cli.command {
        Command::Ingest => p.ingest().map(drop),
        Command::Similarity => p.similarity(),
        Command::Cluster { .. } => p.cluster().map(drop),
        Command::BpeLearn { .. } => p.bpe_learn(),
        Command::BpeApply { group, input, output } => p.bpe_apply(group, &input, &output),
        Command::Sample => p.sample(),
        Command::Train => p.train(),
        Command::Finetune => p.finetune(),
        Command::Mft => p.mft(),
        Command::Rescore => p.rescore().map(drop),
        Command::Eval => p.eval().map(drop),
        Command::CostModel => p.cost_model(),
        Command::GenFixture => p.gen_fixture(),
        Command::RunAll => p.run_all(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOCALE_FORGE_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = e.report();
            eprintln!("{}", serde_json::to_string(&report).expect("report serializes"));
            ExitCode::from(report.exit_code as u8)
        }
    }
}
