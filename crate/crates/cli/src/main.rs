//! `r1`: train, evaluate, generate and report for the EEG-to-text model.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use r1_core::data::{noise_control, split_dataset, EegSentenceRecord, FEATURE_DIM};
use r1_core::decoding::{DecodeConfig, DecodeMode};
use r1_core::metrics::write_metric_csv;
use r1_core::model::ModelConfig;
use r1_core::pipeline::{evaluate, parse_synth_spec, prepare_data, train_model, DataSource, Evaluation};
use r1_core::report::write_report;
use r1_core::training::{write_training_log, Checkpoint, TwoStageConfig};

use settings::{pick, FileConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] r1_core::Error),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Core(e) => e.code(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "r1", version, about = "EEG-to-text translation: train, eval, generate, report")]
struct Cli {
    /// Plain `key=value` settings file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Two-stage training; writes checkpoint, loss log, split manifest and vocabulary.
    Train(TrainArgs),
    /// Full metric table in teacher-forced and/or free-running mode.
    Eval(EvalArgs),
    /// Target / teacher-forced prediction / free-running prediction triples.
    Generate(GenerateArgs),
    /// Mean ± SEM over eval CSVs plus one SVG bar chart per metric.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// JSON-lines dataset file.
    #[arg(long, value_name = "PATH", conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Synthetic dataset, `k=v,...` over vocab, n, min_len, max_len, noise, seed, f.
    #[arg(long, value_name = "SPEC", num_args = 0..=1, default_missing_value = "")]
    synth: Option<String>,
    /// Feature dimension of a `--data` file.
    #[arg(long, value_name = "N")]
    feature_dim: Option<usize>,
    /// Replace the features with the noise control before splitting.
    #[arg(long)]
    noise_control: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Seed for initialisation, shuffling, splitting and the noise control.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long = "epochs-stage1", value_name = "N")]
    epochs_stage1: Option<usize>,
    #[arg(long = "epochs-stage2", value_name = "N")]
    epochs_stage2: Option<usize>,
    #[arg(long = "lr-stage1", value_name = "ETA")]
    lr_stage1: Option<f64>,
    #[arg(long = "lr-stage2", value_name = "ETA")]
    lr_stage2: Option<f64>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Model setting override, e.g. `--model d=32` (repeatable).
    #[arg(long = "model", value_name = "KEY=VALUE")]
    model: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Tf,
    Free,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

macro_rules! value_enum_from_str {
    ($($t:ty),*) => {$(
        impl std::str::FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                <$t as ValueEnum>::from_str(s, true)
            }
        }
    )*};
}
value_enum_from_str!(ModeArg, SplitArg);

#[derive(Args, Debug)]
struct SourceArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Split seed; defaults to the seed stored in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    /// Partition to evaluate (default: test).
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Beam width for free-running decoding; 1 decodes greedily (default: 4).
    #[arg(long, value_name = "W")]
    beam: Option<usize>,
    /// Maximum generated tokens, EOS included.
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Decoding regime(s) to score (default: both).
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Model label written to the metric table.
    #[arg(long, default_value = "r1")]
    name: String,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    source: SourceArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metric CSVs written by `eval`, typically one per seed.
    #[arg(required = true, value_name = "CSV")]
    inputs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("R1_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(first_line(&e.to_string()));
            eprintln!("error[{}]: {err}", err.code());
            return ExitCode::from(err.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {}", err.code(), first_line(&err.to_string()));
            ExitCode::from(err.exit_code())
        }
    }
}

fn first_line(msg: &str) -> String {
    let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Train(args) => train(args, &file),
        Command::Eval(args) => eval(args, &file),
        Command::Generate(args) => generate(args, &file),
        Command::Report(args) => report(args, &file),
    }
}

fn data_source(args: &DataArgs, file: &FileConfig) -> CliResult<(DataSource, bool)> {
    let (data, synth) = if args.data.is_some() || args.synth.is_some() {
        (args.data.clone(), args.synth.clone())
    } else {
        (file.get::<PathBuf>("data")?, file.get::<String>("synth")?)
    };
    let source = match (data, synth) {
        (Some(path), None) => DataSource::File {
            path,
            feature_dim: pick(args.feature_dim, file, "feature-dim")?.unwrap_or(FEATURE_DIM),
        },
        (None, Some(spec)) => {
            if args.feature_dim.is_some() {
                return Err(CliError::Usage("--feature-dim applies to --data; use f=<n> in --synth".into()));
            }
            DataSource::Synth(parse_synth_spec(&spec)?)
        }
        (Some(_), Some(_)) => return Err(CliError::Usage("give exactly one of --data and --synth".into())),
        (None, None) => return Err(CliError::Usage("a data source is required: --data <path> or --synth".into())),
    };
    Ok((source, args.noise_control || file.flag("noise-control")?))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| r1_core::Error::io(dir, e).into())
}

fn train(args: TrainArgs, file: &FileConfig) -> CliResult<()> {
    let (source, noise) = data_source(&args.data, file)?;
    let seed = pick(args.seed, file, "seed")?.ok_or_else(|| CliError::Usage("train requires --seed".into()))?;
    let out = pick(args.out, file, "out")?.ok_or_else(|| CliError::Usage("train requires --out".into()))?;

    let mut model_cfg = ModelConfig::toy(0);
    model_cfg.f = source.feature_dim();
    let flag_overrides = args
        .model
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| CliError::Usage(format!("--model expects KEY=VALUE, got {kv:?}")))
        })
        .collect::<CliResult<Vec<_>>>()?;
    for (k, v) in file.model_overrides().chain(flag_overrides) {
        if k == "V" {
            return Err(CliError::Usage("the vocabulary size comes from the training data".into()));
        }
        model_cfg.set(k, v)?;
    }

    let defaults = TwoStageConfig::default();
    let train_cfg = TwoStageConfig {
        epochs_stage1: pick(args.epochs_stage1, file, "epochs-stage1")?.unwrap_or(defaults.epochs_stage1),
        epochs_stage2: pick(args.epochs_stage2, file, "epochs-stage2")?.unwrap_or(defaults.epochs_stage2),
        eta_stage1: pick(args.lr_stage1, file, "lr-stage1")?.unwrap_or(defaults.eta_stage1),
        eta_stage2: pick(args.lr_stage2, file, "lr-stage2")?.unwrap_or(defaults.eta_stage2),
        batch_size: pick(args.batch_size, file, "batch-size")?.unwrap_or(defaults.batch_size),
        seed,
        ..defaults
    };
    train_cfg.validate()?;

    let records = source.load()?;
    let data = prepare_data(&records, noise, seed)?;
    info!(
        "data: {} train / {} dev / {} test sentences, vocabulary {}",
        data.split.train.len(),
        data.split.dev.len(),
        data.split.test.len(),
        data.vocab.len()
    );
    create_dir(&out)?;
    let outcome = train_model(&data, model_cfg, &train_cfg, |_, _| {})?;
    let best = &outcome.best;
    best.save(out.join("checkpoint.r1ck"))?;
    write_training_log(out.join("train_log.csv"), &outcome.log)?;
    data.split.write_manifest(out.join("split.json"))?;
    data.vocab.save(out.join("vocab.txt"))?;
    let model_path = out.join("model.txt");
    std::fs::write(&model_path, best.config.to_string()).map_err(|e| r1_core::Error::io(&model_path, e))?;
    println!(
        "best checkpoint: stage {} epoch {} val_loss {:.6} -> {}",
        best.stage,
        best.epoch,
        best.best_val_loss,
        out.join("checkpoint.r1ck").display()
    );
    Ok(())
}

struct Loaded {
    checkpoint: Checkpoint<f32>,
    records: Vec<EegSentenceRecord>,
    decode: DecodeConfig,
    batch_size: usize,
    out: PathBuf,
}

fn load_source(args: &SourceArgs, file: &FileConfig) -> CliResult<Loaded> {
    let path = pick(args.checkpoint.clone(), file, "checkpoint")?
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
    let (source, noise) = data_source(&args.data, file)?;
    let checkpoint = Checkpoint::<f32>::load(&path)?;
    if source.feature_dim() != checkpoint.config.f {
        return Err(r1_core::Error::contract(format!(
            "data has {} features per word but the model expects {}",
            source.feature_dim(),
            checkpoint.config.f
        ))
        .into());
    }
    let seed = pick(args.seed, file, "seed")?.unwrap_or(checkpoint.rng.seed);
    let mut records = source.load()?;
    if noise {
        records = noise_control(&records, seed);
    }
    let split = pick(args.split, file, "split")?.unwrap_or(SplitArg::Test);
    let records = if split == SplitArg::All {
        records
    } else {
        let parts = split_dataset(&records, seed)?;
        match split {
            SplitArg::Train => parts.train,
            SplitArg::Dev => parts.dev,
            _ => parts.test,
        }
    };
    let beam = pick(args.beam, file, "beam")?.unwrap_or(4);
    if beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let default_len = DecodeConfig::default().max_len.min(checkpoint.config.maxlen);
    let decode = DecodeConfig {
        mode: if beam == 1 { DecodeMode::Greedy } else { DecodeMode::Beam },
        beam_width: beam,
        max_len: pick(args.max_len, file, "max-len")?.unwrap_or(default_len),
        ..DecodeConfig::default()
    };
    decode.validate()?;
    let batch_size = pick(args.batch_size, file, "batch-size")?.unwrap_or(TwoStageConfig::default().batch_size);
    let out = match pick(args.out.clone(), file, "out")? {
        Some(dir) => dir,
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok(Loaded {
        checkpoint,
        records,
        decode,
        batch_size,
        out,
    })
}

fn run_evaluation(loaded: &Loaded) -> CliResult<Evaluation> {
    let model = loaded.checkpoint.model()?;
    info!("evaluating {} sentences", loaded.records.len());
    Ok(evaluate(
        &model,
        &loaded.records,
        &loaded.checkpoint.vocab,
        &loaded.decode,
        loaded.batch_size,
    )?)
}

fn eval(args: EvalArgs, file: &FileConfig) -> CliResult<()> {
    let loaded = load_source(&args.source, file)?;
    let mode = pick(args.mode, file, "mode")?.unwrap_or(ModeArg::Both);
    let evaluation = run_evaluation(&loaded)?;
    let rows: Vec<_> = evaluation
        .metric_rows(&args.name)?
        .into_iter()
        .filter(|r| match mode {
            ModeArg::Both => true,
            ModeArg::Tf => r.mode == "tf",
            ModeArg::Free => r.mode == "free",
        })
        .collect();
    create_dir(&loaded.out)?;
    let path = loaded.out.join("metrics.csv");
    write_metric_csv(&path, &rows)?;
    for r in &rows {
        println!("{:<5} {:<10} {:<7} {:>10.4}", r.mode, r.metric, r.submetric, r.value);
    }
    println!("teacher-forced token accuracy {:.4}", evaluation.token_accuracy);
    println!("free-running exact match {:.4}", evaluation.exact_match);
    println!("metrics -> {}", path.display());
    Ok(())
}

fn generate(args: GenerateArgs, file: &FileConfig) -> CliResult<()> {
    let loaded = load_source(&args.source, file)?;
    let evaluation = run_evaluation(&loaded)?;
    create_dir(&loaded.out)?;
    let path = loaded.out.join("generations.csv");
    evaluation.write_triples(&path)?;
    println!("{} triples -> {}", evaluation.references.len(), path.display());
    Ok(())
}

fn report(args: ReportArgs, file: &FileConfig) -> CliResult<()> {
    let out = pick(args.out, file, "out")?.ok_or_else(|| CliError::Usage("report requires --out".into()))?;
    for path in write_report(&args.inputs, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}
