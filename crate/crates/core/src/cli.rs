//! Command-line interface: train, eval, gen-synth.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{pick, require, Settings};
use crate::data::{generate_synthetic, with_reverses, Dataset, SynthPattern};
use crate::error::{Error, Result};
use crate::eval::{evaluate, queries_for_split, FilterIndex, FilterMode, ModelScorer, Split};
use crate::model::{Model, ModelConfig};
use crate::train::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tkgcast",
    version,
    about = "Event forecasting on temporal knowledge graphs"
)]
struct Cli {
    /// Settings file with key=value lines; explicit flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Generate a synthetic dataset directory.
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory with train.txt / valid.txt / test.txt.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Sequence head: satt, conv, mlp, or lstm.
    #[arg(long)]
    head: Option<String>,
    /// History offsets, comma-separated, strictly decreasing, ending
    /// at 0 (for example 7,3,1,0).
    #[arg(long)]
    hx: Option<String>,
    /// Snapshot window length in timestamps.
    #[arg(long)]
    window: Option<i64>,
    /// Observable history: train-only or train-valid.
    #[arg(long = "dt-mode")]
    dt_mode: Option<String>,
    /// Copy head: on or off.
    #[arg(long)]
    copy: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs without improvement before early stop; 0 disables.
    #[arg(long)]
    patience: Option<usize>,
    /// Checkpoint output path.
    #[arg(long, value_name = "MODEL")]
    out: Option<PathBuf>,
    /// Divide raw timestamps by this before use.
    #[arg(long)]
    granularity: Option<i64>,
    /// Edge types rarer than this in training share one weight group.
    #[arg(long)]
    threshold: Option<u64>,
    #[arg(long = "embed-dim")]
    embed_dim: Option<usize>,
    #[arg(long = "time-dim")]
    time_dim: Option<usize>,
    #[arg(long = "enc-heads")]
    enc_heads: Option<usize>,
    #[arg(long = "enc-layers")]
    enc_layers: Option<usize>,
    #[arg(long = "neighbor-cap")]
    neighbor_cap: Option<usize>,
    #[arg(long = "mlp-hidden")]
    mlp_hidden: Option<usize>,
    #[arg(long = "satt-layers")]
    satt_layers: Option<usize>,
    #[arg(long = "satt-heads")]
    satt_heads: Option<usize>,
    #[arg(long = "conv-channels")]
    conv_channels: Option<usize>,
    /// LSTM state width; 0 means embed-dim.
    #[arg(long = "lstm-hidden")]
    lstm_hidden: Option<usize>,
    #[arg(long = "decoder-blocks")]
    decoder_blocks: Option<usize>,
    /// Anchor every evaluation query at the last observable timestamp
    /// and train with horizon 1.
    #[arg(long = "ignore-eval-times", num_args = 0..=1, default_missing_value = "true")]
    ignore_eval_times: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "MODEL")]
    model: Option<PathBuf>,
    /// Split to score: valid or test.
    #[arg(long)]
    split: Option<String>,
    /// Known-answer filter: time-aware or static.
    #[arg(long)]
    filter: Option<String>,
    /// Also print the single-line tab-separated record.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    tsv: Option<bool>,
    #[arg(long)]
    granularity: Option<i64>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    timestamps: Option<usize>,
    /// Event pattern: functional or periodic.
    #[arg(long)]
    pattern: Option<String>,
    /// Cycle length for the periodic pattern.
    #[arg(long)]
    period: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::empty(),
    };
    match cli.command {
        Command::Train(args) => run_train(args, &settings),
        Command::Eval(args) => run_eval(args, &settings),
        Command::GenSynth(args) => run_gen_synth(args, &settings),
    }
}

fn parse_hx(raw: &str) -> Result<Vec<i64>> {
    raw.split(',')
        .map(|p| p.trim().parse::<i64>())
        .collect::<std::result::Result<Vec<i64>, _>>()
        .map_err(|_| Error::Config(format!("invalid hx list '{raw}'")))
}

fn parse_copy(raw: &str) -> Result<bool> {
    match raw {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(Error::Config(format!("copy must be on or off, got '{raw}'"))),
    }
}

fn run_train(args: TrainArgs, s: &Settings) -> Result<()> {
    let data: PathBuf = require(args.data, s, "data")?;
    let out: PathBuf = require(args.out, s, "out")?;
    let granularity = pick(args.granularity, s, "granularity", 1)?;
    let dataset = Dataset::load(&data, granularity)?;

    let mut cfg = ModelConfig::new(dataset.num_entities, dataset.num_base_relations);
    cfg.head = pick(args.head, s, "head", cfg.head.name().into())?.parse()?;
    cfg.hx = parse_hx(&pick(args.hx, s, "hx", "7,3,1,0".into())?)?;
    cfg.window = pick(args.window, s, "window", cfg.window)?;
    cfg.dt_mode = pick(args.dt_mode, s, "dt-mode", cfg.dt_mode.name().into())?.parse()?;
    cfg.copy = parse_copy(&pick(args.copy, s, "copy", "on".into())?)?;
    cfg.rare_threshold = pick(args.threshold, s, "threshold", cfg.rare_threshold)?;
    cfg.embed_dim = pick(args.embed_dim, s, "embed-dim", cfg.embed_dim)?;
    cfg.time_dim = pick(args.time_dim, s, "time-dim", cfg.time_dim)?;
    cfg.enc_heads = pick(args.enc_heads, s, "enc-heads", cfg.enc_heads)?;
    cfg.enc_layers = pick(args.enc_layers, s, "enc-layers", cfg.enc_layers)?;
    cfg.neighbor_cap = pick(args.neighbor_cap, s, "neighbor-cap", cfg.neighbor_cap)?;
    cfg.mlp_hidden = pick(args.mlp_hidden, s, "mlp-hidden", cfg.mlp_hidden)?;
    cfg.satt_layers = pick(args.satt_layers, s, "satt-layers", cfg.satt_layers)?;
    cfg.satt_heads = pick(args.satt_heads, s, "satt-heads", cfg.satt_heads)?;
    cfg.conv_channels = pick(args.conv_channels, s, "conv-channels", cfg.conv_channels)?;
    cfg.lstm_hidden = pick(args.lstm_hidden, s, "lstm-hidden", cfg.lstm_hidden)?;
    cfg.decoder_blocks = pick(args.decoder_blocks, s, "decoder-blocks", cfg.decoder_blocks)?;
    cfg.ignore_eval_times =
        pick(args.ignore_eval_times, s, "ignore-eval-times", cfg.ignore_eval_times)?;

    let tcfg = TrainConfig {
        epochs: pick(args.epochs, s, "epochs", 50)?,
        batch_size: pick(args.batch_size, s, "batch-size", 128)?,
        lr: pick(args.lr, s, "lr", 1e-3)?,
        seed: pick(args.seed, s, "seed", 0)?,
        patience: pick(args.patience, s, "patience", 5)?,
    };

    let train_aug = with_reverses(dataset.splits()[0], dataset.num_base_relations);
    let mut model = Model::new(cfg, &train_aug, tcfg.seed)?;
    let stats = train(&mut model, &dataset, &tcfg, |epoch, loss| {
        println!("epoch {epoch:>3}  loss {loss:.6}");
    })?;
    let final_loss = *stats.epoch_losses.last().unwrap();
    if stats.stopped_early {
        println!("stopped early after {} epochs (loss plateau)", stats.epoch_losses.len());
    }
    model.save(
        &out,
        &[
            ("seed", tcfg.seed.to_string()),
            ("lr", tcfg.lr.to_string()),
            ("epochs_run", stats.epoch_losses.len().to_string()),
            ("final_loss", format!("{final_loss:.6}")),
        ],
    )?;
    println!(
        "trained {} head, final loss {final_loss:.6}, sequence cache {}/{} hits",
        model.config().head.name(),
        stats.cache_hits,
        stats.cache_lookups
    );
    println!("saved model to {}", out.display());
    Ok(())
}

fn run_eval(args: EvalArgs, s: &Settings) -> Result<()> {
    let data: PathBuf = require(args.data, s, "data")?;
    let model_path: PathBuf = require(args.model, s, "model")?;
    let split: Split = pick(args.split, s, "split", "test".into())?.parse()?;
    let filter: FilterMode = pick(args.filter, s, "filter", "time-aware".into())?.parse()?;
    let tsv = pick(args.tsv, s, "tsv", false)?;
    let granularity = pick(args.granularity, s, "granularity", 1)?;

    let dataset = Dataset::load(&data, granularity)?;
    let model = Model::load(&model_path)?;
    let cfg = model.config();
    let queries = queries_for_split(&dataset, split, cfg.dt_mode, cfg.ignore_eval_times)?;
    let index = FilterIndex::for_dataset(&dataset, filter)?;
    let mut scorer = ModelScorer::new(&model, &dataset)?;
    let metrics = evaluate(&mut scorer, &queries, &index)?;
    println!("{metrics}");
    if tsv {
        println!("{}", metrics.tsv_record(split.name(), model.config().head.name()));
    }
    Ok(())
}

fn run_gen_synth(args: GenSynthArgs, s: &Settings) -> Result<()> {
    let entities = require(args.entities, s, "entities")?;
    let relations = require(args.relations, s, "relations")?;
    let timestamps = require(args.timestamps, s, "timestamps")?;
    let out: PathBuf = require(args.out, s, "out")?;
    let seed = pick(args.seed, s, "seed", 0)?;
    let pattern_name: String = pick(args.pattern, s, "pattern", "functional".into())?;
    let pattern = match pattern_name.as_str() {
        "functional" => SynthPattern::Functional,
        "periodic" => SynthPattern::Periodic { period: pick(args.period, s, "period", 4)? },
        other => {
            return Err(Error::Config(format!(
                "pattern must be functional or periodic, got '{other}'"
            )))
        }
    };
    let dataset = generate_synthetic(entities, relations, timestamps, pattern, seed)?;
    dataset.write(&out)?;
    let [train, valid, test] = dataset.splits();
    println!(
        "wrote {} train / {} valid / {} test events to {}",
        train.len(),
        valid.len(),
        test.len(),
        out.display()
    );
    Ok(())
}
