mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pyramid::corpus::{export, ingest, synth_task, Corpus, CorpusFormat, SynthSpec};
use pyramid::encoder::checkpoint;
use pyramid::engine::{speedup_report, write_csv, write_jsonl};
use pyramid::numerics::ParamGroup;
use pyramid::pipeline::{run_plan, serving_pruning};
use pyramid::pruning::PruningState;
use pyramid::Model64;

use crate::config::RunConfig;

/// Token pruning and early exiting for transformer classifiers.
#[derive(Parser)]
#[command(name = "pyramid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the stages of a training plan, writing one checkpoint per stage.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Measure accuracy and FLOPs speedup on a corpus.
    Bench(BenchArgs),
    /// Write a synthetic corpus.
    Gen(GenArgs),
    /// Summarize a checkpoint.
    Inspect {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled corpus to evaluate on.
    #[arg(long)]
    corpus: PathBuf,
    /// jsonl or tsv; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<CorpusFormat>,
    /// Comma-separated halt values in [0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.5, 0.8])]
    tau: Vec<f64>,
    /// Directory for report.csv and traces.jsonl.
    #[arg(long)]
    output: PathBuf,
    /// Serve without token pruning.
    #[arg(long)]
    no_prune: bool,
    /// Serve without exit heads.
    #[arg(long)]
    no_exit: bool,
}

#[derive(Args)]
struct GenArgs {
    /// Corpus file to write.
    #[arg(long)]
    output: PathBuf,
    /// jsonl or tsv; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<CorpusFormat>,
    /// TOML file with a synthetic task spec; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of examples.
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
}

fn format_for(path: &Path, given: Option<CorpusFormat>) -> Result<CorpusFormat> {
    match given.or_else(|| CorpusFormat::from_path(path)) {
        Some(f) => Ok(f),
        None => bail!("cannot tell the format of {}; pass --format", path.display()),
    }
}

fn train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let format = cfg.corpus.resolved_format()?;
    let corpus = ingest(&cfg.corpus.path, format, cfg.model.classes, cfg.model.vocab)
        .with_context(|| format!("loading {}", cfg.corpus.path.display()))?;
    if corpus.is_empty() {
        bail!("{} holds no examples", cfg.corpus.path.display());
    }
    fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    fs::write(cfg.output.join("config.toml"), cfg.to_toml()?)?;

    let mut log = BufWriter::new(File::create(cfg.output.join("train_log.jsonl"))?);
    let mut model = Model64::new(cfg.model.clone(), cfg.plan.seed)?;
    eprintln!(
        "training {} on {} examples, epochs {:?}",
        cfg.plan.preset,
        corpus.len(),
        cfg.plan.epochs.as_array()
    );
    let mut written = Vec::new();
    run_plan(&mut model, &corpus.examples, &cfg.plan, |stage, m, epochs| {
        for e in epochs {
            eprintln!("  {} epoch {}: loss {:.5}", stage.tag(), e.epoch, e.mean_loss);
            let line = serde_json::to_string(e)?;
            writeln!(log, "{line}")?;
        }
        let path = cfg.output.join(format!("{}.ckpt", stage.tag()));
        checkpoint::save(m, &path)?;
        written.push(path);
        Ok(())
    })?;
    log.flush()?;
    for path in &written {
        println!("{}", path.display());
    }
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let model: Model64 = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let cfg = &model.config;
    let format = format_for(&args.corpus, args.format)?;
    let corpus = ingest(&args.corpus, format, cfg.classes, cfg.vocab).with_context(|| {
        format!("{} does not fit the checkpoint ({} classes, vocabulary {})", args.corpus.display(), cfg.classes, cfg.vocab)
    })?;
    let exits = !args.no_exit;
    if exits && !model.has_stage(pyramid::encoder::Stage::Sub) {
        bail!("checkpoint has no trained exit heads; pass --no-exit");
    }
    let pruning = if args.no_prune { PruningState::disabled(cfg.layers) } else { serving_pruning(&model) };
    let taus: &[f64] = if exits { &args.tau } else { &[] };
    let report = speedup_report(&model, &corpus.examples, &pruning, taus, exits)?;

    fs::create_dir_all(&args.output)?;
    let mut csv = BufWriter::new(File::create(args.output.join("report.csv"))?);
    write_csv(&report.rows, &mut csv)?;
    csv.flush()?;
    let mut traces = BufWriter::new(File::create(args.output.join("traces.jsonl"))?);
    write_jsonl(&report.traces, &mut traces)?;
    traces.flush()?;

    for row in &report.rows {
        println!(
            "tau {:>4} {:<7} n={:<5} speedup {:>6.3}x accuracy {:.4} exit layer {:.2}{}",
            row.tau.map_or("-".into(), |t| t.to_string()),
            row.bucket.map_or("all".into(), |b| b.to_string()),
            row.count,
            row.speedup,
            row.accuracy,
            row.mean_exit_layer,
            if row.note.is_empty() { String::new() } else { format!(" ({})", row.note) }
        );
    }
    Ok(())
}

fn gen(args: &GenArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => toml::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => SynthSpec::default(),
    };
    spec.examples = args.examples.unwrap_or(spec.examples);
    spec.classes = args.classes.unwrap_or(spec.classes);
    spec.vocab = args.vocab.unwrap_or(spec.vocab);
    let format = format_for(&args.output, args.format)?;
    let corpus: Corpus = synth_task(&spec, args.seed)?;
    export(&corpus, &args.output, format)?;
    let s = &corpus.stats;
    println!(
        "{} examples, lengths {}..{} (mean {:.1}), buckets short/middle/long {}/{}/{}",
        s.count, s.min, s.max, s.mean, s.buckets[0], s.buckets[1], s.buckets[2]
    );
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let model: Model64 = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let c = &model.config;
    println!("layers {} hidden {} heads {} ffn {}", c.layers, c.hidden, c.heads, c.ffn);
    println!("classes {} vocab {} max_len {}", c.classes, c.vocab, c.max_len);
    println!("exit heads width {} ffn {}", c.sub_width(), c.sub_ffn_width());
    let stages: Vec<&str> = model.stages.iter().map(|s| s.tag()).collect();
    println!("stages [{}]", stages.join(", "));
    for group in [ParamGroup::Backbone, ParamGroup::Classifier, ParamGroup::SubClassifier, ParamGroup::Threshold] {
        let count: usize = model.params.iter().filter(|(_, p)| p.group == group).map(|(_, p)| p.value.len()).sum();
        println!("{group:?} parameters {count}");
    }
    let deltas: Vec<String> = model.deltas().iter().map(|d| format!("{d:.6}")).collect();
    println!("thresholds [{}]", deltas.join(", "));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => train(config),
        Command::Bench(args) => bench(args),
        Command::Gen(args) => gen(args),
        Command::Inspect { checkpoint } => inspect(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
