use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use catse::condition::{multi_hot, ClassVocabulary};
use catse::fsutil::write_atomic;
use catse::model::Model;
use catse::runtime::{benchmark, open_stream, stream_clip, FrozenModel};
use catse::scenegen::{ingest_corpus, load_dataset, synthetic_vocabulary, write_dataset, Dataset, SceneSpec, SourcePool, TargetMode};
use catse::separator::Variant;
use catse::trainer::{evaluate, format_table, train, OracleSource, TrainConfig};
use catse::wav::{read_wav, write_wav, SampleFormat};
use catse::weights::{load_weights, save_weights, LoadPurpose, ModelWeights};
use catse::Error;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "catse", version, about = "Causal target sound extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of synthetic scenes.
    Synth(SynthArgs),
    /// Train a model on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Report SI-SNRi and SNR per number of targets.
    Eval(EvalArgs),
    /// Extract the hinted classes from a WAV file through the streaming engine.
    Stream(StreamArgs),
    /// Measure streaming throughput and per-hop latency.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    scenes: usize,
    /// Synthetic vocabulary size; with --corpus, must match the corpus if given.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory with one sub-directory of WAV clips per class.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    min_fg: usize,
    #[arg(long, default_value_t = 5)]
    max_fg: usize,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    model: Variant,
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset used to pick the best epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = TargetMode::Multi)]
    target_mode: TargetMode,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = catse::trainer::DESK_HIDDEN_CHANNELS)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 1, 2, 3 or all.
    #[arg(long, default_value = "all")]
    targets: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feed eCATSE a random oracle drawn from this seed instead of the true one.
    #[arg(long)]
    random_oracle: Option<u64>,
    /// Print rows as JSON lines instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Serialize)]
struct StreamArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target classes, by index or name, comma separated.
    #[arg(long)]
    hint: String,
    /// Classes present in the mixture (ecatse only).
    #[arg(long)]
    oracle: Option<String>,
    /// Write 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    seconds: f64,
    #[arg(long, default_value = "0")]
    hint: String,
    /// Defaults to the hint for ecatse checkpoints.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_config(command: &str, config: &impl Serialize) -> catse::Result<()> {
    println!("{command} {}", serde_json::to_string(config)?);
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Dimension(_) => 2,
        Error::Numeric(_) => 4,
        Error::Data(_) | Error::Corrupt(_) | Error::Io { .. } | Error::Wav { .. } | Error::Json(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => eval(a),
        Command::Stream(a) => stream(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth(a: SynthArgs) -> catse::Result<()> {
    let (vocab, pool) = match &a.corpus {
        Some(root) => {
            let corpus = ingest_corpus(root)?;
            if let Some(k) = a.classes {
                if k != corpus.vocab.len() {
                    return Err(Error::Usage(format!("--classes {k} but the corpus has {} classes", corpus.vocab.len())));
                }
            }
            (corpus.vocab.clone(), SourcePool::Corpus(corpus))
        }
        None => (synthetic_vocabulary(a.classes.unwrap_or(8))?, SourcePool::Synthetic),
    };
    let spec = SceneSpec {
        min_fg_classes: a.min_fg,
        max_fg_classes: a.max_fg,
        ..Default::default()
    }
    .with_seed(a.seed);
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a SynthArgs,
        vocabulary: &'a [String],
        scene_spec: &'a SceneSpec,
    }
    print_config(
        "synth",
        &Resolved {
            args: &a,
            vocabulary: vocab.names(),
            scene_spec: &spec,
        },
    )?;
    let dataset = Dataset::generate(a.seed, a.scenes, vocab, spec, pool)?;
    write_dataset(&a.out, &dataset)?;
    println!("wrote {} scenes to {}", dataset.len(), a.out.display());
    Ok(())
}

fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| a.out.with_extension("log.jsonl"))
}

fn run_train(a: TrainArgs) -> catse::Result<()> {
    let data = load_dataset(&a.data)?;
    let val = a.val.as_ref().map(load_dataset).transpose()?;
    if let Some(v) = &val {
        if v.vocab != data.vocab {
            return Err(Error::Data("validation set uses a different vocabulary".into()));
        }
    }
    let mut config = TrainConfig::new(a.model, data.vocab.len());
    config.model.hidden_channels = a.hidden;
    config.epochs = a.epochs;
    config.batch_size = a.batch_size;
    config.learning_rate = a.lr;
    config.lambda_cls = a.lambda;
    config.target_mode = a.target_mode;
    config.seed = a.seed;
    config.validate()?;
    let log = log_path(&a);
    #[derive(Serialize)]
    struct Resolved<'a> {
        data: &'a Path,
        val: Option<&'a Path>,
        out: &'a Path,
        log: &'a Path,
        scenes: usize,
        vocabulary: &'a [String],
        train: &'a TrainConfig,
    }
    print_config(
        "train",
        &Resolved {
            data: &a.data,
            val: a.val.as_deref(),
            out: &a.out,
            log: &log,
            scenes: data.len(),
            vocabulary: data.vocab.names(),
            train: &config,
        },
    )?;
    let mut lines = String::new();
    let outcome = train(&config, &data, val.as_ref(), |record| {
        let line = serde_json::to_string(record)?;
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        write_atomic(&log, lines.as_bytes())
    })?;
    save_weights(&ModelWeights::from_model(&outcome.model, &data.vocab)?, &a.out)?;
    println!("saved epoch {} to {}", outcome.best_epoch, a.out.display());
    Ok(())
}

fn parse_targets(s: &str) -> catse::Result<Vec<usize>> {
    match s {
        "all" => Ok(vec![1, 2, 3]),
        "1" | "2" | "3" => Ok(vec![s.parse().expect("digit")]),
        other => Err(Error::Usage(format!("--targets must be 1, 2, 3 or all, got `{other}`"))),
    }
}

fn eval(a: EvalArgs) -> catse::Result<()> {
    let targets = parse_targets(&a.targets)?;
    let weights = load_weights(&a.weights, LoadPurpose::Inference)?;
    let data = load_dataset(&a.data)?;
    if weights.vocabulary()? != data.vocab {
        return Err(Error::Data("checkpoint and dataset vocabularies differ".into()));
    }
    if a.random_oracle.is_some() && weights.meta.variant != Variant::Ecatse {
        return Err(Error::Usage(format!("--random-oracle needs an ecatse checkpoint, got {}", weights.meta.variant)));
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a EvalArgs,
        variant: Variant,
        scenes: usize,
        target_counts: &'a [usize],
    }
    print_config(
        "eval",
        &Resolved {
            args: &a,
            variant: weights.meta.variant,
            scenes: data.len(),
            target_counts: &targets,
        },
    )?;
    let model = weights.to_model()?;
    let oracle = a.random_oracle.map_or(OracleSource::True, OracleSource::Random);
    let rows = evaluate(&model, &weights.meta.variant.to_string(), &data, &targets, a.seed, oracle)?;
    if a.json {
        for r in &rows {
            println!("{}", serde_json::to_string(r)?);
        }
    } else {
        print!("{}", format_table(&rows));
    }
    Ok(())
}

/// Hint and oracle vectors for a checkpoint's vocabulary.
fn context(vocab: &ClassVocabulary, variant: Variant, hint: &str, oracle: Option<&str>, default_oracle: bool) -> catse::Result<(Vec<f64>, Option<Vec<f64>>)> {
    let h = vocab.resolve(hint)?;
    let o = match (oracle, variant) {
        (Some(_), v) if v != Variant::Ecatse => {
            return Err(Error::Usage(format!("--oracle is only accepted by ecatse checkpoints, this one is {v}")))
        }
        (Some(list), _) => Some(vocab.resolve(list)?),
        (None, Variant::Ecatse) if default_oracle => Some(h.clone()),
        (None, Variant::Ecatse) => return Err(Error::Usage("ecatse checkpoints need --oracle".into())),
        (None, _) => None,
    };
    Ok((multi_hot(vocab.len(), &h), o.map(|o| multi_hot(vocab.len(), &o))))
}

fn frozen(path: &Path) -> catse::Result<(Arc<FrozenModel>, ModelWeights)> {
    let weights = load_weights(path, LoadPurpose::Inference)?;
    let model = Model::from_params(weights.meta.config, weights.params.clone())?;
    Ok((FrozenModel::new(model)?, weights))
}

fn stream(a: StreamArgs) -> catse::Result<()> {
    let (model, weights) = frozen(&a.weights)?;
    let vocab = weights.vocabulary()?;
    let (hint, oracle) = context(&vocab, weights.meta.variant, &a.hint, a.oracle.as_deref(), false)?;
    let input = read_wav(&a.input)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a StreamArgs,
        variant: Variant,
        hint_classes: Vec<&'a str>,
        oracle_classes: Option<Vec<&'a str>>,
        samples: usize,
    }
    let names = |hot: &[f64]| -> Vec<&str> {
        hot.iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| vocab.names()[i].as_str())
            .collect()
    };
    print_config(
        "stream",
        &Resolved {
            args: &a,
            variant: weights.meta.variant,
            hint_classes: names(&hint),
            oracle_classes: oracle.as_deref().map(names),
            samples: input.len(),
        },
    )?;
    let mut state = open_stream(model, &hint, oracle.as_deref())?;
    let out = stream_clip(&mut state, &input)?;
    let format = if a.pcm16 { SampleFormat::Pcm16 } else { SampleFormat::Float32 };
    write_wav(&a.out, &out, format)?;
    println!("wrote {} samples to {}", out.len(), a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> catse::Result<()> {
    let (model, weights) = frozen(&a.weights)?;
    let vocab = weights.vocabulary()?;
    let (hint, oracle) = context(&vocab, weights.meta.variant, &a.hint, a.oracle.as_deref(), true)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        #[serde(flatten)]
        args: &'a BenchArgs,
        variant: Variant,
        hidden_channels: usize,
    }
    print_config(
        "bench",
        &Resolved {
            args: &a,
            variant: weights.meta.variant,
            hidden_channels: weights.meta.config.hidden_channels,
        },
    )?;
    let mut state = open_stream(model, &hint, oracle.as_deref())?;
    let report = benchmark(&mut state, a.seconds, a.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
