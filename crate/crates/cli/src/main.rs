mod model_file;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use defgen_core::corpus::{
    compute_statistics, load_dataset, load_dataset_with, parse_ratios, split_by_word, DatasetFormat, LoadOptions,
};
use defgen_core::decoding::{GenerationSpec, Strategy, DEFAULT_BEAM_WIDTH, DEFAULT_MAX_LEN};
use defgen_core::metrics::{aggregate_manual, evaluate_model, ManualScoreSheet};
use defgen_core::model::init_params;
use defgen_core::router::{CorpusIndex, Gazetteer, Mode, ModelGenerator, QueryRequest, Router};
use defgen_core::tokenizer::{train_bpe, SubwordTokenizer};
use defgen_core::training::{load_checkpoint, run_phase, save_checkpoint, Phase};
use defgen_core::{Dataset, Lang};
use defgen_service::config::ServiceConfig;

use crate::model_file::ModelFile;

#[derive(Parser)]
#[command(name = "defgen", version, about = "Contextual definition generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics and word-disjoint splitting.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train or apply a subword tokenizer.
    #[command(subcommand)]
    Tok(TokCmd),
    /// Run one training phase and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Define a word as used in a sentence.
    Define(DefineArgs),
    /// Automatic metrics over a test set, or manual score aggregation.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Stats {
        file: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: DatasetFormat,
    },
    Split {
        file: PathBuf,
        #[arg(long, default_value = "8:1:1")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Receives train.jsonl, valid.jsonl and test.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: DatasetFormat,
    },
}

#[derive(Subcommand)]
enum TokCmd {
    Train {
        /// A JSON-Lines dataset (words, contexts and definitions are used) or
        /// a plain text file.
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(short, long)]
        output: PathBuf,
        /// Languages that get a prompt token, in addition to those found in
        /// a dataset.
        #[arg(long, value_delimiter = ',', default_value = "en,zh")]
        langs: Vec<String>,
    },
    Encode {
        tokenizer: PathBuf,
        text: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    phase: Phase,
    /// Directory holding train.jsonl and valid.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Model and training TOML; omitted keys take the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    beam: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    max_len: usize,
}

impl DecodeArgs {
    fn spec(&self, output_lang: Lang) -> Result<GenerationSpec> {
        let spec = GenerationSpec {
            strategy: if self.beam == 1 {
                Strategy::Greedy
            } else {
                Strategy::Beam { width: self.beam }
            },
            max_len: self.max_len,
            ..GenerationSpec::new(output_lang)
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args)]
struct DefineArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    word: String,
    #[arg(long)]
    context: String,
    #[arg(long, default_value = "en-en")]
    mode: Mode,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Named-entity list; matching words get its fixed definition.
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    /// Example-sentence source (JSON-Lines dataset or one sentence per line).
    #[arg(long)]
    examples: Option<PathBuf>,
    /// Print the full result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct EvalArgs {
    #[command(subcommand)]
    manual: Option<EvalCmd>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Write per-entry scores and corpus metrics here as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Average a CSV of human scores (columns model,scorer,criterion,entry,score).
    Manual {
        #[arg(long)]
        sheet: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured bind address.
    #[arg(long)]
    bind: Option<String>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Corpus(cmd) => corpus(cmd),
        Command::Tok(cmd) => tok(cmd),
        Command::Train(args) => train(args),
        Command::Define(args) => define(args),
        Command::Eval(args) => eval(args),
        Command::Serve(args) => serve(args),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Stats { file, format } => {
            let ds = load_dataset(&file, format)?;
            let mut value = serde_json::to_value(compute_statistics(&ds))?;
            value["flagged_count"] = ds.flagged_count().into();
            print_json(&value)
        }
        CorpusCmd::Split {
            file,
            ratios,
            seed,
            out,
            format,
        } => {
            let ds = load_dataset(&file, format)?;
            let (train, valid, test) = split_by_word(&ds, parse_ratios(&ratios)?, seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
                let path = out.join(format!("{name}.jsonl"));
                part.save(&path).with_context(|| format!("writing {}", path.display()))?;
                println!("{name}\t{} words\t{} entries", part.lexicon().len(), part.len());
            }
            Ok(())
        }
    }
}

fn tok(cmd: TokCmd) -> Result<()> {
    match cmd {
        TokCmd::Train {
            corpus,
            vocab_size,
            output,
            langs,
        } => {
            let mut langs: BTreeSet<Lang> = langs.iter().map(Lang::new).collect::<Result<_, _>>()?;
            let lines: Vec<String> = if corpus.extension().is_some_and(|e| e == "jsonl") {
                let ds = load_dataset(&corpus, DatasetFormat::JsonLines)?;
                for e in ds.entries() {
                    langs.insert(e.source_lang.clone());
                    langs.insert(e.target_lang.clone());
                }
                ds.entries()
                    .iter()
                    .flat_map(|e| [e.word.clone(), e.context.clone(), e.definition.clone()])
                    .collect()
            } else {
                let text = fs::read_to_string(&corpus).with_context(|| format!("reading {}", corpus.display()))?;
                text.lines().map(str::to_owned).collect()
            };
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let langs: Vec<Lang> = langs.into_iter().collect();
            let tok = train_bpe(&refs, vocab_size, &langs)?;
            tok.save(&output)?;
            log::info!(
                "{} tokens ({} merges) written to {}",
                tok.vocab_size(),
                tok.merges().len(),
                output.display()
            );
            Ok(())
        }
        TokCmd::Encode { tokenizer, text } => {
            let tok = load_tokenizer(&tokenizer)?;
            let ids: Vec<String> = tok.encode(&text).iter().map(u32::to_string).collect();
            println!("{}", ids.join(" "));
            Ok(())
        }
    }
}

fn load_tokenizer(path: &Path) -> Result<SubwordTokenizer> {
    SubwordTokenizer::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_split(dir: &Path, name: &str) -> Result<Dataset> {
    let path = dir.join(format!("{name}.jsonl"));
    load_dataset_with(&path, DatasetFormat::JsonLines, LoadOptions::for_training())
        .with_context(|| format!("loading {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let tok = load_tokenizer(&args.tokenizer)?;
    let file = match &args.config {
        Some(p) => ModelFile::load(p)?,
        None => ModelFile::default(),
    };
    let train = load_split(&args.data, "train")?;
    let valid = load_split(&args.data, "valid")?;
    let params = match &args.init {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if ckpt.config().vocab_size != tok.vocab_size() {
                bail!(
                    "checkpoint vocabulary {} does not match tokenizer {}",
                    ckpt.config().vocab_size,
                    tok.vocab_size()
                );
            }
            ckpt.params
        }
        None => init_params(&file.model_config(tok.vocab_size())?, args.seed)?,
    };
    let config = file.train_config(args.phase, args.seed);
    log::info!(
        "{:?}: {} parameters, {} train / {} valid entries, lr {}",
        config.phase,
        params.len(),
        train.len(),
        valid.len(),
        config.learning_rate
    );
    let outcome = run_phase(params, &train, &valid, &config, &tok, &mut |log| {
        println!("{}", serde_json::to_string(log).expect("epoch log serializes"));
    })?;
    save_checkpoint(&outcome.checkpoint, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    log::info!(
        "best epoch {} (valid loss {:?}) saved to {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.best_valid_loss,
        args.out.display()
    );
    Ok(())
}

fn define(args: DefineArgs) -> Result<()> {
    let tok = Arc::new(load_tokenizer(&args.tokenizer)?);
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let gazetteer = match &args.gazetteer {
        Some(p) => Gazetteer::load(p)?,
        None => Gazetteer::default(),
    };
    let index = match &args.examples {
        Some(p) if p.extension().is_some_and(|e| e == "jsonl") => {
            CorpusIndex::from_dataset(&load_dataset(p, DatasetFormat::JsonLines)?)
        }
        Some(p) => CorpusIndex::load(p)?,
        None => CorpusIndex::default(),
    };
    let spec = args.decode.spec(args.mode.output_lang())?;
    let id = args.ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let generator = ModelGenerator::new(ckpt.params, tok, args.mode, spec, id);
    let router = Router::new(Arc::new(gazetteer), index).with_model(args.mode, Arc::new(generator));
    let result = router.define(&QueryRequest::new(args.word, args.context, args.mode))?;
    if args.json {
        print_json(&result)
    } else {
        println!("{}", result.definition);
        for e in &result.examples {
            println!("  - {e}");
        }
        Ok(())
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    if let Some(EvalCmd::Manual { sheet, json }) = args.manual {
        let sheet = ManualScoreSheet::load(&sheet)?;
        let summaries = aggregate_manual(&sheet)?;
        if json {
            return print_json(&summaries);
        }
        for s in &summaries {
            let scorers: Vec<String> = s.scorer_means.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("{}\t{:?}\t{}\tavg={}", s.model, s.criterion, scorers.join(" "), s.overall);
        }
        return Ok(());
    }
    let (Some(ckpt), Some(test), Some(tokenizer)) = (&args.ckpt, &args.test, &args.tokenizer) else {
        bail!("eval needs --ckpt, --test and --tokenizer (or the `manual` subcommand)");
    };
    let tok = load_tokenizer(tokenizer)?;
    let ckpt = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let test = load_dataset(test, DatasetFormat::JsonLines)?;
    let spec = args.decode.spec(Lang::en())?;
    let report = evaluate_model(&ckpt.params, &test, &spec, &tok)?;
    println!("BLEU\t{:.2}\nNIST\t{:.4}", report.corpus_bleu, report.corpus_nist);
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::load(&args.config)?;
    if let Some(bind) = args.bind {
        cfg.bind = bind;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(defgen_service::serve(cfg, defgen_service::shutdown_signal()))
}
