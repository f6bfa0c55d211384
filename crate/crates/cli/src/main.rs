//! Command line front end for the inference model: preprocessing,
//! training, evaluation, ensembling, categorical analysis, attention
//! heatmaps, and a finite-difference gradient self-check.
//!
//! Every run that writes files also writes a `manifest.txt` beside them
//! recording the tool version, the resolved inputs, and the full
//! configuration, with no timestamps, so identical invocations produce
//! byte-identical manifests.
//!
//! Exit codes: 0 success, 1 runtime or input failure, 2 usage error.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drbilstm_core::analysis;
use drbilstm_core::classifier::ModelParams;
use drbilstm_core::data::{self, Label, LoadReport, SentencePair};
use drbilstm_core::embeddings::{EmbeddingTable, Vocabulary};
use drbilstm_core::ensemble::{
    self, MemberOutput, PredictionSet, Strategy,
};
use drbilstm_core::tensor::{grad_check, GradCheckConfig, ParamAccess};
use drbilstm_core::trainer::{
    self, AdamConfig, Checkpoint, TrainConfig,
};
use drbilstm_core::{Error, ModelConfig, Result};

// ── Argument surface ─────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "drbilstm", version, about = "Sentence pair inference model")]
struct Cli {
    /// Worker threads for batch gradients and evaluation; all cores when
    /// absent.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a corpus, build the vocabulary, report coverage.
    Preprocess(PreprocessArgs),
    /// Train a model and keep the best development-set checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Combine several members' prediction files into one prediction.
    Ensemble(EnsembleArgs),
    /// Break accuracy down by automatic pair categories.
    Analyze(AnalyzeArgs),
    /// Export one pair's attention matrix as CSV and SVG.
    Heatmap(HeatmapArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Model settings shared by commands that build a model: a `key = value`
/// file first, then individual overrides, then the seed flag.
#[derive(Args)]
struct ModelArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// One `key=value` override on top of the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed for initialization, shuffling, and dropout.
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => ModelConfig::from_kv_text(&read_text(path)?)?,
            None => ModelConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("override {kv:?} is not key=value"))
            })?;
            cfg.apply_kv(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PreprocessArgs {
    /// Training records; the vocabulary is built from this split only.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Directory for the tokenized splits, vocabulary, and manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training pairs, structured records or the tab-separated form.
    #[arg(long)]
    train: PathBuf,
    /// Development pairs for model selection and early stopping.
    #[arg(long)]
    dev: PathBuf,
    /// Pretrained word vectors (`token v1 .. vr` lines); random
    /// initialization when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Directory for checkpoint, vocabulary, history, and manifest.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 64)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Epochs without development improvement before stopping.
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0.0004)]
    learning_rate: f64,
    /// Cap on the global gradient norm; unlimited when absent.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled pairs to score.
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file; `vocab.txt` beside the checkpoint by default.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Directory for per-pair predictions and the manifest; console-only
    /// when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Labeled pairs the member development predictions cover.
    #[arg(long)]
    dev_data: PathBuf,
    /// Held-out labeled pairs for the test predictions.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Combination rule: weighted, average, or vote.
    #[arg(long, default_value = "weighted")]
    strategy: String,
    #[arg(long)]
    out: PathBuf,
    /// One development prediction CSV per member; repeatable.
    #[arg(long = "dev", required = true, value_name = "CSV")]
    dev: Vec<PathBuf>,
    /// Matching test prediction CSVs, same order as --dev.
    #[arg(long = "test", value_name = "CSV")]
    test: Vec<PathBuf>,
    /// Grow the ensemble greedily up to this many members and report the
    /// whole size curve; uses learned weights regardless of --strategy.
    #[arg(long, value_name = "N")]
    select_up_to: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Labeled pairs to tag.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-model prediction CSVs; the model is named after the file stem.
    /// With exactly two models the pair is also significance-tested.
    #[arg(long = "predictions", required = true, value_name = "CSV")]
    predictions: Vec<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file; `vocab.txt` beside the checkpoint by default.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// First sentence, plain text.
    #[arg(long)]
    premise: String,
    /// Second sentence, plain text.
    #[arg(long)]
    hypothesis: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Word vector width.
    #[arg(long, default_value_t = 8)]
    r: usize,
    /// Recurrent state width.
    #[arg(long, default_value_t = 12)]
    d: usize,
    /// Longest sentence, in tokens.
    #[arg(long, default_value_t = 7)]
    tokens: usize,
    /// Sentence pairs summed into the checked loss.
    #[arg(long, default_value_t = 1)]
    pairs: usize,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 24)]
    samples: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

// ── Entry point ──────────────────────────────────────────────────────────

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(), // usage errors leave with code 2, --help with 0
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match &cli.command {
        Command::Preprocess(args) => run_preprocess(args, cli.threads),
        Command::Train(args) => run_train(args, cli.threads),
        Command::Eval(args) => run_eval(args, cli.threads),
        Command::Ensemble(args) => run_ensemble(args, cli.threads),
        Command::Analyze(args) => run_analyze(args, cli.threads),
        Command::Heatmap(args) => run_heatmap(args, cli.threads),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

// ── Shared plumbing ──────────────────────────────────────────────────────

/// Resolves an input path, falling back to `DRBL_DATA_DIR` as the root
/// for relative paths that do not exist from the working directory.
fn resolve_input(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    if let Some(root) = std::env::var_os("DRBL_DATA_DIR") {
        let joined = Path::new(&root).join(path);
        if joined.exists() {
            return joined;
        }
    }
    path.to_path_buf()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_split(path: &Path) -> Result<LoadReport> {
    let resolved = resolve_input(path);
    data::load_pairs(&resolved)
        .map_err(|e| Error::Data(format!("{}: {e}", resolved.display())))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let resolved = resolve_input(path);
    let mut file = File::open(&resolved)
        .map_err(|e| Error::Data(format!("{}: {e}", resolved.display())))?;
    Vocabulary::load(&mut file)
}

/// The vocabulary a checkpoint was trained with: an explicit flag, or
/// `vocab.txt` in the checkpoint's directory.
fn sibling_vocab(checkpoint: &Path, flag: &Option<PathBuf>) -> PathBuf {
    match flag {
        Some(p) => p.clone(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.txt"),
    }
}

/// Loads a checkpoint and re-arms the frozen embedding rows from the
/// vocabulary (checkpoints do not store them).
fn load_model(
    checkpoint: &Path,
    vocab_flag: &Option<PathBuf>,
) -> Result<(ModelParams<f32>, Vocabulary, Checkpoint)> {
    let ckpt_path = resolve_input(checkpoint);
    let ckpt = trainer::load_checkpoint(&ckpt_path)
        .map_err(|e| Error::Data(format!("{}: {e}", ckpt_path.display())))?;
    let vocab = load_vocab(&sibling_vocab(&ckpt_path, vocab_flag))?;
    let mut params = ckpt.params.clone();
    if params.vocab_size() != vocab.len() {
        return Err(Error::Data(format!(
            "checkpoint embeds {} tokens but the vocabulary lists {}",
            params.vocab_size(),
            vocab.len()
        )));
    }
    params.frozen_rows = vec![vocab.unk_id()];
    Ok((params, vocab, ckpt))
}

/// One manifest per output directory: tool version, command, thread
/// setting, then the caller's key/value lines. Content is a pure function
/// of the invocation, so reruns produce byte-identical files.
fn write_manifest(
    dir: &Path,
    command: &str,
    threads: Option<usize>,
    entries: &[(String, String)],
) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "tool = drbilstm {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(text, "command = {command}").unwrap();
    let threads = threads.map_or_else(|| "all".to_string(), |n| n.to_string());
    writeln!(text, "threads = {threads}").unwrap();
    for (key, value) in entries {
        writeln!(text, "{key} = {value}").unwrap();
    }
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn kv(key: impl Into<String>, value: impl ToString) -> (String, String) {
    (key.into(), value.to_string())
}

/// Model configuration lines for a manifest, `model.` prefixed.
fn config_entries(cfg: &ModelConfig) -> Vec<(String, String)> {
    cfg.to_kv_text()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (format!("model.{k}"), v.to_string()))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Gold labels for a prediction set, matched through pair ids so the
/// prediction file may be ordered differently than the dataset.
fn golds_for(set: &PredictionSet, by_id: &HashMap<&str, Label>) -> Result<Vec<Label>> {
    set.pair_ids
        .iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                Error::Data(format!("prediction for unknown pair id {id:?}"))
            })
        })
        .collect()
}

// ── preprocess ───────────────────────────────────────────────────────────

fn split_stats(name: &str, pairs: &[SentencePair], vocab: &Vocabulary) {
    let (mut with, mut without, mut tokens) = (0usize, 0usize, 0usize);
    for p in pairs {
        for side in [&p.premise, &p.hypothesis] {
            let (w, wo) = data::unknown_counts(side, vocab);
            with += w;
            without += wo;
            tokens += side.len();
        }
    }
    let frac = data::label_fractions(pairs);
    println!(
        "{name}: {} pairs, {tokens} tokens, {without} unknown -> {with} after recovery",
        pairs.len()
    );
    println!(
        "{name}: labels entailment {:.3} / neutral {:.3} / contradiction {:.3}",
        frac[0], frac[1], frac[2]
    );
}

fn run_preprocess(args: &PreprocessArgs, threads: Option<usize>) -> Result<ExitCode> {
    ensure_dir(&args.out)?;
    let train = load_split(&args.train)?;
    if train.dropped_no_consensus > 0 {
        println!(
            "train: dropped {} pairs without label consensus",
            train.dropped_no_consensus
        );
    }
    let vocab = data::build_vocabulary(&train.pairs);
    let mut vocab_file = File::create(args.out.join("vocab.txt"))?;
    vocab.save(&mut vocab_file)?;
    println!("vocabulary: {} tokens", vocab.len());

    let mut manifest = vec![
        kv("input.train", resolve_input(&args.train).display()),
        kv("output.vocab", "vocab.txt"),
    ];
    for (name, input) in [
        ("train", Some(&args.train)),
        ("dev", args.dev.as_ref()),
        ("test", args.test.as_ref()),
    ] {
        let Some(input) = input else { continue };
        let report = if name == "train" {
            None
        } else {
            manifest.push(kv(format!("input.{name}"), resolve_input(input).display()));
            Some(load_split(input)?)
        };
        let pairs = report.as_ref().map_or(&train.pairs, |r| &r.pairs);
        if let Some(r) = &report {
            if r.dropped_no_consensus > 0 {
                println!(
                    "{name}: dropped {} pairs without label consensus",
                    r.dropped_no_consensus
                );
            }
        }
        let out = args.out.join(format!("{name}.tsv"));
        let mut file = File::create(&out)?;
        data::save_tsv(pairs, &mut file)?;
        manifest.push(kv(format!("output.{name}"), format!("{name}.tsv")));
        split_stats(name, pairs, &vocab);
    }
    write_manifest(&args.out, "preprocess", threads, &manifest)?;
    Ok(ExitCode::SUCCESS)
}

// ── train ────────────────────────────────────────────────────────────────

fn run_train(args: &TrainArgs, threads: Option<usize>) -> Result<ExitCode> {
    ensure_dir(&args.out)?;
    let cfg = args.model.resolve()?;
    let train_pairs = load_split(&args.train)?.pairs;
    let dev_pairs = load_split(&args.dev)?.pairs;
    let vocab = data::build_vocabulary(&train_pairs);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = match &args.embeddings {
        Some(path) => {
            let resolved = resolve_input(path);
            let mut file = File::open(&resolved)
                .map_err(|e| Error::Data(format!("{}: {e}", resolved.display())))?;
            let (table, coverage) =
                EmbeddingTable::load_pretrained(&vocab, cfg.embedding_dim, &mut file, &mut rng)?;
            println!(
                "embeddings: {}/{} tokens covered ({:.1}%), {} file vectors unused",
                coverage.covered,
                coverage.vocab_size,
                100.0 * coverage.fraction(),
                coverage.unused_vectors
            );
            table
        }
        None => EmbeddingTable::random(&vocab, cfg.embedding_dim, &mut rng)?,
    };
    let params = ModelParams::init(&cfg, vocab.len(), &mut rng)?
        .with_embeddings(table.table, table.frozen_rows)?;
    println!(
        "model: {} parameters over {} vocabulary tokens",
        params.total_parameters(),
        vocab.len()
    );

    let train_idx = data::index_pairs(&train_pairs, &vocab);
    let dev_idx = data::index_pairs(&dev_pairs, &vocab);
    let tcfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        patience: args.patience,
        adam: AdamConfig { learning_rate: args.learning_rate, ..Default::default() },
        clip_norm: args.clip_norm,
        seed: cfg.seed,
    };
    let quiet = args.quiet;
    let report = trainer::train_with(params, &train_idx, &dev_idx, &tcfg, |s| {
        if !quiet {
            println!(
                "epoch {}: loss {:.4}, train {:.4}, dev {:.4}",
                s.epoch, s.mean_loss, s.train_acc, s.dev_acc
            );
        }
    })?;

    let mut vocab_file = File::create(args.out.join("vocab.txt"))?;
    vocab.save(&mut vocab_file)?;
    trainer::write_history(args.out.join("history.csv"), &report.history)?;
    let ckpt = Checkpoint {
        adam: Some((report.adam.t, report.adam.m.clone(), report.adam.v.clone())),
        params: report.params,
        best_dev_accuracy: report.best_dev_accuracy,
        seed: cfg.seed,
    };
    trainer::save_checkpoint(args.out.join("model.ckpt"), &ckpt)?;
    println!(
        "best epoch {}: dev accuracy {:.4}{}",
        report.best_epoch,
        report.best_dev_accuracy,
        if report.stopped_early { " (stopped early)" } else { "" }
    );

    let mut manifest = vec![
        kv("input.train", resolve_input(&args.train).display()),
        kv("input.dev", resolve_input(&args.dev).display()),
        kv(
            "input.embeddings",
            args.embeddings
                .as_ref()
                .map_or_else(|| "random".to_string(), |p| resolve_input(p).display().to_string()),
        ),
        kv("output.checkpoint", "model.ckpt"),
        kv("output.vocab", "vocab.txt"),
        kv("output.history", "history.csv"),
    ];
    manifest.extend(config_entries(&cfg));
    manifest.extend([
        kv("train.epochs", args.epochs),
        kv("train.batch_size", args.batch_size),
        kv("train.patience", args.patience),
        kv("train.learning_rate", args.learning_rate),
        kv(
            "train.clip_norm",
            args.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string()),
        ),
    ]);
    write_manifest(&args.out, "train", threads, &manifest)?;
    Ok(ExitCode::SUCCESS)
}

// ── eval ─────────────────────────────────────────────────────────────────

fn run_eval(args: &EvalArgs, threads: Option<usize>) -> Result<ExitCode> {
    let (params, vocab, ckpt) = load_model(&args.checkpoint, &args.vocab)?;
    let pairs = load_split(&args.data)?.pairs;
    let indexed = data::index_pairs(&pairs, &vocab);
    let report = trainer::evaluate(&params, &indexed)?;
    println!("accuracy {:.4} on {} pairs", report.accuracy, indexed.len());
    println!("checkpoint development accuracy {:.4}", ckpt.best_dev_accuracy);

    if let Some(out) = &args.out {
        ensure_dir(out)?;
        let set = PredictionSet::new(
            indexed.iter().map(|p| p.id.clone()).collect(),
            report.predictions.iter().map(|p| p.probs).collect(),
        )?;
        ensemble::write_prediction_set(out.join("predictions.csv"), &set)?;
        let manifest = vec![
            kv("input.checkpoint", resolve_input(&args.checkpoint).display()),
            kv("input.data", resolve_input(&args.data).display()),
            kv("output.predictions", "predictions.csv"),
            kv("model.seed", ckpt.seed),
        ];
        write_manifest(out, "eval", threads, &manifest)?;
    }
    Ok(ExitCode::SUCCESS)
}

// ── ensemble ─────────────────────────────────────────────────────────────

fn label_map(pairs: &[SentencePair]) -> HashMap<&str, Label> {
    pairs.iter().map(|p| (p.id.as_str(), p.label)).collect()
}

fn write_labels_csv(path: &Path, ids: &[String], labels: &[Label]) -> Result<()> {
    let mut text = String::from("pair_id,label\n");
    for (id, label) in ids.iter().zip(labels) {
        writeln!(text, "{id},{label}").unwrap();
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run_ensemble(args: &EnsembleArgs, threads: Option<usize>) -> Result<ExitCode> {
    ensure_dir(&args.out)?;
    if !args.test.is_empty() && args.test.len() != args.dev.len() {
        return Err(Error::Config(format!(
            "{} test prediction files for {} members",
            args.test.len(),
            args.dev.len()
        )));
    }
    if !args.test.is_empty() && args.test_data.is_none() {
        return Err(Error::Config(
            "--test predictions need --test-data for their gold labels".into(),
        ));
    }

    let dev_pairs = load_split(&args.dev_data)?.pairs;
    let dev_by_id = label_map(&dev_pairs);
    let dev_sets: Vec<PredictionSet> = args
        .dev
        .iter()
        .map(|p| ensemble::read_prediction_set(resolve_input(p)))
        .collect::<Result<_>>()?;
    for set in &dev_sets[1..] {
        if set.pair_ids != dev_sets[0].pair_ids {
            return Err(Error::Data(
                "member prediction files cover different pairs or orders".into(),
            ));
        }
    }
    let dev_golds = golds_for(&dev_sets[0], &dev_by_id)?;
    let dev_probs: Vec<Vec<[f64; 3]>> = dev_sets.iter().map(|s| s.probs.clone()).collect();
    let member_ids: Vec<String> = args.dev.iter().map(|p| file_stem(p)).collect();

    for (id, set) in member_ids.iter().zip(&dev_sets) {
        let acc = trainer::accuracy(&set.labels(), &dev_golds)?;
        println!("member {id}: dev accuracy {acc:.4}");
    }

    let test_bundle = if args.test.is_empty() {
        None
    } else {
        let test_pairs = load_split(args.test_data.as_ref().expect("checked above"))?.pairs;
        let test_by_id = label_map(&test_pairs);
        let sets: Vec<PredictionSet> = args
            .test
            .iter()
            .map(|p| ensemble::read_prediction_set(resolve_input(p)))
            .collect::<Result<_>>()?;
        for set in &sets[1..] {
            if set.pair_ids != sets[0].pair_ids {
                return Err(Error::Data(
                    "member test files cover different pairs or orders".into(),
                ));
            }
        }
        let golds = golds_for(&sets[0], &test_by_id)?;
        Some((sets, golds))
    };

    let mut manifest = vec![
        kv("input.dev_data", resolve_input(&args.dev_data).display()),
        kv("strategy", &args.strategy),
        kv("members", member_ids.join(",")),
    ];
    if let Some(p) = &args.test_data {
        manifest.push(kv("input.test_data", resolve_input(p).display()));
    }

    if let Some(max_n) = args.select_up_to {
        // Greedy growth needs every member to carry a test set; without
        // test files the dev predictions stand in and the test column
        // mirrors the dev split.
        let members: Vec<MemberOutput> = member_ids
            .iter()
            .zip(&dev_sets)
            .enumerate()
            .map(|(i, (id, dev))| {
                let test = match &test_bundle {
                    Some((sets, _)) => sets[i].clone(),
                    None => dev.clone(),
                };
                MemberOutput::new(id.clone(), dev.clone(), test, &dev_golds)
            })
            .collect::<Result<_>>()?;
        let test_golds = match &test_bundle {
            Some((_, golds)) => golds.clone(),
            None => dev_golds.clone(),
        };
        let selection = ensemble::greedy_select(&members, &dev_golds, &test_golds, max_n)?;
        let mut curve = String::from("size,dev_accuracy,test_accuracy,members\n");
        for choice in &selection.per_size {
            println!(
                "size {}: dev {:.4}, test {:.4} [{}]",
                choice.member_indices.len(),
                choice.dev_accuracy,
                choice.test_accuracy,
                choice.member_ids.join(" ")
            );
            writeln!(
                curve,
                "{},{},{},{}",
                choice.member_indices.len(),
                choice.dev_accuracy,
                choice.test_accuracy,
                choice.member_ids.join(" ")
            )
            .unwrap();
        }
        std::fs::write(args.out.join("sizes.csv"), curve)?;
        let best = &selection.per_size[selection.best];
        println!(
            "best: {} members, dev {:.4}, weights {:?}",
            best.member_indices.len(),
            best.dev_accuracy,
            best.weights
        );
        manifest.push(kv("select_up_to", max_n));
        manifest.push(kv("output.sizes", "sizes.csv"));
        write_manifest(&args.out, "ensemble", threads, &manifest)?;
        return Ok(ExitCode::SUCCESS);
    }

    let strategy = Strategy::parse(&args.strategy)?;
    match strategy {
        Strategy::MajorityVote => {
            let labels = ensemble::majority_vote(&dev_probs)?;
            let acc = trainer::accuracy(&labels, &dev_golds)?;
            println!("vote: dev accuracy {acc:.4}");
            write_labels_csv(&args.out.join("ensemble_dev.csv"), &dev_sets[0].pair_ids, &labels)?;
            if let Some((sets, golds)) = &test_bundle {
                let probs: Vec<Vec<[f64; 3]>> = sets.iter().map(|s| s.probs.clone()).collect();
                let labels = ensemble::majority_vote(&probs)?;
                let acc = trainer::accuracy(&labels, golds)?;
                println!("vote: test accuracy {acc:.4}");
                write_labels_csv(&args.out.join("ensemble_test.csv"), &sets[0].pair_ids, &labels)?;
                manifest.push(kv("output.test", "ensemble_test.csv"));
            }
        }
        Strategy::WeightedAverage | Strategy::UniformAverage => {
            let weights = match strategy {
                Strategy::WeightedAverage => {
                    let learned = ensemble::learn_weights(&dev_probs, &dev_golds)?;
                    learned.weights
                }
                _ => ensemble::uniform_weights(dev_probs.len()),
            };
            for (id, w) in member_ids.iter().zip(&weights) {
                println!("weight {id}: {w:.4}");
            }
            let combined = ensemble::weighted_average(&dev_probs, &weights)?;
            let combined_set =
                PredictionSet::new(dev_sets[0].pair_ids.clone(), combined)?;
            let acc = trainer::accuracy(&combined_set.labels(), &dev_golds)?;
            println!("{}: dev accuracy {acc:.4}", strategy.as_str());
            ensemble::write_prediction_set(args.out.join("ensemble_dev.csv"), &combined_set)?;
            if let Some((sets, golds)) = &test_bundle {
                let probs: Vec<Vec<[f64; 3]>> = sets.iter().map(|s| s.probs.clone()).collect();
                let combined = ensemble::weighted_average(&probs, &weights)?;
                let set = PredictionSet::new(sets[0].pair_ids.clone(), combined)?;
                let acc = trainer::accuracy(&set.labels(), golds)?;
                println!("{}: test accuracy {acc:.4}", strategy.as_str());
                ensemble::write_prediction_set(args.out.join("ensemble_test.csv"), &set)?;
                manifest.push(kv("output.test", "ensemble_test.csv"));
            }
            let rendered: Vec<String> = weights.iter().map(|w| format!("{w}")).collect();
            manifest.push(kv("weights", rendered.join(",")));
        }
    }
    manifest.push(kv("output.dev", "ensemble_dev.csv"));
    write_manifest(&args.out, "ensemble", threads, &manifest)?;
    Ok(ExitCode::SUCCESS)
}

// ── analyze ──────────────────────────────────────────────────────────────

fn run_analyze(args: &AnalyzeArgs, threads: Option<usize>) -> Result<ExitCode> {
    ensure_dir(&args.out)?;
    let pairs = load_split(&args.data)?.pairs;
    let tagsets: Vec<analysis::TagSet> = pairs.iter().map(analysis::annotate).collect();
    let golds: Vec<Label> = pairs.iter().map(|p| p.label).collect();
    let by_index: HashMap<&str, usize> =
        pairs.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();

    let mut models = Vec::new();
    let mut label_columns = Vec::new();
    for path in &args.predictions {
        let set = ensemble::read_prediction_set(resolve_input(path))?;
        if set.len() != pairs.len() {
            return Err(Error::Data(format!(
                "{}: {} predictions for {} pairs",
                path.display(),
                set.len(),
                pairs.len()
            )));
        }
        // Reorder the file's labels into dataset order through pair ids.
        let mut labels = vec![Label::Entailment; pairs.len()];
        let mut seen = vec![false; pairs.len()];
        for (id, label) in set.pair_ids.iter().zip(set.labels()) {
            let &i = by_index.get(id.as_str()).ok_or_else(|| {
                Error::Data(format!("prediction for unknown pair id {id:?}"))
            })?;
            if seen[i] {
                return Err(Error::Data(format!("duplicate prediction for pair {id:?}")));
            }
            seen[i] = true;
            labels[i] = label;
        }
        let name = file_stem(path);
        let overall = trainer::accuracy(&labels, &golds)?;
        println!("model {name}: accuracy {overall:.4}");
        let rows = analysis::categorical_accuracy(&labels, &golds, &tagsets)?;
        models.push((name, rows));
        label_columns.push(labels);
    }

    let report = analysis::categorical_report(&models)?;
    std::fs::write(args.out.join("categories.tsv"), &report)?;

    if let [a, b] = &label_columns[..] {
        let result = analysis::chi_square(a, b, &golds)?;
        println!(
            "chi-square {:.4}, p {:.6}, table {:?}",
            result.statistic, result.p_value, result.table
        );
        if result.low_expected_counts {
            println!("warning: an expected cell count is below 5; the p-value is rough");
        }
    }

    let mut manifest = vec![
        kv("input.data", resolve_input(&args.data).display()),
        kv("output.categories", "categories.tsv"),
    ];
    for path in &args.predictions {
        manifest.push(kv(
            format!("input.predictions.{}", file_stem(path)),
            resolve_input(path).display(),
        ));
    }
    write_manifest(&args.out, "analyze", threads, &manifest)?;
    Ok(ExitCode::SUCCESS)
}

// ── heatmap ──────────────────────────────────────────────────────────────

fn run_heatmap(args: &HeatmapArgs, threads: Option<usize>) -> Result<ExitCode> {
    ensure_dir(&args.out)?;
    let (params, vocab, _) = load_model(&args.checkpoint, &args.vocab)?;
    let mut recoverer = data::Recoverer::new(&vocab);
    let mut prepare = |text: &str| -> Result<(Vec<String>, Vec<usize>)> {
        let tokens = recoverer.map(&data::tokenize(text, None)?);
        let ids = tokens
            .iter()
            .map(|t| vocab.id(t).expect("recovery only emits vocabulary tokens"))
            .collect();
        Ok((tokens, ids))
    };
    let (p_tokens, p_ids) = prepare(&args.premise)?;
    let (h_tokens, h_ids) = prepare(&args.hypothesis)?;

    let (prediction, energy) = params.predict_with_energy(&p_ids, &h_ids)?;
    println!(
        "prediction: {} (entailment {:.4}, neutral {:.4}, contradiction {:.4})",
        prediction.label, prediction.probs[0], prediction.probs[1], prediction.probs[2]
    );
    analysis::write_heatmap_csv(args.out.join("heatmap.csv"), &energy, &p_tokens, &h_tokens)?;
    analysis::write_heatmap_svg(args.out.join("heatmap.svg"), &energy, &p_tokens, &h_tokens)?;

    let manifest = vec![
        kv("input.checkpoint", resolve_input(&args.checkpoint).display()),
        kv("premise", &args.premise),
        kv("hypothesis", &args.hypothesis),
        kv("output.csv", "heatmap.csv"),
        kv("output.svg", "heatmap.svg"),
    ];
    write_manifest(&args.out, "heatmap", threads, &manifest)?;
    Ok(ExitCode::SUCCESS)
}

// ── gradcheck ────────────────────────────────────────────────────────────

fn run_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    if args.tokens < 2 || args.pairs == 0 {
        return Err(Error::Config(
            "gradcheck needs sentences of at least 2 tokens and at least 1 pair".into(),
        ));
    }
    let mut cfg = ModelConfig::tiny(args.r, args.d);
    cfg.seed = args.seed;
    let vocab_size = 16usize;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut params = ModelParams::init(&cfg, vocab_size, &mut rng)?.to_f64();
    // Fresh embeddings are centimeter-scale noise, which parks activations
    // next to the relu and max kinks at finite-difference resolution;
    // scaling moves the check to a generic point, the regime pretrained
    // vectors occupy.
    for x in params.tensor_mut("embed.table")?.data_mut() {
        *x *= 100.0;
    }

    let mut examples = Vec::with_capacity(args.pairs);
    for _ in 0..args.pairs {
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<usize> {
            let len = rng.gen_range(2..=args.tokens);
            (0..len).map(|_| rng.gen_range(0..vocab_size)).collect()
        };
        let premise = sentence(&mut rng);
        let hypothesis = sentence(&mut rng);
        let gold = Label::from_index(rng.gen_range(0..3usize))?;
        examples.push((premise, hypothesis, gold));
    }

    let mut analytic: Vec<(String, Vec<f64>)> = params
        .tensors
        .iter()
        .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
        .collect();
    for (premise, hypothesis, gold) in &examples {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
        let (_, grads) =
            params.example_gradients(premise, hypothesis, *gold, false, &mut eval_rng)?;
        for ((_, acc), g) in analytic.iter_mut().zip(&grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }

    let examples_ref = &examples;
    let report = grad_check(
        &mut params,
        &analytic,
        |p| {
            let mut total = 0.0f64;
            for (premise, hypothesis, gold) in examples_ref {
                let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
                let (loss, _) =
                    p.example_gradients(premise, hypothesis, *gold, false, &mut eval_rng)?;
                total += loss;
            }
            Ok(total)
        },
        &GradCheckConfig {
            eps: 1e-5, // small steps avoid flipping max-fusion branches
            tolerance: args.tolerance,
            samples_per_tensor: args.samples,
            seed: args.seed,
        },
    )?;

    println!(
        "max relative error {:.3e} over {} coordinates (tolerance {:.1e})",
        report.max_rel_err(),
        report.entries.len(),
        args.tolerance
    );
    if let Some(worst) = report.worst() {
        println!(
            "worst: {}[{}] analytic {:.6e}, numeric {:.6e}",
            worst.tensor, worst.index, worst.analytic, worst.numeric
        );
    }
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient check failed");
        Ok(ExitCode::from(1))
    }
}
