use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bertlite::balance::{self, imbalance_ratio, ClassHistogram};
use bertlite::checkpoint::{load_checkpoint, save_checkpoint};
use bertlite::classify::{train as fit, Classifier};
use bertlite::dataset::{self, DataFormat};
use bertlite::metrics::NUM_CLASSES;
use bertlite::model::BertModel;
use bertlite::pretrain::parse_corpus;
use bertlite::{synth, BalanceStrategy, Label, LabeledExample, MetricsReport, Vocab};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{input, pick, RunConfig};
use crate::failure::{CliResult, Failure};
use crate::{parse_balance, Common};

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(bertlite::Error::from)?;
    }
    std::fs::write(path, contents).map_err(bertlite::Error::from)?;
    Ok(())
}

fn read_dataset(path: &Path) -> CliResult<Vec<LabeledExample>> {
    Ok(dataset::ingest(path, DataFormat::from_path(path))?)
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let config = RunConfig::load(common.config.as_deref())?;
    config.validate()?;
    Ok(config)
}

/// Loads a checkpoint and the vocabulary it was trained with, refusing a
/// vocabulary whose hash differs from the one recorded in the header.
fn load_classifier(checkpoint: &Path, vocab_path: &Path) -> CliResult<(Classifier<f64>, u64)> {
    let vocab = Vocab::load(vocab_path)?;
    let (model, header): (BertModel<f64>, _) = load_checkpoint(checkpoint)?;
    if header.vocab_sha256 != vocab.fingerprint() {
        return Err(Failure::data(
            "vocab_mismatch",
            format!(
                "checkpoint {} was trained with vocabulary {} but {} hashes to {}",
                checkpoint.display(),
                header.vocab_sha256,
                vocab_path.display(),
                vocab.fingerprint()
            ),
        ));
    }
    Ok((Classifier::from_parts(vocab, model)?, header.seed))
}

#[derive(Args)]
pub struct BuildVocab {
    #[command(flatten)]
    common: Common,
    /// Labeled dataset(s) whose texts feed the vocabulary.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Pretraining corpus file(s).
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_size: Option<usize>,
    #[arg(long)]
    min_freq: Option<usize>,
}

pub fn build_vocab(a: BuildVocab) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let out = pick(&a.out, &config.paths.vocab, "vocab output")?;
    let mut data = a.data.clone();
    let mut corpus = a.corpus.clone();
    if data.is_empty() && corpus.is_empty() {
        data.extend(config.paths.train_data.clone());
        corpus.extend(config.paths.corpus.clone());
    }
    if data.is_empty() && corpus.is_empty() {
        return Err(Failure::usage("build-vocab needs --data or --corpus (or paths in the config)"));
    }
    for p in data.iter().chain(&corpus) {
        input(&Some(p.clone()), &None, "vocabulary source")?;
    }
    let mut texts = Vec::new();
    for p in &data {
        texts.extend(read_dataset(p)?.into_iter().map(|e| e.text));
    }
    for p in &corpus {
        let text = std::fs::read_to_string(p).map_err(bertlite::Error::from)?;
        texts.extend(parse_corpus(&text).into_iter().flatten());
    }
    let vocab = Vocab::build(
        &texts,
        a.max_size.unwrap_or(config.vocab.max_size),
        a.min_freq.unwrap_or(config.vocab.min_freq),
    )?;
    write_file(&out, vocab.to_text())?;
    println!("{}", serde_json::json!({ "vocab": out, "size": vocab.len(), "sha256": vocab.fingerprint() }));
    Ok(())
}

#[derive(Args)]
pub struct Pretrain {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn pretrain(a: Pretrain) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    let corpus_path = input(&a.corpus, &config.paths.corpus, "corpus")?;
    let vocab_path = input(&a.vocab, &config.paths.vocab, "vocab")?;
    let out = pick(&a.out, &config.paths.pretrained, "pretrained checkpoint output")?;
    let curve_path = pick(&a.curve, &config.paths.pretrain_curve, "pretraining curve output")?;
    if let Some(s) = a.steps {
        config.pretrain.steps = s;
    }
    if let Some(s) = a.seed {
        config.pretrain.seed = s;
    }

    let vocab = Vocab::load(&vocab_path)?;
    let text = std::fs::read_to_string(&corpus_path).map_err(bertlite::Error::from)?;
    // Single-sentence documents cannot supply a consecutive pair.
    let docs: Vec<Vec<String>> = parse_corpus(&text).into_iter().filter(|d| d.len() >= 2).collect();
    if docs.is_empty() {
        return Err(Failure::data("empty_dataset", "corpus has no document with two or more sentences"));
    }
    let seed = config.pretrain.seed;
    let mut model = BertModel::<f64>::new(config.encoder, vocab.len(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curve = bertlite::pretrain::pretrain(&mut model, &docs, &vocab, &config.pretrain, &mut rng)?;
    save_checkpoint(&model, &vocab.fingerprint(), seed, &out)?;
    write_file(&curve_path, curve.to_csv())?;
    let last = curve.steps.last().copied();
    println!(
        "{}",
        serde_json::json!({ "checkpoint": out, "steps": curve.steps.len(), "final": last })
    );
    Ok(())
}

#[derive(Args)]
pub struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Start from this pretrained checkpoint instead of a random init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// none | oversample | undersample | class_weights
    #[arg(long, value_parser = parse_balance)]
    balance: Option<BalanceStrategy>,
}

pub fn train(a: Train) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if let Some(b) = a.balance {
        config.train.balance = b;
    }
    config.validate()?;
    let data_path = input(&a.data, &config.paths.train_data, "training data")?;
    let vocab_path = input(&a.vocab, &config.paths.vocab, "vocab")?;
    let init_path = match (&a.init, &config.paths.pretrained) {
        (None, None) => None,
        (flag, cfg) => Some(input(flag, cfg, "pretrained checkpoint")?),
    };
    let out = pick(&a.out, &config.paths.checkpoint, "checkpoint output")?;
    let curve_path = pick(&a.curve, &config.paths.curve, "curve output")?;

    let data = read_dataset(&data_path)?;
    let seed = config.train.seed;
    let init = match init_path {
        Some(p) => load_classifier(&p, &vocab_path)?.0,
        None => Classifier::new(Vocab::load(&vocab_path)?, config.encoder, seed)?,
    };
    let (model, curve) = fit(&data, &config.train, init)?;
    save_checkpoint(&model.model, &model.vocab.fingerprint(), seed, &out)?;
    write_file(&curve_path, curve.to_csv())?;
    let last = curve.records.last();
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out,
            "curve": curve_path,
            "epochs": curve.records.len(),
            "final_train_loss": last.map(|r| r.train_loss),
            "final_val_acc": last.map(|r| r.val_acc),
        })
    );
    Ok(())
}

#[derive(Args)]
pub struct Evaluate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metrics report JSON to write.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Confusion matrix CSV to write.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

pub fn evaluate(a: Evaluate) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let checkpoint = input(&a.checkpoint, &config.paths.checkpoint, "checkpoint")?;
    let vocab_path = input(&a.vocab, &config.paths.vocab, "vocab")?;
    let data_path = input(&a.data, &config.paths.test_data, "evaluation data")?;
    let report_path = pick(&a.report, &config.paths.report, "report output")?;
    let confusion_path = pick(&a.confusion, &config.paths.confusion, "confusion output")?;

    let (model, _) = load_classifier(&checkpoint, &vocab_path)?;
    let data = read_dataset(&data_path)?;
    let (report, cm) = model.evaluate(&data)?;
    write_file(&report_path, report.to_json())?;
    write_file(&confusion_path, cm.to_csv())?;
    print!("{}", report.render());
    Ok(())
}

#[derive(Args)]
pub struct Predict {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Plain text file, one review per line.
    #[arg(long)]
    input: PathBuf,
    /// JSONL output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    label: Label,
    probabilities: BTreeMap<&'a str, f64>,
}

pub fn predict(a: Predict) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let checkpoint = input(&a.checkpoint, &config.paths.checkpoint, "checkpoint")?;
    let vocab_path = input(&a.vocab, &config.paths.vocab, "vocab")?;
    let texts_path = input(&Some(a.input.clone()), &None, "input")?;

    let (model, _) = load_classifier(&checkpoint, &vocab_path)?;
    let text = std::fs::read_to_string(&texts_path).map_err(bertlite::Error::from)?;
    let lines: Vec<&str> = text.lines().collect();
    let predictions = model.predict_batch(&lines)?;
    let mut out = String::new();
    for p in predictions {
        let record = PredictionRecord {
            label: p.label,
            probabilities: Label::NAMES.iter().copied().zip(p.probabilities).collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    match &a.out {
        Some(path) => write_file(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

#[derive(Args)]
pub struct Rebalance {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// none | oversample | undersample | class_weights
    #[arg(long, value_parser = parse_balance)]
    balance: Option<BalanceStrategy>,
    /// Rebalanced dataset; format follows the extension.
    #[arg(long)]
    out: PathBuf,
    /// Histogram JSON.
    #[arg(long)]
    histogram: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct HistogramReport {
    strategy: BalanceStrategy,
    labels: [&'static str; NUM_CLASSES],
    before: Vec<usize>,
    after: Vec<usize>,
    imbalance_ratio_before: f64,
    imbalance_ratio_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_weights: Option<Vec<f64>>,
}

pub fn rebalance(a: Rebalance) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let data_path = input(&a.data, &config.paths.train_data, "dataset")?;
    let strategy = a.balance.unwrap_or(config.train.balance);
    let seed = a.seed.unwrap_or(config.train.seed);
    let data = read_dataset(&data_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = None;
    let balanced = match strategy {
        BalanceStrategy::None => data.clone(),
        BalanceStrategy::Oversample => balance::oversample(&data, NUM_CLASSES, &mut rng)?,
        BalanceStrategy::Undersample => balance::undersample(&data, NUM_CLASSES, &mut rng)?,
        BalanceStrategy::ClassWeights => {
            weights = Some(balance::class_weights(&data, NUM_CLASSES)?);
            data.clone()
        }
    };
    let report = HistogramReport {
        strategy,
        labels: Label::NAMES,
        before: ClassHistogram::of(&data, NUM_CLASSES)?.counts,
        after: ClassHistogram::of(&balanced, NUM_CLASSES)?.counts,
        imbalance_ratio_before: imbalance_ratio(&data, NUM_CLASSES)?,
        imbalance_ratio_after: imbalance_ratio(&balanced, NUM_CLASSES)?,
        class_weights: weights,
    };
    dataset::write(&a.out, &balanced, DataFormat::from_path(&a.out))?;
    let json = serde_json::to_string_pretty(&report).expect("histogram serializes");
    write_file(&a.histogram, format!("{json}\n"))?;
    println!("{}", serde_json::to_string(&report).expect("histogram serializes"));
    Ok(())
}

#[derive(Args)]
pub struct Report {
    #[command(flatten)]
    common: Common,
    /// Metrics report JSON written by `evaluate`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the text summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn report(a: Report) -> CliResult<()> {
    let config = load_config(&a.common)?;
    let path = input(&a.report, &config.paths.report, "report")?;
    let text = std::fs::read_to_string(&path).map_err(bertlite::Error::from)?;
    let rendered = MetricsReport::from_json(&text)?.render();
    match &a.out {
        Some(p) => write_file(p, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

#[derive(Args)]
pub struct Synth {
    #[command(flatten)]
    common: Common,
    /// Directory receiving train.jsonl, test.jsonl and pretrain.txt.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = synth::DEFAULT_TRAIN_PER_CLASS)]
    train_per_class: usize,
    #[arg(long, default_value_t = synth::DEFAULT_TEST_PER_CLASS)]
    test_per_class: usize,
    #[arg(long, default_value_t = synth::DEFAULT_SEED)]
    seed: u64,
}

pub fn synth(a: Synth) -> CliResult<()> {
    let (train, test) = synth::train_test([a.train_per_class; 3], [a.test_per_class; 3], a.seed);
    write_file(&a.out_dir.join("train.jsonl"), dataset::to_jsonl(&train))?;
    write_file(&a.out_dir.join("test.jsonl"), dataset::to_jsonl(&test))?;
    write_file(&a.out_dir.join("pretrain.txt"), synth::pretraining_text(5, 4, a.seed))?;
    println!("{}", serde_json::json!({ "train": train.len(), "test": test.len(), "dir": a.out_dir }));
    Ok(())
}
