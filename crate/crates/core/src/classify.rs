//! Three-way sentiment classification: inference, fine-tuning and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{self, BalanceStrategy, ClassHistogram};
use crate::dataset::{Label, LabeledExample};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Var};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::model::{BertModel, NUM_CLASSES};
use crate::optim::{Algorithm, Optimizer, OptimizerConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tokenizer::{encode_pair, EncodedSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Algorithm,
    pub seed: u64,
    /// Explicit per-class loss weights; overrides the `class_weights` strategy.
    pub class_weights: Option<Vec<f64>>,
    pub val_fraction: f64,
    /// Return the epoch with the lowest validation loss instead of the last.
    pub keep_best: bool,
    /// Rebalancing applied to the training split only.
    pub balance: BalanceStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: Algorithm::Adam,
            seed: 0,
            class_weights: None,
            val_fraction: 0.1,
            keep_best: true,
            balance: BalanceStrategy::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != NUM_CLASSES || w.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::Config(format!("class_weights must be {NUM_CLASSES} positive values, got {w:?}")));
            }
        }
        Ok(())
    }

    fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig { algorithm: self.optimizer, lr: self.learning_rate, ..OptimizerConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub records: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc);
        }
        s
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub probabilities: [f64; NUM_CLASSES],
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax<T: Scalar>(logits: &[T]) -> [T; NUM_CLASSES] {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    std::array::from_fn(|i| exps[i] / total)
}

/// A vocabulary paired with the network that consumes its ids.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub vocab: Vocab,
    pub model: BertModel<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(vocab: Vocab, config: EncoderConfig, seed: u64) -> Result<Self> {
        let model = BertModel::new(config, vocab.len(), seed)?;
        Ok(Self { vocab, model })
    }

    pub fn from_parts(vocab: Vocab, model: BertModel<T>) -> Result<Self> {
        if model.vocab_size() != vocab.len() {
            return Err(Error::Config(format!(
                "model expects {} tokens but vocabulary has {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        Ok(Self { vocab, model })
    }

    pub fn encode(&self, text: &str) -> EncodedSequence {
        encode_pair(text, None, &self.vocab, self.model.config().max_len).expect("model max_len is at least 3")
    }

    /// Logits graph for a batch of encoded sequences (`b×3`).
    pub fn batch_logits<R: rand::Rng + ?Sized>(
        &self,
        g: &mut ComputeGraph<T>,
        seqs: &[&EncodedSequence],
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let h = self.model.hidden(g, seq, rng, training)?;
            rows.push(self.model.class_logits(g, h)?);
        }
        g.concat_rows(&rows)
    }

    fn eval_logits(&self, seq: &EncodedSequence) -> Result<[T; NUM_CLASSES]> {
        let mut g = ComputeGraph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.batch_logits(&mut g, &[seq], &mut rng, false)?;
        let v = g.value(logits).values();
        Ok(std::array::from_fn(|i| v[i]))
    }

    /// Class probabilities in eval mode.
    pub fn forward_classify(&self, text: &str) -> Result<[T; NUM_CLASSES]> {
        Ok(softmax(&self.eval_logits(&self.encode(text))?))
    }

    pub fn predict_batch<S: AsRef<str> + Sync>(&self, texts: &[S]) -> Result<Vec<Prediction>> {
        texts
            .par_iter()
            .map(|t| {
                let p = self.forward_classify(t.as_ref())?;
                let label = Label::from_index(argmax(&p)).expect("argmax is a class index");
                Ok(Prediction { label, probabilities: p.map(Scalar::as_f64) })
            })
            .collect()
    }

    pub fn evaluate(&self, dataset: &[LabeledExample]) -> Result<(MetricsReport, ConfusionMatrix)> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("evaluation set is empty".into()));
        }
        let texts: Vec<&str> = dataset.iter().map(|e| e.text.as_str()).collect();
        let preds = self.predict_batch(&texts)?;
        let predicted: Vec<usize> = preds.iter().map(|p| p.label.index()).collect();
        let labels: Vec<usize> = dataset.iter().map(|e| e.label.index()).collect();
        let cm = metrics::confusion(&predicted, &labels)?;
        let probs: Vec<[f64; NUM_CLASSES]> = preds.iter().map(|p| p.probabilities).collect();
        Ok((MetricsReport::new(&cm, &probs, &labels)?, cm))
    }

    /// Mean cross-entropy and accuracy in eval mode.
    fn partition_stats(&self, seqs: &[(EncodedSequence, usize)]) -> Result<(f64, f64)> {
        let per: Vec<(f64, bool)> = seqs
            .par_iter()
            .map(|(seq, y)| {
                let logits = self.eval_logits(seq)?;
                let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
                Ok(((lse - logits[*y]).as_f64(), argmax(&logits) == *y))
            })
            .collect::<Result<_>>()?;
        let n = per.len() as f64;
        let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
        let acc = per.iter().filter(|p| p.1).count() as f64 / n;
        Ok((loss, acc))
    }

    /// Records `mean_i w_{y_i}·CE_i` over `batch` on `g` and backpropagates
    /// it into the parameter gradients. Returns the loss value.
    pub fn accumulate_batch_gradient<R: rand::Rng + ?Sized>(
        &mut self,
        batch: &[(EncodedSequence, usize)],
        weights: Option<&[T]>,
        rng: &mut R,
        training: bool,
    ) -> Result<T> {
        let mut g = ComputeGraph::new();
        let seqs: Vec<&EncodedSequence> = batch.iter().map(|(s, _)| s).collect();
        let targets: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
        let logits = self.batch_logits(&mut g, &seqs, rng, training)?;
        let loss = g.cross_entropy(logits, &targets, weights)?;
        let value = g.value(loss).values()[0];
        let params: &mut ParamStore<T> = self.model.params_mut();
        params.zero_grad();
        g.backward(loss, params)?;
        Ok(value)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Per-class split keeping each class's share of validation examples close
/// to `val_fraction`. Every class with at least two examples keeps one in
/// training.
pub fn stratified_split(
    dataset: &[LabeledExample],
    val_fraction: f64,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut rng = stream_rng(seed, 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in Label::ALL {
        let mut members: Vec<&LabeledExample> = dataset.iter().filter(|e| e.label == label).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
        val.extend(members[..n_val].iter().map(|e| (*e).clone()));
        train.extend(members[n_val..].iter().map(|e| (*e).clone()));
    }
    (train, val)
}

/// Splits, rebalances the training side, then fine-tunes.
pub fn train<T: Scalar>(
    dataset: &[LabeledExample],
    config: &TrainConfig,
    init: Classifier<T>,
) -> Result<(Classifier<T>, TrainingCurve)> {
    config.validate()?;
    let hist = ClassHistogram::of(dataset, NUM_CLASSES)?;
    let present = hist.counts.iter().filter(|&&n| n > 0).count();
    if present < 2 {
        let missing: Vec<&str> = hist.missing_classes().into_iter().map(|c| Label::NAMES[c]).collect();
        return Err(Error::Config(format!(
            "training needs at least two classes; missing: {}",
            missing.join(", ")
        )));
    }
    let (train_part, val_part) = stratified_split(dataset, config.val_fraction, config.seed);
    if train_part.is_empty() || val_part.is_empty() {
        return Err(Error::Config(format!(
            "val_fraction {} leaves an empty partition ({} train / {} validation)",
            config.val_fraction,
            train_part.len(),
            val_part.len()
        )));
    }

    let mut balance_rng = stream_rng(config.seed, 2);
    let mut weights = config.class_weights.clone();
    let train_part = match config.balance {
        BalanceStrategy::None => train_part,
        BalanceStrategy::Oversample => balance::oversample(&train_part, NUM_CLASSES, &mut balance_rng)?,
        BalanceStrategy::Undersample => balance::undersample(&train_part, NUM_CLASSES, &mut balance_rng)?,
        BalanceStrategy::ClassWeights => {
            if weights.is_none() {
                weights = Some(balance::class_weights(&train_part, NUM_CLASSES)?);
            }
            train_part
        }
    };
    let config = TrainConfig { class_weights: weights, ..config.clone() };
    train_on(init, &train_part, &val_part, &config)
}

/// Fine-tunes on fixed partitions; no splitting or rebalancing.
pub fn train_on<T: Scalar>(
    mut model: Classifier<T>,
    train_part: &[LabeledExample],
    val_part: &[LabeledExample],
    config: &TrainConfig,
) -> Result<(Classifier<T>, TrainingCurve)> {
    config.validate()?;
    if train_part.is_empty() || val_part.is_empty() {
        return Err(Error::EmptyDataset("training and validation partitions must be nonempty".into()));
    }
    let encode = |part: &[LabeledExample], m: &Classifier<T>| -> Vec<(EncodedSequence, usize)> {
        part.iter().map(|e| (m.encode(&e.text), e.label.index())).collect()
    };
    let train_seqs = encode(train_part, &model);
    let val_seqs = encode(val_part, &model);
    let weights: Option<Vec<T>> = config.class_weights.as_ref().map(|w| w.iter().map(|&x| T::of(x)).collect());

    let mut optimizer = Optimizer::new(config.optimizer_config());
    let mut shuffle_rng = stream_rng(config.seed, 3);
    let mut dropout_rng = stream_rng(config.seed, 4);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut curve = TrainingCurve::default();
    let mut best: Option<(f64, ParamStore<T>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(EncodedSequence, usize)> = chunk.iter().map(|&i| train_seqs[i].clone()).collect();
            model.accumulate_batch_gradient(&batch, weights.as_deref(), &mut dropout_rng, true)?;
            optimizer.step(model.model.params_mut())?;
        }
        let (train_loss, train_acc) = model.partition_stats(&train_seqs)?;
        let (val_loss, val_acc) = model.partition_stats(&val_seqs)?;
        curve.records.push(EpochRecord { epoch, train_loss, train_acc, val_loss, val_acc });
        if config.keep_best && best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.model.params().clone()));
        }
    }
    if let Some((_, params)) = best {
        *model.model.params_mut() = params;
    }
    Ok((model, curve))
}
