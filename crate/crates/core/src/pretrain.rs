//! Masked-language-model and next-sentence-prediction pretraining.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::model::BertModel;
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use crate::tokenizer::{encode_pair, EncodedSequence, Vocab, CLS, MASK, NUM_SPECIAL, PAD, SEP};

pub const DEFAULT_MASK_PROB: f64 = 0.15;

/// Parses one sentence per line with blank lines between documents.
pub fn parse_corpus(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Selects each ordinary token with probability `p`. A selected token becomes
/// `[MASK]` 80% of the time, a random non-special token 10%, and stays put
/// 10%. Returns the corrupted sequence and, per position, the original id
/// for selected positions (`None` elsewhere).
pub fn mask_tokens<R: Rng + ?Sized>(
    seq: &EncodedSequence,
    p: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(EncodedSequence, Vec<Option<usize>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("mask probability must lie in [0, 1), got {p}")));
    }
    let mut out = seq.clone();
    let mut targets = vec![None; seq.max_len()];
    for (i, &tok) in seq.token_ids.iter().enumerate() {
        if matches!(tok, PAD | CLS | SEP) || seq.attention_mask[i] == 0 {
            continue;
        }
        if rng.random::<f64>() >= p {
            continue;
        }
        targets[i] = Some(tok);
        let action = rng.random::<f64>();
        if action < 0.8 {
            out.token_ids[i] = MASK;
        } else if action < 0.9 && vocab_size > NUM_SPECIAL {
            out.token_ids[i] = rng.random_range(NUM_SPECIAL..vocab_size);
        }
    }
    Ok((out, targets))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub first: String,
    pub second: String,
    pub is_next: bool,
}

pub fn nsp_pairs<R: Rng + ?Sized>(docs: &[Vec<String>], rng: &mut R) -> Result<Vec<SentencePair>> {
    nsp_pairs_with(docs, 0.5, rng)
}

/// One pair per adjacent sentence pair; the true successor is kept with
/// probability `p_next`, otherwise replaced by a sentence drawn uniformly
/// from the other documents.
pub fn nsp_pairs_with<R: Rng + ?Sized>(docs: &[Vec<String>], p_next: f64, rng: &mut R) -> Result<Vec<SentencePair>> {
    if let Some(i) = docs.iter().position(|d| d.len() < 2) {
        return Err(Error::Contract(format!("document {i} has fewer than two sentences")));
    }
    let total: usize = docs.iter().map(Vec::len).sum();
    let mut pairs = Vec::new();
    for (d, doc) in docs.iter().enumerate() {
        for w in doc.windows(2) {
            if rng.random::<f64>() < p_next {
                pairs.push(SentencePair { first: w[0].clone(), second: w[1].clone(), is_next: true });
                continue;
            }
            let others = total - doc.len();
            if others == 0 {
                return Err(Error::Sampling("a random successor needs at least two documents".into()));
            }
            let mut k = rng.random_range(0..others);
            let second = docs
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != d)
                .find_map(|(_, other)| {
                    if k < other.len() {
                        Some(other[k].clone())
                    } else {
                        k -= other.len();
                        None
                    }
                })
                .expect("k indexes the other documents");
            pairs.push(SentencePair { first: w[0].clone(), second, is_next: false });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub seq: EncodedSequence,
    /// Original id at each selected position, `None` (the sentinel) elsewhere.
    pub mlm_targets: Vec<Option<usize>>,
    /// 1 when the second segment really follows the first.
    pub nsp_label: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskedBatch {
    pub examples: Vec<MaskedExample>,
}

impl MaskedBatch {
    pub fn build<R: Rng + ?Sized>(
        pairs: &[SentencePair],
        vocab: &Vocab,
        max_len: usize,
        mask_prob: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut examples = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let seq = encode_pair(&pair.first, Some(&pair.second), vocab, max_len)?;
            let (seq, mlm_targets) = mask_tokens(&seq, mask_prob, vocab.len(), rng)?;
            examples.push(MaskedExample { seq, mlm_targets, nsp_label: usize::from(pair.is_next) });
        }
        Ok(Self { examples })
    }

    pub fn num_selected(&self) -> usize {
        self.examples.iter().map(|e| e.mlm_targets.iter().flatten().count()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub mlm_loss: f64,
    pub nsp_loss: f64,
}

/// Builds both objectives on `g`, returning the summed loss node and values.
fn record_losses<T: Scalar, R: Rng + ?Sized>(
    model: &BertModel<T>,
    g: &mut ComputeGraph<T>,
    batch: &MaskedBatch,
    rng: &mut R,
    training: bool,
) -> Result<(crate::graph::Var, PretrainLosses)> {
    if batch.examples.is_empty() {
        return Err(Error::EmptyDataset("pretraining batch is empty".into()));
    }
    let mut selected_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut nsp_rows = Vec::with_capacity(batch.examples.len());
    let mut nsp_targets = Vec::with_capacity(batch.examples.len());
    for ex in &batch.examples {
        let h = model.hidden(g, &ex.seq, rng, training)?;
        let positions: Vec<usize> = ex.mlm_targets.iter().enumerate().filter_map(|(i, t)| t.map(|_| i)).collect();
        if !positions.is_empty() {
            selected_rows.push(g.gather_rows(h, &positions)?);
            mlm_targets.extend(ex.mlm_targets.iter().flatten());
        }
        nsp_rows.push(model.nsp_logits(g, h)?);
        nsp_targets.push(ex.nsp_label);
    }
    let nsp_logits = g.concat_rows(&nsp_rows)?;
    let nsp = g.cross_entropy(nsp_logits, &nsp_targets, None)?;
    let nsp_loss = g.value(nsp).values()[0].as_f64();
    if selected_rows.is_empty() {
        return Ok((nsp, PretrainLosses { mlm_loss: 0.0, nsp_loss }));
    }
    let rows = g.concat_rows(&selected_rows)?;
    let logits = model.mlm_logits(g, rows)?;
    let mlm = g.cross_entropy(logits, &mlm_targets, None)?;
    let mlm_loss = g.value(mlm).values()[0].as_f64();
    let total = g.add(mlm, nsp)?;
    Ok((total, PretrainLosses { mlm_loss, nsp_loss }))
}

/// Losses in eval mode without touching parameters.
pub fn pretrain_losses<T: Scalar, R: Rng + ?Sized>(
    model: &BertModel<T>,
    batch: &MaskedBatch,
    rng: &mut R,
) -> Result<PretrainLosses> {
    let mut g = ComputeGraph::new();
    Ok(record_losses(model, &mut g, batch, rng, false)?.1)
}

/// Backpropagates `mlm + nsp` into the parameter gradients (zeroed first).
pub fn pretrain_gradient<T: Scalar, R: Rng + ?Sized>(
    model: &mut BertModel<T>,
    batch: &MaskedBatch,
    rng: &mut R,
    training: bool,
) -> Result<PretrainLosses> {
    let mut g = ComputeGraph::new();
    let (loss, values) = record_losses(model, &mut g, batch, rng, training)?;
    let params = model.params_mut();
    params.zero_grad();
    g.backward(loss, params)?;
    Ok(values)
}

/// One optimizer step on `mlm_loss + nsp_loss`; returns the pre-step losses.
pub fn pretrain_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut BertModel<T>,
    batch: &MaskedBatch,
    optimizer: &mut Optimizer<T>,
    rng: &mut R,
) -> Result<PretrainLosses> {
    let losses = pretrain_gradient(model, batch, rng, true)?;
    optimizer.step(model.params_mut())?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 50, batch_size: 8, mask_prob: DEFAULT_MASK_PROB, learning_rate: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainCurve {
    pub steps: Vec<PretrainLosses>,
}

impl PretrainCurve {
    pub const CSV_HEADER: &'static str = "step,mlm_loss,nsp_loss";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (i, l) in self.steps.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, l.mlm_loss, l.nsp_loss);
        }
        s
    }
}

/// Runs `config.steps` steps, resampling pairs and masks every step.
pub fn pretrain<T: Scalar, R: Rng + ?Sized>(
    model: &mut BertModel<T>,
    docs: &[Vec<String>],
    vocab: &Vocab,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainCurve> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut optimizer = Optimizer::new(crate::optim::OptimizerConfig::adam(config.learning_rate));
    let max_len = model.config().max_len;
    let mut curve = PretrainCurve::default();
    let mut pool: Vec<SentencePair> = Vec::new();
    for _ in 0..config.steps {
        if pool.len() < config.batch_size {
            let mut fresh = nsp_pairs(docs, rng)?;
            if fresh.is_empty() {
                return Err(Error::EmptyDataset("corpus yields no sentence pairs".into()));
            }
            fresh.append(&mut pool);
            pool = fresh;
        }
        let take = config.batch_size.min(pool.len());
        let pairs: Vec<SentencePair> = pool.drain(..take).collect();
        let batch = MaskedBatch::build(&pairs, vocab, max_len, config.mask_prob, rng)?;
        curve.steps.push(pretrain_step(model, &batch, &mut optimizer, rng)?);
    }
    Ok(curve)
}
