//! The full network: embeddings, encoder stack, and the three output heads
//! (sentiment classifier, next-sentence predictor, tied masked-LM projection).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{embed, EmbeddingTables, INIT_STD};
use crate::encoder::{encode, EncoderConfig, EncoderLayerParams};
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::EncodedSequence;

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut ComputeGraph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Parameters plus the handles that locate each weight inside them.
#[derive(Clone, Debug)]
pub struct BertModel<T> {
    config: EncoderConfig,
    vocab_size: usize,
    params: ParamStore<T>,
    pub embeddings: EmbeddingTables,
    pub layers: Vec<EncoderLayerParams>,
    pub classifier: Linear,
    pub nsp_head: Linear,
}

impl<T: Scalar> BertModel<T> {
    /// Randomly initialised model; identical seeds give identical weights.
    pub fn new(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embeddings = EmbeddingTables::init(&mut params, vocab_size, config.d_model, config.max_len, &mut rng)?;
        let layers = (0..config.num_layers)
            .map(|l| EncoderLayerParams::init(&mut params, &format!("layer{l}"), &config, &mut rng))
            .collect();
        let classifier = Linear::init(&mut params, "classifier", config.d_model, NUM_CLASSES, &mut rng);
        let nsp_head = Linear::init(&mut params, "nsp", config.d_model, 2, &mut rng);
        Ok(Self { config, vocab_size, params, embeddings, layers, classifier, nsp_head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Parameter names and shapes in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    /// Final hidden states for the real (non-pad) prefix of `seq`.
    ///
    /// Padded positions are masked out of every attention row, so they never
    /// influence real positions and are dropped before the forward pass.
    pub fn hidden<R: Rng + ?Sized>(
        &self,
        g: &mut ComputeGraph<T>,
        seq: &EncodedSequence,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if seq.max_len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds model max_len {}",
                seq.max_len(),
                self.config.max_len
            )));
        }
        let seq = seq.trimmed();
        self.hidden_full(g, &seq, rng, training)
    }

    /// Hidden states for every position of `seq`, padding included.
    pub fn hidden_full<R: Rng + ?Sized>(
        &self,
        g: &mut ComputeGraph<T>,
        seq: &EncodedSequence,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        let x = embed(g, &self.params, seq, &self.embeddings)?;
        encode(g, &self.params, x, &self.config, &self.layers, &seq.attention_mask, rng, training)
    }

    /// Sentiment logits (`1×3`) from the `[CLS]` row of `hidden`.
    pub fn class_logits(&self, g: &mut ComputeGraph<T>, hidden: Var) -> Result<Var> {
        let cls = g.gather_rows(hidden, &[0])?;
        self.classifier.forward(g, &self.params, cls)
    }

    pub fn nsp_logits(&self, g: &mut ComputeGraph<T>, hidden: Var) -> Result<Var> {
        let cls = g.gather_rows(hidden, &[0])?;
        self.nsp_head.forward(g, &self.params, cls)
    }

    /// Vocabulary logits for `rows` via the transposed token table.
    pub fn mlm_logits(&self, g: &mut ComputeGraph<T>, rows: Var) -> Result<Var> {
        let table = g.param(&self.params, self.embeddings.token);
        let t = g.transpose(table)?;
        g.matmul(rows, t)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.find(name)
    }
}
