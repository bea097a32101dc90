//! Token + segment + position input embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tokenizer::{EncodedSequence, NUM_SPECIAL};

/// Standard deviation of every randomly initialised weight.
pub const INIT_STD: f64 = 0.02;

pub const NUM_SEGMENTS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub segment: ParamId,
    pub position: ParamId,
}

impl EmbeddingTables {
    /// Registers the three tables on `store`, drawn from `N(0, 0.02²)`.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab_size: usize,
        d: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab_size < NUM_SPECIAL || d == 0 || max_len == 0 {
            return Err(Error::Config(format!(
                "embedding tables need V >= 5, d >= 1, max_len >= 1 (got V={vocab_size}, d={d}, max_len={max_len})"
            )));
        }
        let token = store.add_normal("embeddings.token", &[vocab_size, d], INIT_STD, rng);
        let segment = store.add_normal("embeddings.segment", &[NUM_SEGMENTS, d], INIT_STD, rng);
        let position = store.add_normal("embeddings.position", &[max_len, d], INIT_STD, rng);
        Ok(Self { token, segment, position })
    }
}

/// Fresh tables in their own store, seeded.
pub fn init_tables<T: Scalar>(
    vocab_size: usize,
    d: usize,
    max_len: usize,
    seed: u64,
) -> Result<(ParamStore<T>, EmbeddingTables)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables = EmbeddingTables::init(&mut store, vocab_size, d, max_len, &mut rng)?;
    Ok((store, tables))
}

/// Row `i` is `token[token_ids[i]] + segment[segment_ids[i]] + position[positions[i]]`.
pub fn embed<T: Scalar>(
    g: &mut ComputeGraph<T>,
    store: &ParamStore<T>,
    seq: &EncodedSequence,
    tables: &EmbeddingTables,
) -> Result<Var> {
    let token = g.param(store, tables.token);
    let segment = g.param(store, tables.segment);
    let position = g.param(store, tables.position);
    let t = g.gather_rows(token, &seq.token_ids)?;
    let s = g.gather_rows(segment, &seq.segment_ids)?;
    let p = g.gather_rows(position, &seq.positions)?;
    let ts = g.add(t, s)?;
    g.add(ts, p)
}
