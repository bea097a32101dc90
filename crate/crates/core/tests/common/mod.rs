//! Oracles shared by the integration tests: central finite differences and
//! brute-force metric recounts.
#![allow(dead_code)]

use bertlite::embedding::NUM_SEGMENTS;
use bertlite::encoder::EncoderConfig;
use bertlite::model::BertModel;
use bertlite::params::{ParamId, ParamStore};
use bertlite::tokenizer::{EncodedSequence, CLS, NUM_SPECIAL, SEP};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Below this analytic magnitude the absolute tolerance applies instead.
pub const SMALL_GRAD: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
/// Points this close to a ReLU kink are not probed.
pub const KINK_MARGIN: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn gradient_matches(analytic: f64, numeric: f64) -> bool {
    if analytic.abs() < SMALL_GRAD {
        (analytic - numeric).abs() <= ABS_TOL
    } else {
        relative_error(analytic, numeric) <= REL_TOL
    }
}

/// What one forward pass reports: the scalar loss and the ReLU sign pattern
/// and smallest |pre-activation|, so kinks can be avoided.
pub struct Evaluation {
    pub loss: f64,
    pub relu_pattern: Vec<bool>,
    pub relu_margin: f64,
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    /// Checked coordinates whose analytic gradient exceeded `SMALL_GRAD`.
    pub significant: usize,
    pub worst_relative: f64,
    pub failures: Vec<String>,
}

/// Compares the gradients already stored on `store` against central
/// differences of `forward` at each coordinate.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    coords: &[(ParamId, usize)],
    mut forward: impl FnMut(&ParamStore<f64>) -> Evaluation,
) -> GradCheck {
    let base = forward(store);
    let mut out = GradCheck::default();
    for &(id, i) in coords {
        let analytic = store.get(id).grad().map_or(0.0, |g| g[i]);
        let original = store.get(id).values()[i];
        store.get_mut(id).values_mut()[i] = original + FD_STEP;
        let plus = forward(store);
        store.get_mut(id).values_mut()[i] = original - FD_STEP;
        let minus = forward(store);
        store.get_mut(id).values_mut()[i] = original;
        if base.relu_margin < KINK_MARGIN
            || plus.relu_pattern != base.relu_pattern
            || minus.relu_pattern != base.relu_pattern
        {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
        out.checked += 1;
        if analytic.abs() >= SMALL_GRAD {
            out.significant += 1;
            out.worst_relative = out.worst_relative.max(relative_error(analytic, numeric));
        }
        if !gradient_matches(analytic, numeric) {
            out.failures.push(format!("{}[{i}]: analytic {analytic:e} numeric {numeric:e}", store.name(id)));
        }
    }
    out
}

/// `per_tensor` coordinates from every tensor, then random extras up to `total`.
pub fn probe_coordinates<R: Rng>(store: &ParamStore<f64>, per_tensor: usize, total: usize, rng: &mut R) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut coords = Vec::new();
    for &id in &ids {
        for _ in 0..per_tensor {
            coords.push((id, rng.random_range(0..store.get(id).len())));
        }
    }
    while coords.len() < total {
        let id = ids[rng.random_range(0..ids.len())];
        coords.push((id, rng.random_range(0..store.get(id).len())));
    }
    coords
}

/// Replaces every parameter with `value + N(0, std²)` so gradients are not
/// drowned by the tiny default initialisation.
pub fn jitter<R: Rng>(store: &mut ParamStore<f64>, std: f64, rng: &mut R) {
    let normal = Normal::new(0.0, std).unwrap();
    for t in store.tensors_mut() {
        for v in t.values_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// `[CLS] w… [SEP]` with random ordinary tokens; `real` ≤ `len` positions
/// are unmasked and the rest padded.
pub fn random_sequence<R: Rng>(len: usize, real: usize, vocab_size: usize, rng: &mut R) -> EncodedSequence {
    assert!(real >= 2 && real <= len);
    let mut token_ids = vec![0; len];
    token_ids[0] = CLS;
    for t in token_ids.iter_mut().take(real - 1).skip(1) {
        *t = rng.random_range(NUM_SPECIAL..vocab_size);
    }
    token_ids[real - 1] = SEP;
    let split = rng.random_range(1..real);
    let segment_ids = (0..len).map(|i| usize::from(i >= split && i < real) % NUM_SEGMENTS).collect();
    EncodedSequence {
        token_ids,
        segment_ids,
        positions: (0..len).collect(),
        attention_mask: (0..len).map(|i| u8::from(i < real)).collect(),
    }
}

pub fn tiny_encoder(max_len: usize) -> EncoderConfig {
    EncoderConfig { num_layers: 2, num_heads: 2, d_model: 8, d_ff: 16, max_len, dropout_rate: 0.1 }
}

pub fn tiny_model(max_len: usize, vocab_size: usize, seed: u64) -> BertModel<f64> {
    BertModel::new(tiny_encoder(max_len), vocab_size, seed).unwrap()
}

/// Per-class counts recomputed pair by pair.
pub struct Recount {
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub accuracy: f64,
}

pub fn recount(predictions: &[usize], labels: &[usize]) -> Recount {
    let mut precision = [0.0; 3];
    let mut recall = [0.0; 3];
    let mut f1 = [0.0; 3];
    for c in 0..3 {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == c, y == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                (false, false) => {}
            }
        }
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        precision[c] = div(tp, tp + fp);
        recall[c] = div(tp, tp + fneg);
        f1[c] = div(2.0 * tp, 2.0 * tp + fp + fneg);
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Recount { precision, recall, f1, accuracy: correct as f64 / labels.len() as f64 }
}

pub fn recount_log_loss(probabilities: &[[f64; 3]], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (p, &y) in probabilities.iter().zip(labels) {
        total -= p[y].clamp(1e-15, 1.0 - 1e-15).ln();
    }
    total / labels.len() as f64
}

/// Random probability vector over three classes.
pub fn random_simplex<R: Rng>(rng: &mut R) -> [f64; 3] {
    let raw: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>() + 1e-3);
    let s: f64 = raw.iter().sum();
    raw.map(|x| x / s)
}
