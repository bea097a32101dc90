//! Post-norm Transformer encoder stack.
//!
//! Each layer computes
//!
//! ```text
//! y   = LayerNorm(x + Dropout(MultiHead(x, x, x)))
//! out = LayerNorm(y + Dropout(FFN(y)))          FFN(y) = max(0, yW1 + b1)W2 + b2
//! ```
//!
//! with `MultiHead = Concat(head_1..head_h) W_O` and
//! `head_i = softmax(x W_Qi (x W_Ki)ᵀ / √d_k + maskbias) x W_Vi`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::INIT_STD;
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, LAYER_NORM_EPS};

/// Additive score bias at padded key positions.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { num_layers: 2, num_heads: 2, d_model: 64, d_ff: 256, max_len: 64, dropout_rate: 0.1 }
    }
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub w_q: Vec<ParamId>,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
    pub w_o: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl EncoderLayerParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let (d, dk, dff) = (config.d_model, config.d_k(), config.d_ff);
        let mut w_q = Vec::with_capacity(config.num_heads);
        let mut w_k = Vec::with_capacity(config.num_heads);
        let mut w_v = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            w_q.push(store.add_normal(format!("{prefix}.head{h}.w_q"), &[d, dk], INIT_STD, rng));
            w_k.push(store.add_normal(format!("{prefix}.head{h}.w_k"), &[d, dk], INIT_STD, rng));
            w_v.push(store.add_normal(format!("{prefix}.head{h}.w_v"), &[d, dk], INIT_STD, rng));
        }
        let w_o = store.add_normal(format!("{prefix}.w_o"), &[d, d], INIT_STD, rng);
        let w_1 = store.add_normal(format!("{prefix}.ffn.w_1"), &[d, dff], INIT_STD, rng);
        let b_1 = store.add(format!("{prefix}.ffn.b_1"), Tensor::zeros(&[dff]));
        let w_2 = store.add_normal(format!("{prefix}.ffn.w_2"), &[dff, d], INIT_STD, rng);
        let b_2 = store.add(format!("{prefix}.ffn.b_2"), Tensor::zeros(&[d]));
        let ln1_gamma = store.add(format!("{prefix}.ln1.gamma"), Tensor::full(&[d], T::one()));
        let ln1_beta = store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(&[d]));
        let ln2_gamma = store.add(format!("{prefix}.ln2.gamma"), Tensor::full(&[d], T::one()));
        let ln2_beta = store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(&[d]));
        Self { w_q, w_k, w_v, w_o, w_1, b_1, w_2, b_2, ln1_gamma, ln1_beta, ln2_gamma, ln2_beta }
    }

    pub fn num_heads(&self) -> usize {
        self.w_q.len()
    }
}

fn mask_bias<T: Scalar>(mask: &[u8]) -> Result<Tensor<T>> {
    Tensor::new(
        vec![mask.len()],
        mask.iter().map(|&m| if m == 0 { T::of(MASK_BIAS) } else { T::zero() }).collect(),
    )
}

/// Attention weights `softmax(QKᵀ/√d_k + maskbias)`.
pub fn attention_weights<T: Scalar>(g: &mut ComputeGraph<T>, q: Var, k: Var, mask: &[u8]) -> Result<Var> {
    let (_, dq) = g.value(q).dims2()?;
    let (n, dk) = g.value(k).dims2()?;
    if dq != dk {
        return Err(Error::shape("attention (query vs key width)", g.value(q).shape(), g.value(k).shape()));
    }
    if mask.len() != n {
        return Err(Error::Shape(format!("attention mask has length {} for {n} keys", mask.len())));
    }
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    let scores = g.scale(raw, T::one() / T::of(dk as f64).sqrt());
    let bias = g.input(mask_bias(mask)?);
    let masked = g.add_row(scores, bias)?;
    g.softmax_rows(masked)
}

/// Scaled dot-product attention over one head.
pub fn attention<T: Scalar>(g: &mut ComputeGraph<T>, q: Var, k: Var, v: Var, mask: &[u8]) -> Result<Var> {
    let (n, _) = g.value(k).dims2()?;
    let (nv, _) = g.value(v).dims2()?;
    if nv != n {
        return Err(Error::shape("attention (keys vs values)", g.value(k).shape(), g.value(v).shape()));
    }
    let w = attention_weights(g, q, k, mask)?;
    g.matmul(w, v)
}

/// Self-attention with every head concatenated then projected by `W_O`.
pub fn multi_head<T: Scalar>(
    g: &mut ComputeGraph<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &EncoderLayerParams,
    mask: &[u8],
) -> Result<Var> {
    let mut heads = Vec::with_capacity(params.num_heads());
    for h in 0..params.num_heads() {
        let wq = g.param(store, params.w_q[h]);
        let wk = g.param(store, params.w_k[h]);
        let wv = g.param(store, params.w_v[h]);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        heads.push(attention(g, q, k, v, mask)?);
    }
    let concat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let wo = g.param(store, params.w_o);
    g.matmul(concat, wo)
}

/// `max(0, xW1 + b1)W2 + b2`.
pub fn feed_forward<T: Scalar>(
    g: &mut ComputeGraph<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &EncoderLayerParams,
) -> Result<Var> {
    let w1 = g.param(store, params.w_1);
    let b1 = g.param(store, params.b_1);
    let w2 = g.param(store, params.w_2);
    let b2 = g.param(store, params.b_2);
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// Inverted dropout; identity outside training or when `rate` is 0.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    g: &mut ComputeGraph<T>,
    x: Var,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    let m = g.input(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<T: Scalar, R: Rng + ?Sized>(
    g: &mut ComputeGraph<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &EncoderLayerParams,
    mask: &[u8],
    dropout_rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let eps = T::of(LAYER_NORM_EPS);
    let attn = multi_head(g, store, x, params, mask)?;
    let attn = dropout(g, attn, dropout_rate, rng, training)?;
    let res1 = g.add(x, attn)?;
    let gamma1 = g.param(store, params.ln1_gamma);
    let beta1 = g.param(store, params.ln1_beta);
    let y = g.layer_norm(res1, gamma1, beta1, eps)?;

    let ffn = feed_forward(g, store, y, params)?;
    let ffn = dropout(g, ffn, dropout_rate, rng, training)?;
    let res2 = g.add(y, ffn)?;
    let gamma2 = g.param(store, params.ln2_gamma);
    let beta2 = g.param(store, params.ln2_beta);
    g.layer_norm(res2, gamma2, beta2, eps)
}

/// Runs the full stack of `config.num_layers` layers.
#[allow(clippy::too_many_arguments)]
pub fn encode<T: Scalar, R: Rng + ?Sized>(
    g: &mut ComputeGraph<T>,
    store: &ParamStore<T>,
    x: Var,
    config: &EncoderConfig,
    layers: &[EncoderLayerParams],
    mask: &[u8],
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    if layers.len() != config.num_layers {
        return Err(Error::Config(format!(
            "config declares {} layers but {} parameter sets were given",
            config.num_layers,
            layers.len()
        )));
    }
    let mut h = x;
    for layer in layers {
        h = encoder_layer(g, store, h, layer, mask, config.dropout_rate, rng, training)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg(h: usize, d: usize, layers: usize) -> EncoderConfig {
        EncoderConfig { num_layers: layers, num_heads: h, d_model: d, d_ff: 2 * d, max_len: 8, dropout_rate: 0.0 }
    }

    fn layer_store(config: &EncoderConfig, seed: u64, std_scale: f64) -> (ParamStore<f64>, Vec<EncoderLayerParams>) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let layers = (0..config.num_layers)
            .map(|l| EncoderLayerParams::init(&mut store, &format!("layer{l}"), config, &mut r))
            .collect();
        for t in store.tensors_mut() {
            for v in t.values_mut() {
                if *v != 1.0 {
                    *v = *v * std_scale + r.random_range(-0.05..0.05);
                }
            }
        }
        (store, layers)
    }

    #[test]
    fn singleton_attention_returns_value() {
        let mut g = ComputeGraph::new();
        let q = g.input(random(&[1, 3], 1));
        let k = g.input(random(&[1, 3], 2));
        let v = g.input(random(&[1, 3], 3));
        let out = attention(&mut g, q, k, v, &[1]).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(v)) < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = ComputeGraph::new();
        let q = g.input(random(&[2, 4], 1));
        let key_row = random(&[1, 4], 2);
        let k = g.input(Tensor::concat_rows(&[&key_row, &key_row]).unwrap());
        let vt = random(&[2, 4], 3);
        let v = g.input(vt.clone());
        let out = attention(&mut g, q, k, v, &[1, 1]).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mean = 0.5 * (vt.at(0, j) + vt.at(1, j));
                assert!((g.value(out).at(i, j) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn masked_key_is_excluded() {
        let qt = random(&[3, 4], 1);
        let kt = random(&[2, 4], 2);
        let vt = random(&[2, 4], 3);
        let mut g = ComputeGraph::new();
        let (q, k, v) = (g.input(qt.clone()), g.input(kt.clone()), g.input(vt.clone()));
        let both = attention(&mut g, q, k, v, &[1, 0]).unwrap();
        let k1 = g.input(kt.gather_rows(&[0]).unwrap());
        let v1 = g.input(vt.gather_rows(&[0]).unwrap());
        let single = attention(&mut g, q, k1, v1, &[1]).unwrap();
        assert!(g.value(both).max_abs_diff(g.value(single)) < 1e-15);

        let w = attention_weights(&mut g, q, k, &[1, 0]).unwrap();
        for i in 0..3 {
            let row = g.value(w).row(i);
            assert!(row[1] < 1e-12);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let mut g = ComputeGraph::new();
        let q = g.input(random(&[2, 3], 1));
        let k = g.input(random(&[2, 4], 2));
        let v = g.input(random(&[2, 4], 3));
        assert!(matches!(attention(&mut g, q, k, v, &[1, 1]), Err(Error::Shape(_))));
        assert!(matches!(attention(&mut g, k, k, v, &[1]), Err(Error::Shape(_))));
    }

    #[test]
    fn single_head_identity_projection() {
        let config = cfg(1, 4, 1);
        let (mut store, layers) = layer_store(&config, 0, 1.0);
        let p = &layers[0];
        for id in [p.w_q[0], p.w_k[0], p.w_v[0], p.w_o] {
            *store.get_mut(id) = Tensor::identity(4);
        }
        let xt = random(&[1, 4], 5);
        let mut g = ComputeGraph::new();
        let x = g.input(xt.clone());
        let out = multi_head(&mut g, &store, x, p, &[1]).unwrap();
        assert!(g.value(out).max_abs_diff(&xt) < 1e-15);
    }

    #[test]
    fn zero_projections_give_zero() {
        let config = cfg(2, 4, 1);
        let (mut store, layers) = layer_store(&config, 0, 1.0);
        let p = &layers[0];
        for &id in p.w_q.iter().chain(&p.w_k).chain(&p.w_v).chain([&p.w_o]) {
            store.get_mut(id).values_mut().fill(0.0);
        }
        let mut g = ComputeGraph::new();
        let x = g.input(random(&[3, 4], 5));
        let out = multi_head(&mut g, &store, x, p, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(out), &Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn two_heads_match_hand_assembly() {
        let config = cfg(2, 6, 1);
        let (store, layers) = layer_store(&config, 4, 20.0);
        let p = &layers[0];
        let xt = random(&[4, 6], 9);
        let mask = [1, 1, 1, 0];

        let mut g = ComputeGraph::new();
        let x = g.input(xt.clone());
        let out = multi_head(&mut g, &store, x, p, &mask).unwrap();

        // Independent assembly from tensor kernels only.
        let mut heads = Vec::new();
        for h in 0..2 {
            let q = xt.matmul(store.get(p.w_q[h])).unwrap();
            let k = xt.matmul(store.get(p.w_k[h])).unwrap();
            let v = xt.matmul(store.get(p.w_v[h])).unwrap();
            let mut scores = q.matmul(&k.transpose().unwrap()).unwrap().scale(1.0 / 3f64.sqrt());
            for i in 0..4 {
                scores.values_mut()[i * 4 + 3] += MASK_BIAS;
            }
            heads.push(scores.softmax_rows().unwrap().matmul(&v).unwrap());
        }
        let expected = Tensor::concat_cols(&[&heads[0], &heads[1]]).unwrap().matmul(store.get(p.w_o)).unwrap();
        assert!(g.value(out).max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn zero_sublayers_collapse_to_double_norm() {
        let config = cfg(2, 4, 1);
        let (mut store, layers) = layer_store(&config, 0, 1.0);
        let p = &layers[0];
        for &id in p.w_q.iter().chain(&p.w_k).chain(&p.w_v).chain([&p.w_o, &p.w_1, &p.b_1, &p.w_2, &p.b_2]) {
            store.get_mut(id).values_mut().fill(0.0);
        }
        for id in [p.ln1_gamma, p.ln2_gamma] {
            store.get_mut(id).values_mut().fill(1.0);
        }
        for id in [p.ln1_beta, p.ln2_beta] {
            store.get_mut(id).values_mut().fill(0.0);
        }
        let xt = random(&[3, 4], 2);
        let mut g = ComputeGraph::new();
        let x = g.input(xt.clone());
        let out = encoder_layer(&mut g, &store, x, p, &[1, 1, 1], 0.0, &mut rng(0), true).unwrap();
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let once = xt.layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap();
        let twice = once.layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(g.value(out).max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn eval_mode_ignores_rng() {
        let config = EncoderConfig { dropout_rate: 0.5, ..cfg(2, 4, 2) };
        let (store, layers) = layer_store(&config, 1, 1.0);
        let xt = random(&[3, 4], 2);
        let run = |seed, training| {
            let mut g = ComputeGraph::new();
            let x = g.input(xt.clone());
            let out = encode(&mut g, &store, x, &config, &layers, &[1, 1, 1], &mut rng(seed), training).unwrap();
            assert_eq!(g.value(out).shape(), &[3, 4]);
            g.value(out).clone()
        };
        assert_eq!(run(1, false), run(2, false));
        assert_ne!(run(1, true), run(2, true));
        assert_eq!(run(3, true), run(3, true));
    }

    #[test]
    fn empty_stack_is_identity() {
        let config = cfg(2, 4, 0);
        let store = ParamStore::new();
        let xt = random(&[2, 4], 2);
        let mut g = ComputeGraph::new();
        let x = g.input(xt.clone());
        let out = encode(&mut g, &store, x, &config, &[], &[1, 1], &mut rng(0), false).unwrap();
        assert_eq!(g.value(out), &xt);
    }

    #[test]
    fn stack_equals_manual_composition() {
        let config = cfg(2, 4, 2);
        let (store, layers) = layer_store(&config, 6, 10.0);
        let xt = random(&[3, 4], 2);
        let mask = [1, 1, 0];
        let mut g = ComputeGraph::new();
        let x = g.input(xt.clone());
        let stacked = encode(&mut g, &store, x, &config, &layers, &mask, &mut rng(0), false).unwrap();
        let mut g2 = ComputeGraph::new();
        let x = g2.input(xt);
        let h = encoder_layer(&mut g2, &store, x, &layers[0], &mask, 0.0, &mut rng(0), false).unwrap();
        let h = encoder_layer(&mut g2, &store, h, &layers[1], &mask, 0.0, &mut rng(0), false).unwrap();
        assert_eq!(g.value(stacked), g2.value(h));
    }

    #[test]
    fn layer_count_mismatch_is_config_error() {
        let config = cfg(2, 4, 2);
        let (store, layers) = layer_store(&config, 6, 1.0);
        let mut g = ComputeGraph::new();
        let x = g.input(random(&[2, 4], 1));
        let err = encode(&mut g, &store, x, &config, &layers[..1], &[1, 1], &mut rng(0), false);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn rows_are_permutation_equivariant() {
        let config = cfg(2, 4, 2);
        let (store, layers) = layer_store(&config, 8, 10.0);
        let xt = random(&[4, 4], 3);
        let perm = [2, 0, 3, 1];
        let permuted = xt.gather_rows(&perm).unwrap();
        let mut g = ComputeGraph::new();
        let a = g.input(xt);
        let b = g.input(permuted);
        let ya = encode(&mut g, &store, a, &config, &layers, &[1; 4], &mut rng(0), false).unwrap();
        let yb = encode(&mut g, &store, b, &config, &layers, &[1; 4], &mut rng(0), false).unwrap();
        let ya_perm = g.value(ya).gather_rows(&perm).unwrap();
        assert!(ya_perm.max_abs_diff(g.value(yb)) < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig { num_heads: 3, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { dropout_rate: 1.0, ..Default::default() }.validate().is_err());
    }
}
