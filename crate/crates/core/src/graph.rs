//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`ComputeGraph`] records every primitive as it runs. Recording order is a
//! valid topological order, so [`ComputeGraph::backward`] simply walks the tape
//! in reverse. The tape is built for one forward pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{layer_norm_forward, Tensor};

/// Handle to a value recorded on a [`ComputeGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, indices: Vec<usize> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Option<Vec<T>>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct ComputeGraph<T> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> ComputeGraph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// A trainable leaf backed by `store`. Repeated calls for the same id
    /// return the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let mut value = store.get(id).clone();
        value.clear_grad();
        let v = self.push(value, Op::Param(id), &[]);
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(b))?;
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, xhat, inv_std) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, width)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(indices)?;
        Ok(self.push(out, Op::GatherRows { table, indices: indices.to_vec() }, &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Mean over rows of `−w_y · log softmax(logits)_y`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::Shape(format!("cross_entropy: {b} logit rows but {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target class {bad} out of range for {c} classes")));
        }
        if let Some(w) = weights {
            if w.len() != c {
                return Err(Error::Shape(format!("cross_entropy: {} class weights for {c} classes", w.len())));
            }
            if w.iter().any(|&x| !(x > T::zero())) {
                return Err(Error::Contract("class weights must be positive".into()));
            }
        }
        let x = self.value(logits).values();
        let mut probs = Vec::with_capacity(b * c);
        let mut total = T::zero();
        for (row, &y) in x.chunks(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            let w = weights.map_or(T::one(), |w| w[y]);
            total = total + w * (lse - row[y]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(b as f64);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.map(<[T]>::to_vec), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Activation pattern of every ReLU on the tape (`true` where the input
    /// was positive). Finite-difference checks use it to skip kinks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).values().iter().map(|&v| v > T::zero()).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Smallest |pre-activation| over every ReLU on the tape.
    pub fn relu_margin(&self) -> T {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).values().iter().map(|v| v.abs()).fold(T::infinity(), T::min)),
                _ => None,
            })
            .fold(T::infinity(), T::min)
    }

    /// Propagates d(loss)/d(·) back through the tape and adds the result into
    /// the gradient slots of every parameter leaf in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) -> Result<()> {
        let out_shape = node.value.shape().to_vec();
        let grad_tensor = || Tensor::new(out_shape.clone(), g.to_vec());
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let slot = store.get_mut(*id).ensure_grad();
                for (s, &d) in slot.iter_mut().zip(g) {
                    *s = *s + d;
                }
            }
            Op::MatMul(a, b) => {
                let dc = grad_tensor()?;
                if self.wants(*a) {
                    let da = dc.matmul(&self.value(*b).transpose()?)?;
                    accumulate(grads, *a, da.values());
                }
                if self.wants(*b) {
                    let db = self.value(*a).transpose()?.matmul(&dc)?;
                    accumulate(grads, *b, db.values());
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(x, b) => {
                accumulate(grads, *x, g);
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<T> = g.iter().zip(self.value(*b).values()).map(|(&d, &y)| d * y).collect();
                    accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<T> = g.iter().zip(self.value(*a).values()).map(|(&d, &x)| d * x).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<T> = g.iter().map(|&d| d * *s).collect();
                accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<T> = g
                    .iter()
                    .zip(self.value(*a).values())
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let (_, n) = node.value.dims2()?;
                let mut da = Vec::with_capacity(g.len());
                for (y, d) in node.value.values().chunks(n).zip(g.chunks(n)) {
                    let dot: T = y.iter().zip(d).map(|(&p, &q)| p * q).sum();
                    da.extend(y.iter().zip(d).map(|(&p, &q)| p * (q - dot)));
                }
                accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (_, d) = node.value.dims2()?;
                let gv = self.value(*gamma).values();
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for (dy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + dy[j] * h[j];
                        }
                    }
                    accumulate(grads, *gamma, &dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); d];
                    for dy in g.chunks(d) {
                        for j in 0..d {
                            db[j] = db[j] + dy[j];
                        }
                    }
                    accumulate(grads, *beta, &db);
                }
                if self.wants(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for ((dy, h), &inv) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<T> = dy.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                        dx.extend(dh.iter().zip(h).map(|(&a, &b)| inv / dn * (dn * a - sum_dh - b * sum_dh_h)));
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Transpose(a) => {
                let da = grad_tensor()?.transpose()?;
                accumulate(grads, *a, da.values());
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2()?;
                let (_, w) = node.value.dims2()?;
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, &dx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * n + offset..i * n + offset + w]);
                        }
                        accumulate(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::GatherRows { table, indices } => {
                let (m, n) = self.value(*table).dims2()?;
                let mut dt = vec![T::zero(); m * n];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..n {
                        dt[i * n + j] = dt[i * n + j] + g[k * n + j];
                    }
                }
                accumulate(grads, *table, &dt);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                accumulate(grads, *a, &da);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (b, c) = self.value(*logits).dims2()?;
                let scale = g[0] / T::of(b as f64);
                let mut dl = probs.clone();
                for (i, &y) in targets.iter().enumerate() {
                    let w = weights.as_ref().map_or(T::one(), |w| w[y]);
                    dl[i * c + y] = dl[i * c + y] - T::one();
                    for v in &mut dl[i * c..(i + 1) * c] {
                        *v = *v * w * scale;
                    }
                }
                accumulate(grads, *logits, &dl);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contribution: &[T]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, &c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(shape: &[usize], values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_f64(shape, values).unwrap());
        (store, id)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (mut store, id) = store_with(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, 7.0]);
        let mut g = ComputeGraph::new();
        let w = g.param(&store, id);
        let loss = g.sum(w);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        let (mut store, id) = store_with(&[1, 2], &[1.0, 2.0]);
        let mut g = ComputeGraph::new();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut store, id) = store_with(&[2], &[1.0, 2.0]);
        let mut g = ComputeGraph::new();
        let w = g.param(&store, id);
        assert!(matches!(g.backward(w, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn param_is_memoised() {
        let (store, id) = store_with(&[1], &[1.0]);
        let mut g = ComputeGraph::new();
        assert_eq!(g.param(&store, id), g.param(&store, id));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = ComputeGraph::<f64>::new();
        let uniform = g.input(Tensor::zeros(&[2, 3]));
        let l = g.cross_entropy(uniform, &[0, 2], None).unwrap();
        assert!((g.value(l).values()[0] - 3f64.ln()).abs() < 1e-15);

        let confident = g.input(Tensor::from_f64(&[1, 3], &[10.0, 0.0, 0.0]).unwrap());
        let l = g.cross_entropy(confident, &[0], None).unwrap();
        let direct = -((10f64).exp() / ((10f64).exp() + 2.0)).ln();
        assert!((g.value(l).values()[0] - direct).abs() < 1e-15);
        assert!(g.value(l).values()[0] < 1e-4);

        let single = g.input(Tensor::zeros(&[1, 3]));
        let l = g.cross_entropy(single, &[0], Some(&[2.0, 1.0, 1.0])).unwrap();
        assert!((g.value(l).values()[0] - 2.0 * 3f64.ln()).abs() < 1e-15);

        assert!(matches!(g.cross_entropy(single, &[3], None), Err(Error::Index(_))));
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let (mut store, id) = store_with(&[1, 2], &[1.0, 2.0]);
        let mut g = ComputeGraph::new();
        let c = g.input(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        let w = g.param(&store, id);
        let y = g.matmul(w, c).unwrap();
        let loss = g.sum(y);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[3.0, 4.0]);
    }
}
