//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records coarse operations (linear layers, layer norm,
//! multi-head attention, row selection, fused cross-entropy) together with
//! whatever each needs for its backward pass. Parameters are borrowed from a
//! flat parameter list and never copied into the graph.

use crate::scalar::Scalar;
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(usize),
    Gather { table: Var, ids: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix<T>> },
    RowSelect { sources: Vec<Option<Var>>, index: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, picks: Vec<(usize, usize)>, scale: T, probs: Matrix<T> },
}

struct Node<T> {
    value: Option<Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p [Matrix<T>],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

/// Gradients with respect to every parameter that took part in the graph.
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Matrix<T>>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Matrix<T>]) -> Self {
        Self { params, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Input, false)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(index), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let value = self.value(table).gather_rows(&ids);
        let rg = self.rg(table);
        self.push(value, Op::Gather { table, ids }, rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = tensor::linear(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (value, mean, rstd) = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias));
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, mean, rstd }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = Matrix::from_vec(src.rows(), src.cols(), src.data().iter().map(|&v| tensor::gelu(v)).collect());
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Multi-head attention; `causal` restricts query row `i` to key rows `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (value, probs) = tensor::attention(self.value(q), self.value(k), self.value(v), heads, causal.then_some(0));
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(value, Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Row `r` of the result is row `r` of `sources[index[r] - 1]`, or a zero
    /// row when `index[r] == 0`.
    pub fn row_select(&mut self, sources: Vec<Option<Var>>, index: Vec<usize>, cols: usize) -> Var {
        let mut value = Matrix::zeros(index.len(), cols);
        let mut rg = false;
        for (r, &n) in index.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let src = sources[n - 1].expect("selected source must exist");
            value.row_mut(r).copy_from_slice(self.value(src).row(r));
        }
        for s in sources.iter().flatten() {
            rg |= self.rg(*s);
        }
        self.push(value, Op::RowSelect { sources, index }, rg)
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        let src = self.value(x);
        assert_eq!(mask.len(), src.data().len());
        let value = Matrix::from_vec(src.rows(), src.cols(), src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    /// `scale * Σ −log softmax(logits[row])[target]` over `(row, target)` picks; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, picks: Vec<(usize, usize)>, scale: T) -> Var {
        let src = self.value(logits);
        let mut probs = Matrix::zeros(picks.len(), src.cols());
        let mut total = T::zero();
        for (i, &(row, target)) in picks.iter().enumerate() {
            let out = probs.row_mut(i);
            out.copy_from_slice(src.row(row));
            let len = out.len();
            let max = out.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = out.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - out[target];
            tensor::softmax_prefix(out, len);
        }
        let value = Matrix::from_vec(1, 1, vec![total * scale]);
        let rg = self.rg(logits);
        self.push(value, Op::CrossEntropy { logits, picks, scale, probs }, rg)
    }

    /// Back-propagates from the `1 × 1` node `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> ParamGrads<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![T::one()]));
        let mut out = ParamGrads { grads: (0..self.params.len()).map(|_| None).collect() };

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(i) => out.grads[*i] = Some(g),
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &b) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.rg(*x) {
                        let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                        tensor::matmul_nt_acc(&g, wv, &mut dx);
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                        tensor::matmul_tn_acc(xv, &g, &mut dw);
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            accumulate(&mut grads, *b, column_sums(&g));
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (rows, d) = xv.shape();
                    let dn = T::from_usize(d).unwrap();
                    let mut dx = Matrix::zeros(rows, d);
                    let mut dg = Matrix::zeros(1, d);
                    let mut db = Matrix::zeros(1, d);
                    let mut xhat = vec![T::zero(); d];
                    let mut dyh = vec![T::zero(); d];
                    for r in 0..rows {
                        let xr = xv.row(r);
                        let gr = g.row(r);
                        for c in 0..d {
                            xhat[c] = (xr[c] - mean[r]) * rstd[r];
                            dyh[c] = gr[c] * gv.get(0, c);
                            dg.data_mut()[c] += gr[c] * xhat[c];
                            db.data_mut()[c] += gr[c];
                        }
                        let m1 = dyh.iter().copied().sum::<T>() / dn;
                        let m2 = dyh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dyh[c] - m1 - xhat[c] * m2);
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*gain) {
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = Matrix::from_vec(xv.rows(), xv.cols(), xv.data().iter().zip(g.data()).map(|(&v, &d)| d * tensor::gelu_grad(v)).collect());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) = attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &g);
                    if self.rg(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.rg(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::RowSelect { sources, index } => {
                    for (n, src) in sources.iter().enumerate() {
                        let Some(src) = src else { continue };
                        if !self.rg(*src) {
                            continue;
                        }
                        let mut ds = Matrix::zeros(g.rows(), g.cols());
                        for (r, &sel) in index.iter().enumerate() {
                            if sel == n + 1 {
                                ds.row_mut(r).copy_from_slice(g.row(r));
                            }
                        }
                        accumulate(&mut grads, *src, ds);
                    }
                }
                Op::Dropout { x, mask } => {
                    let dx = Matrix::from_vec(g.rows(), g.cols(), g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect());
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, picks, scale, probs } => {
                    let lv = self.value(*logits);
                    let upstream = g.get(0, 0) * *scale;
                    let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                    for (i, &(row, target)) in picks.iter().enumerate() {
                        let dst = dl.row_mut(row);
                        for (o, &p) in dst.iter_mut().zip(probs.row(i)) {
                            *o += p * upstream;
                        }
                        dst[target] -= upstream;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn attention_backward<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize, probs: &[Matrix<T>], dout: &Matrix<T>) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let (n, d) = q.shape();
    let m = k.rows();
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let ds_ = d as isize;
    let ms = m as isize;
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(m, d);
    let mut dv = Matrix::zeros(m, d);
    let mut dp = Matrix::<T>::zeros(n, m);
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        // dV_h = Pᵀ dO_h
        T::gemm(m, n, dh, T::one(), p.data(), (1, ms), &dout.data()[off..], (ds_, 1), T::zero(), &mut dv.data_mut()[off..], (ds_, 1));
        // dP = dO_h V_hᵀ
        T::gemm(n, dh, m, T::one(), &dout.data()[off..], (ds_, 1), &v.data()[off..], (1, ds_), T::zero(), dp.data_mut(), (ms, 1));
        for i in 0..n {
            let prow = p.row(i);
            let drow = dp.row_mut(i);
            let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - dot);
            }
        }
        // dQ_h = scale dS K_h ; dK_h = scale dSᵀ Q_h
        T::gemm(n, m, dh, scale, dp.data(), (ms, 1), &k.data()[off..], (ds_, 1), T::zero(), &mut dq.data_mut()[off..], (ds_, 1));
        T::gemm(m, n, dh, scale, dp.data(), (1, ms), &q.data()[off..], (ds_, 1), T::zero(), &mut dk.data_mut()[off..], (ds_, 1));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of every parameter entry against `backward`.
    fn check(params: Vec<Matrix<f64>>, build: impl Fn(&mut Graph<f64>) -> Var) {
        let loss_of = |ps: &[Matrix<f64>]| {
            let mut g = Graph::new(ps);
            let root = build(&mut g);
            g.value(root).get(0, 0)
        };
        let mut g = Graph::new(&params);
        let root = build(&mut g);
        let grads = g.backward(root);
        let eps = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.grads[pi].clone().unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
            for e in 0..p.data().len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[e] += eps;
                let mut minus = params.clone();
                minus[pi].data_mut()[e] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let a = analytic.data()[e];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-5, "param {pi} entry {e}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn linear_layer_norm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5), random(&mut rng, 5, 6)];
        check(params, |g| {
            let x = g.param(0);
            let w = g.param(1);
            let b = g.param(2);
            let h = g.linear(x, w, Some(b));
            let (ga, be) = (g.param(3), g.param(4));
            let h = g.layer_norm(h, ga, be);
            let h = g.gelu(h);
            let wo = g.param(5);
            let logits = g.linear(h, wo, None);
            g.cross_entropy(logits, vec![(0, 1), (2, 5)], 0.5)
        });
    }

    #[test]
    fn attention_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![random(&mut rng, 6, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 7)];
        check(params, |g| {
            let table = g.param(0);
            let x = g.gather(table, vec![0, 3, 3, 5]);
            let (wq, wk, wv) = (g.param(1), g.param(2), g.param(3));
            let q = g.linear(x, wq, None);
            let k = g.linear(x, wk, None);
            let v = g.linear(x, wv, None);
            let a = g.attention(q, k, v, 2, true);
            let h = g.add(a, x);
            let wo = g.param(4);
            let logits = g.linear(h, wo, None);
            g.cross_entropy(logits, vec![(0, 0), (1, 6), (3, 2)], 1.0 / 3.0)
        });
    }

    #[test]
    fn row_select_routes_gradient_to_selected_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![random(&mut rng, 4, 3), random(&mut rng, 4, 3), random(&mut rng, 4, 3), random(&mut rng, 3, 5)];
        check(params.clone(), |g| {
            let x = g.param(0);
            let a = g.param(1);
            let b = g.param(2);
            let s = g.row_select(vec![Some(a), Some(b)], vec![0, 1, 2, 1], 3);
            let h = g.add(x, s);
            let w = g.param(3);
            let logits = g.linear(h, w, None);
            g.cross_entropy(logits, vec![(0, 1), (1, 2), (2, 3), (3, 4)], 0.25)
        });
        // unselected rows of a source receive no gradient
        let mut g = Graph::new(&params);
        let a = g.param(1);
        let b = g.param(2);
        let s = g.row_select(vec![Some(a), Some(b)], vec![0, 1, 0, 1], 3);
        let w = g.param(3);
        let logits = g.linear(s, w, None);
        let root = g.cross_entropy(logits, vec![(0, 1), (1, 2)], 1.0);
        let grads = g.backward(root);
        assert!(grads.grads[2].as_ref().map_or(true, |m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn inputs_receive_no_gradient_work() {
        let params = vec![Matrix::from_vec(2, 2, vec![1.0, 0.5, -0.5, 2.0])];
        let mut g = Graph::new(&params);
        let x = g.input(Matrix::from_vec(1, 2, vec![0.3, -0.2]));
        let w = g.param(0);
        let y = g.linear(x, w, None);
        let root = g.cross_entropy(y, vec![(0, 0)], 1.0);
        let grads = g.backward(root);
        assert!(grads.grads[0].is_some());
    }
}
