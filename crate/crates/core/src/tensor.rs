//! Dense row-major matrices and the forward kernels used by the model.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Copies the given rows into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Self {
        let mut out = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        Self::from_vec(rows.len(), self.cols, out)
    }

    pub fn push_row(&mut self, row: &[T]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect() }
    }

    pub fn stride(&self) -> (isize, isize) {
        (self.cols as isize, 1)
    }

    pub fn stride_t(&self) -> (isize, isize) {
        (1, self.cols as isize)
    }
}

/// `a · b`
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut c = Matrix::zeros(a.rows, b.cols);
    T::gemm(a.rows, a.cols, b.cols, T::one(), &a.data, a.stride(), &b.data, b.stride(), T::zero(), &mut c.data, (b.cols as isize, 1));
    c
}

/// `c += a · bᵀ`
pub fn matmul_nt_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, c: &mut Matrix<T>) {
    assert_eq!(a.cols, b.cols);
    assert_eq!((c.rows, c.cols), (a.rows, b.rows));
    let n = c.cols as isize;
    T::gemm(a.rows, a.cols, b.rows, T::one(), &a.data, a.stride(), &b.data, b.stride_t(), T::one(), &mut c.data, (n, 1));
}

/// `c += aᵀ · b`
pub fn matmul_tn_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, c: &mut Matrix<T>) {
    assert_eq!(a.rows, b.rows);
    assert_eq!((c.rows, c.cols), (a.cols, b.cols));
    let n = c.cols as isize;
    T::gemm(a.cols, a.rows, b.cols, T::one(), &a.data, a.stride_t(), &b.data, b.stride(), T::one(), &mut c.data, (n, 1));
}

/// `x · w + b` with `w` of shape `in × out` and `b` a `1 × out` row.
pub fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: Option<&Matrix<T>>) -> Matrix<T> {
    let mut y = matmul(x, w);
    if let Some(b) = b {
        add_row_broadcast(&mut y, b);
    }
    y
}

pub fn add_row_broadcast<T: Scalar>(y: &mut Matrix<T>, b: &Matrix<T>) {
    assert_eq!(b.rows, 1);
    assert_eq!(b.cols, y.cols);
    for r in 0..y.rows {
        for (v, &bb) in y.row_mut(r).iter_mut().zip(b.row(0)) {
            *v += bb;
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Returns the output and the per-row
/// mean and reciprocal standard deviation.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let d = x.cols;
    let dn = T::from_usize(d).unwrap();
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let mut y = Matrix::zeros(x.rows, d);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in y.row_mut(r).iter_mut().zip(row).zip(gain.row(0).iter().zip(bias.row(0))) {
            *o = (v - mean) * rstd * g + b;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()), T::from_f64_lossy(0.044715))
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Numerically stable softmax of one row, restricted to the first `len`
/// entries; entries at `len..` are set to zero.
pub fn softmax_prefix<T: Scalar>(row: &mut [T], len: usize) {
    let max = row[..len].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..len] {
        *v /= sum;
    }
    for v in &mut row[len..] {
        *v = T::zero();
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `n × d`, `k` and `v` are `m × d`. With `causal`, query row `i`
/// sees key rows `0..=i + causal_shift` only. Returns the `n × d` output and
/// the attention probabilities per head (`n × m` each).
pub fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize, causal: Option<usize>) -> (Matrix<T>, Vec<Matrix<T>>) {
    let (n, d) = q.shape();
    let m = k.rows;
    assert_eq!(k.cols, d);
    assert_eq!(v.shape(), (m, d));
    assert_eq!(d % heads, 0, "model width must divide into heads");
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = Matrix::zeros(n, d);
    let mut all_probs = Vec::with_capacity(heads);
    let ds = d as isize;
    for h in 0..heads {
        let off = h * dh;
        let mut s = Matrix::zeros(n, m);
        T::gemm(n, dh, m, scale, &q.data[off..], (ds, 1), &k.data[off..], (1, ds), T::zero(), &mut s.data, (m as isize, 1));
        for i in 0..n {
            let visible = match causal {
                Some(shift) => (i + shift + 1).min(m),
                None => m,
            };
            softmax_prefix(s.row_mut(i), visible);
        }
        T::gemm(n, m, dh, T::one(), &s.data, (m as isize, 1), &v.data[off..], (ds, 1), T::zero(), &mut out.data[off..], (ds, 1));
        all_probs.push(s);
    }
    (out, all_probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let x = Matrix::from_vec(2, 4, vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]);
        let g = Matrix::from_vec(1, 4, vec![1.0; 4]);
        let b = Matrix::zeros(1, 4);
        let (y, _, _) = layer_norm(&x, &g, &b);
        for r in 0..2 {
            let mean: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            let var: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn causal_attention_first_row_sees_only_itself() {
        let q = Matrix::from_fn(3, 4, |r, c| (r + c) as f64 * 0.1);
        let k = Matrix::from_fn(3, 4, |r, c| (r * c) as f64 * 0.2);
        let v = Matrix::from_fn(3, 4, |r, c| r as f64 + c as f64);
        let (out, probs) = attention(&q, &k, &v, 2, Some(0));
        assert_eq!(out.row(0), v.row(0));
        for p in &probs {
            assert_eq!(p.get(0, 1), 0.0);
            assert_eq!(p.get(1, 2), 0.0);
            for r in 0..3 {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
