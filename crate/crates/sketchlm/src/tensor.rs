//! Dense 64-bit float tensors, row-major, no views or strides.
//!
//! Copies are acceptable at this scale; gradient-check fidelity is the
//! reason everything is f64.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                context: format!("tensor data length {} vs dims product {}", data.len(), n),
                left: dims,
                right: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite value in tensor".into()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor { dims, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![1, 1], data: vec![v] }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor { dims: vec![1, data.len()], data }
    }

    /// 2-D constructor from row data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row count for a 2-D tensor (1 for scalars stored as [1,1]).
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        if self.dims.len() == 2 {
            self.dims[1]
        } else {
            self.data.len() / self.dims[0]
        }
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }
}

/// C = A @ B for row-major matrices, A: m x k, B: k x n.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims().len() != 2 || b.dims().len() != 2 || a.cols() != b.rows() {
        return Err(Error::Shape {
            context: "matmul inner dimensions".into(),
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor { dims: vec![m, n], data: out })
}

/// out += A @ B, raw buffers. The ikj order keeps B and out accesses
/// contiguous so the inner loop vectorizes.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out += A^T @ B, A: m x k, B: m x n, out: k x n.
pub(crate) fn matmul_at_b_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators; the split breaks the
/// floating-point dependency chain so the loop pipelines.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let quads = n / 4 * 4;
    let mut i = 0;
    while i < quads {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (s0 + s1) + (s2 + s3);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

/// out += A @ B^T, A: m x k, B: n x k, out: m x n.
pub(crate) fn matmul_a_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in o_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Numerically stabilized softmax of one row, in place.
pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cross-entropy of one logits row against a target id:
/// -log(softmax(logits)[target]), stabilized by max subtraction.
pub fn softmax_cross_entropy_row(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            context: "cross-entropy target".into(),
            index: target,
            bound: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(log_sum - (logits[target] - max))
}

/// Mean over rows of the squared Euclidean row distance:
/// (1/K) * sum_j ||H_j - V_j||^2. Sum over the feature dimension, mean
/// over rows only.
pub fn mse_mean_rows(h: &Tensor, v: &Tensor) -> Result<f64> {
    if !h.same_dims(v) {
        return Err(Error::Shape {
            context: "mse_mean_rows".into(),
            left: h.dims().to_vec(),
            right: v.dims().to_vec(),
        });
    }
    let k = h.rows();
    let mut total = 0.0;
    for (a, b) in h.data().iter().zip(v.data()) {
        let d = a - b;
        total += d * d;
    }
    Ok(total / k as f64)
}

/// GELU, tanh approximation (smooth everywhere, finite-difference friendly).
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent scalar oracle: triple loop, no shared code with matmul_into.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i2 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &i2).unwrap(), a);
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::zeros(vec![2, 2]);
        let b = Tensor::matrix(2, 3, vec![5.0, -1.0, 2.0, 0.5, 9.0, 7.0]).unwrap();
        assert_eq!(matmul(&z, &b).unwrap(), Tensor::zeros(vec![2, 3]));
    }

    #[test]
    fn matmul_column_vector() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
        assert_eq!(c, matmul_oracle(&a, &b));
    }

    #[test]
    fn matmul_random_matches_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (m, k, n) = (
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
            );
            let a = Tensor::matrix(m, k, (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let b = Tensor::matrix(k, n, (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let got = matmul(&a, &b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (x, y) in got.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_dim_mismatch() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = vec![0.3; 4];
        for t in 0..4 {
            let l = softmax_cross_entropy_row(&logits, t).unwrap();
            assert!((l - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let logits = vec![0.1, -0.7, 2.3, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.456).collect();
        let a = softmax_cross_entropy_row(&logits, 2).unwrap();
        let b = softmax_cross_entropy_row(&shifted, 2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_direct_value() {
        // softmax([0, ln 3])[1] = 3/4, so the loss is -ln(0.75).
        let l = softmax_cross_entropy_row(&[0.0, 3.0f64.ln()], 1).unwrap();
        assert!((l - (-0.75f64.ln())).abs() < 1e-12);
        assert!((l - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        assert!(softmax_cross_entropy_row(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut row: Vec<f64> = (0..8).map(|_| rng.gen_range(-30.0..30.0)).collect();
            softmax_row_inplace(&mut row);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mse_identity_and_symmetry() {
        let h = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(mse_mean_rows(&h, &h).unwrap(), 0.0);
        // Scalar-loop oracle: (1 + 4) / 2.
        assert!((mse_mean_rows(&h, &v).unwrap() - 2.5).abs() < 1e-15);
        assert_eq!(
            mse_mean_rows(&h, &v).unwrap(),
            mse_mean_rows(&v, &h).unwrap()
        );
    }

    #[test]
    fn mse_unit_offset() {
        // Every entry differs by 1 with d=3: each row contributes 3.
        for k in 1..4 {
            let h = Tensor::zeros(vec![k, 3]);
            let v = Tensor::new(vec![k, 3], vec![1.0; k * 3]).unwrap();
            assert!((mse_mean_rows(&h, &v).unwrap() - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mse_shape_mismatch() {
        let h = Tensor::zeros(vec![2, 2]);
        let v = Tensor::zeros(vec![2, 3]);
        assert!(mse_mean_rows(&h, &v).is_err());
    }

    #[test]
    fn tensor_rejects_non_finite() {
        assert!(Tensor::new(vec![1, 2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1, 2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_deriv(x)).abs() < 1e-8, "x={x}");
        }
    }
}
